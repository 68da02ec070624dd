#include "mixdet/plotting.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mixdet/errors.hpp"

namespace fs = std::filesystem;

namespace mixdet {

namespace {

const cv::Scalar kPalette[10] = {
    {180, 119, 31}, {14, 127, 255},  {44, 160, 44},   {40, 39, 214},
    {189, 103, 148}, {75, 86, 140},  {194, 119, 227}, {127, 127, 127},
    {34, 189, 188},  {207, 190, 23}};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

struct Panel {
  cv::Rect2d rect;
  double x0, x1, y0, y1;

  cv::Point at(double x, double y) const {
    const double sx = x1 > x0 ? (x - x0) / (x1 - x0) : 0.5;
    const double sy = y1 > y0 ? (y - y0) / (y1 - y0) : 0.5;
    return {int(std::lround(rect.x + sx * rect.width)),
            int(std::lround(rect.y + (1.0 - sy) * rect.height))};
  }
};

std::string format_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

void draw_frame(cv::Mat& img, const Panel& p, const std::string& title) {
  const cv::Rect box(int(p.rect.x), int(p.rect.y), int(p.rect.width),
                     int(p.rect.height));
  cv::rectangle(img, box, {80, 80, 80}, 1, cv::LINE_AA);
  cv::putText(img, title, {box.x, box.y - 10}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
              {40, 40, 40}, 1, cv::LINE_AA);
  cv::putText(img, format_tick(p.y1), {box.x - 52, box.y + 8},
              cv::FONT_HERSHEY_SIMPLEX, 0.35, {40, 40, 40}, 1, cv::LINE_AA);
  cv::putText(img, format_tick(p.y0), {box.x - 52, box.y + box.height},
              cv::FONT_HERSHEY_SIMPLEX, 0.35, {40, 40, 40}, 1, cv::LINE_AA);
  cv::putText(img, format_tick(p.x0), {box.x, box.y + box.height + 16},
              cv::FONT_HERSHEY_SIMPLEX, 0.35, {40, 40, 40}, 1, cv::LINE_AA);
  cv::putText(img, format_tick(p.x1), {box.x + box.width - 30,
                                       box.y + box.height + 16},
              cv::FONT_HERSHEY_SIMPLEX, 0.35, {40, 40, 40}, 1, cv::LINE_AA);
}

void draw_series(cv::Mat& img, const Panel& p, const std::vector<double>& xs,
                 const std::vector<double>& ys, const cv::Scalar& color,
                 int marker_radius) {
  std::vector<cv::Point> pts;
  for (size_t i = 0; i < xs.size(); ++i) pts.push_back(p.at(xs[i], ys[i]));
  for (size_t i = 1; i < pts.size(); ++i)
    cv::line(img, pts[i - 1], pts[i], color, 1, cv::LINE_AA);
  for (const auto& pt : pts)
    cv::circle(img, pt, marker_radius, color, cv::FILLED, cv::LINE_AA);
}

void draw_legend(cv::Mat& img, cv::Point top_left,
                 const std::vector<std::pair<std::string, cv::Scalar>>& items) {
  int y = top_left.y;
  for (const auto& [name, color] : items) {
    cv::circle(img, {top_left.x, y}, 4, color, cv::FILLED, cv::LINE_AA);
    cv::putText(img, name, {top_left.x + 10, y + 4}, cv::FONT_HERSHEY_SIMPLEX,
                0.4, {40, 40, 40}, 1, cv::LINE_AA);
    y += 18;
  }
}

void write_image(const cv::Mat& img, const std::string& out_path) {
  const fs::path parent = fs::path(out_path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  if (!cv::imwrite(out_path, img))
    throw IoError("cannot write image: " + out_path);
}

std::pair<double, double> padded_range(double lo, double hi) {
  if (!(hi > lo)) return {lo - 1.0, hi + 1.0};
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

}  // namespace

LatentTable read_latents_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open latent export: " + path);

  std::string header;
  if (!std::getline(in, header))
    throw ValidationError("latent export has no header: " + path);
  const auto head = split_csv_line(header);
  if (head.size() < 4 || head[0] != "scene_id" || head[1] != "cluster" ||
      head[2] != "class")
    throw ValidationError("unexpected latent export header: " + header);
  const int64_t dims = int64_t(head.size()) - 3;
  for (int64_t d = 0; d < dims; ++d)
    if (head[size_t(3 + d)] != "dim_" + std::to_string(d))
      throw ValidationError("unexpected latent export header: " + header);

  LatentTable table;
  std::vector<float> values;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (int64_t(fields.size()) != dims + 3)
      throw ValidationError("latent export row has " +
                            std::to_string(fields.size()) + " fields, expected " +
                            std::to_string(dims + 3));
    try {
      table.scene_ids.push_back(fields[0]);
      table.clusters.push_back(std::stoll(fields[1]));
      table.classes.push_back(std::stoll(fields[2]));
      for (int64_t d = 0; d < dims; ++d)
        values.push_back(std::stof(fields[size_t(3 + d)]));
    } catch (const std::logic_error&) {
      throw ValidationError("unparseable latent export row: " + line);
    }
  }
  const int64_t n = int64_t(table.scene_ids.size());
  table.features =
      n == 0 ? torch::zeros({0, dims}, torch::kFloat32)
             : torch::from_blob(values.data(), {n, dims}, torch::kFloat32)
                   .clone();
  return table;
}

torch::Tensor pca_2d(const torch::Tensor& features) {
  if (features.dim() != 2)
    throw ShapeError("pca_2d expects [N, A], got " +
                     std::to_string(features.dim()) + " dims");
  auto x = features.to(torch::kDouble);
  if (x.size(1) < 2)
    x = torch::cat({x, torch::zeros({x.size(0), 2 - x.size(1)},
                                    torch::kDouble)}, 1);
  x = x - x.mean(0, true);
  const auto vh = std::get<2>(torch::linalg_svd(x, false));
  auto proj = x.matmul(vh.slice(0, 0, 2).t());
  return proj.to(torch::kFloat32);
}

void plot_training_curves(const std::vector<MetricsLogRow>& rows,
                          const std::string& out_path) {
  if (rows.empty()) throw ValidationError("metrics log has no rows to plot");

  cv::Mat img(450, 1200, CV_8UC3, cv::Scalar(255, 255, 255));

  std::vector<double> steps, recon, total;
  for (const auto& r : rows) {
    steps.push_back(double(r.step));
    recon.push_back(r.recon);
    total.push_back(r.total);
  }
  double lo = *std::min_element(recon.begin(), recon.end());
  double hi = *std::max_element(recon.begin(), recon.end());
  lo = std::min(lo, *std::min_element(total.begin(), total.end()));
  hi = std::max(hi, *std::max_element(total.begin(), total.end()));
  auto [ylo, yhi] = padded_range(lo, hi);

  Panel losses{{70, 40, 490, 360}, steps.front(), steps.back(), ylo, yhi};
  if (!(losses.x1 > losses.x0)) losses.x1 = losses.x0 + 1;
  draw_frame(img, losses, "losses / step");
  draw_series(img, losses, steps, recon, kPalette[0], 2);
  draw_series(img, losses, steps, total, kPalette[3], 2);
  draw_legend(img, {90, 60}, {{"recon", kPalette[0]}, {"total", kPalette[3]}});

  std::vector<double> esteps, ap, acc, nmi;
  for (const auto& r : rows)
    if (r.eval) {
      esteps.push_back(double(r.step));
      ap.push_back(r.eval->ap);
      acc.push_back(r.eval->acc);
      nmi.push_back(r.eval->nmi);
    }
  Panel eval{{670, 40, 490, 360},
             esteps.empty() ? 0.0 : esteps.front(),
             esteps.empty() ? 1.0 : esteps.back(), 0.0, 1.0};
  if (!(eval.x1 > eval.x0)) eval.x1 = eval.x0 + 1;
  draw_frame(img, eval, "evaluation / step");
  if (esteps.empty()) {
    cv::putText(img, "no evaluation rows", {760, 220}, cv::FONT_HERSHEY_SIMPLEX,
                0.5, {120, 120, 120}, 1, cv::LINE_AA);
  } else {
    draw_series(img, eval, esteps, ap, kPalette[0], 4);
    draw_series(img, eval, esteps, acc, kPalette[2], 4);
    draw_series(img, eval, esteps, nmi, kPalette[3], 4);
    draw_legend(img, {690, 60},
                {{"ap", kPalette[0]}, {"acc", kPalette[2]}, {"nmi", kPalette[3]}});
  }

  write_image(img, out_path);
}

void plot_latent_scatter(const LatentTable& table, const std::string& out_path) {
  const int64_t n = table.features.defined() ? table.features.size(0) : 0;
  if (n == 0) throw ValidationError("latent export has no rows to plot");
  if (int64_t(table.classes.size()) != n)
    throw ValidationError("latent export class column does not match rows");

  const auto proj = pca_2d(table.features);
  const auto acc = proj.accessor<float, 2>();
  double xlo = acc[0][0], xhi = acc[0][0], ylo = acc[0][1], yhi = acc[0][1];
  for (int64_t i = 0; i < n; ++i) {
    xlo = std::min(xlo, double(acc[i][0]));
    xhi = std::max(xhi, double(acc[i][0]));
    ylo = std::min(ylo, double(acc[i][1]));
    yhi = std::max(yhi, double(acc[i][1]));
  }
  auto [px0, px1] = padded_range(xlo, xhi);
  auto [py0, py1] = padded_range(ylo, yhi);

  cv::Mat img(640, 720, CV_8UC3, cv::Scalar(255, 255, 255));
  Panel panel{{60, 40, 520, 560}, px0, px1, py0, py1};
  draw_frame(img, panel, "appearance latents, 2-D projection");
  for (int64_t i = 0; i < n; ++i) {
    const auto color = kPalette[table.classes[size_t(i)] % 10];
    cv::circle(img, panel.at(acc[i][0], acc[i][1]), 3, color, cv::FILLED,
               cv::LINE_AA);
  }

  std::set<int64_t> present(table.classes.begin(), table.classes.end());
  std::vector<std::pair<std::string, cv::Scalar>> legend;
  for (int64_t cls : present)
    legend.emplace_back("class " + std::to_string(cls), kPalette[cls % 10]);
  draw_legend(img, {610, 60}, legend);

  write_image(img, out_path);
}

}  // namespace mixdet
