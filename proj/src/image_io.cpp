#include "mixdet/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mixdet/errors.hpp"

namespace mixdet {

void save_png(const torch::Tensor& chw, const std::string& path, int compression) {
  TORCH_CHECK(chw.dim() == 3 && (chw.size(0) == 1 || chw.size(0) == 3),
              "save_png expects [1|3, H, W], got ", chw.sizes());
  auto hwc = (chw.detach().to(torch::kFloat) * 255.0)
                 .round()
                 .clamp(0, 255)
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  const int h = int(hwc.size(0)), w = int(hwc.size(1)), c = int(hwc.size(2));
  cv::Mat mat(h, w, c == 1 ? CV_8UC1 : CV_8UC3, hwc.data_ptr<uint8_t>());
  cv::Mat out;
  if (c == 3)
    cv::cvtColor(mat, out, cv::COLOR_RGB2BGR);
  else
    out = mat;
  if (!cv::imwrite(path, out, {cv::IMWRITE_PNG_COMPRESSION, compression}))
    throw IoError("cannot write image: " + path);
}

torch::Tensor load_png(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image: " + path);
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8)
               .clone()
               .permute({2, 0, 1})
               .to(torch::kFloat) /
           255.0;
  return t.contiguous();
}

}  // namespace mixdet
