"""Unsupervised multi-object detection and clustering with a mixture-prior scene VAE.

The heavy lifting lives in the ``_core`` extension; this package re-exports
its surface. ``torch`` must be imported first so the extension finds the
libtorch symbols it links against.
"""

import torch as _torch  # noqa: F401  (loads libtorch before the extension)

from ._core import (
    Model,
    average_precision,
    clustering_acc,
    clustering_nmi,
    default_config_yaml,
    generate_dataset,
    make_glyph_dataset,
    normalize_config,
    read_metrics,
    train,
)

__all__ = [
    "Model",
    "average_precision",
    "clustering_acc",
    "clustering_nmi",
    "default_config_yaml",
    "generate_dataset",
    "make_glyph_dataset",
    "normalize_config",
    "read_metrics",
    "train",
]
