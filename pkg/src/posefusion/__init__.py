"""Differentiable multi-view fusion of 2D heatmaps into 3D human poses.

Per-pixel activations are back-projected through calibrated cameras into
a shared frame, fused per joint by a softmax centre of mass, and scored
by mean 3D joint error; the whole chain is differentiable, so a 2D
heatmap predictor trains directly against the 3D metric. The package
also ships the invertible multi-view augmentation, the 2D-loss baseline
this approach is compared against, cross-view bounding-box matching, and
a deterministic synthetic scene generator for desk-scale verification.
"""

import os as _os

# Honour the thread override before the numeric stack initialises.
_threads = _os.environ.get("POSEFUSION_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from . import augment, data, fusion, geometry, heatmap, matching, pipeline, tensorgrad  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "augment",
    "data",
    "fusion",
    "geometry",
    "heatmap",
    "matching",
    "pipeline",
    "tensorgrad",
    "__version__",
]
