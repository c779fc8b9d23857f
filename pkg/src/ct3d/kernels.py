"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise the numpy
implementation.  ``CT3D_PURE_PYTHON=1`` forces the numpy path.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CT3D_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

conv3d_forward = _impl.conv3d_forward
conv3d_grad_input = _impl.conv3d_grad_input
conv3d_grad_weight = _impl.conv3d_grad_weight
depthwise_forward = _impl.depthwise_forward
depthwise_grad_input = _impl.depthwise_grad_input
depthwise_grad_weight = _impl.depthwise_grad_weight
natural_spline_moments = _impl.natural_spline_moments
correlate_rows = _impl.correlate_rows

__all__ = [
    "BACKEND",
    "conv3d_forward",
    "conv3d_grad_input",
    "conv3d_grad_weight",
    "depthwise_forward",
    "depthwise_grad_input",
    "depthwise_grad_weight",
    "natural_spline_moments",
    "correlate_rows",
]
