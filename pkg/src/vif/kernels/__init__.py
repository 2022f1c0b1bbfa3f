"""Hot row kernels behind the autodiff engine.

The compiled ``_ckernels`` extension is used when it has been built;
otherwise the NumPy implementations in ``_pykernels`` are used. Set
``VIF_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("VIF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

masked_softmax_fwd = _impl.masked_softmax_fwd
softmax_bwd = _impl.softmax_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
inject_fwd = _impl.inject_fwd
inject_bwd = _impl.inject_bwd
gmm_render_fwd = _impl.gmm_render_fwd
gmm_render_bwd = _impl.gmm_render_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd

__all__ = [
    "BACKEND",
    "masked_softmax_fwd",
    "softmax_bwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "inject_fwd",
    "inject_bwd",
    "gmm_render_fwd",
    "gmm_render_bwd",
    "gelu_fwd",
    "gelu_bwd",
]
