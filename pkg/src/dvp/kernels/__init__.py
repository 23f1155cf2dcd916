"""Hot kernels with a compiled core and a numpy fallback.

The compiled extension ``_core`` is used when it imports; set
``DVP_PURE_PYTHON=1`` to force the fallback. ``BACKEND`` names the active one.
"""
import os

from . import _fallback

if os.environ.get("DVP_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

topk_counts = _impl.topk_counts
kmeans_assign = _impl.kmeans_assign
rbf_gram = _impl.rbf_gram
sq_distances = _impl.sq_distances
topk_indices = _fallback.topk_indices

__all__ = ["BACKEND", "topk_counts", "kmeans_assign", "rbf_gram", "sq_distances", "topk_indices"]
