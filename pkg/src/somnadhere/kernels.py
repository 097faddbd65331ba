"""Hot-loop kernels, compiled when available.

Set ``SOMNADHERE_PURE_PYTHON=1`` to force the pure-Python implementations.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SOMNADHERE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

breath_onsets = _impl.breath_onsets
best_split = _impl.best_split
tree_predict = _impl.tree_predict

__all__ = ["BACKEND", "breath_onsets", "best_split", "tree_predict"]
