"""Kernel selection.

The compiled extension is optional: if it failed to build (or
AGGBFGS_PURE_PYTHON is set) the numpy fallback is used.  Both expose the
same three functions with identical semantics; see benchmarks/bench_kernels.py
for the speed comparison.
"""
import os

if os.environ.get("AGGBFGS_PURE_PYTHON"):
    from . import _fallback as _impl
else:
    try:
        from . import _core as _impl  # compiled
    except ImportError:
        from . import _fallback as _impl

two_loop = _impl.two_loop
dense_bfgs = _impl.dense_bfgs
downdate_append = _impl.downdate_append
USING_COMPILED = _impl.__name__.endswith("_core")
