"""
Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the pure-Python
reference module provides the same functions.
"""
try:
    from . import _kernels as _impl
    BACKEND = "compiled"
except ImportError:  # extension not built
    from . import _kernels_py as _impl
    BACKEND = "python"

hungarian = _impl.hungarian
bsa_pc_loop = _impl.bsa_pc_loop
rll_lagrangian = _impl.rll_lagrangian
capacity = _impl.capacity
capacity_slope = _impl.capacity_slope
capacity_inverse = _impl.capacity_inverse
best_rate = _impl.best_rate
complexity = _impl.complexity
