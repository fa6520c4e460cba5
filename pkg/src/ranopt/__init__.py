"""Resource-allocation solvers for heterogeneous cellular networks and virtualized C-RANs."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
