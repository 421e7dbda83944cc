"""purelab: a training-free adversarial purification laboratory.

Everything runs at desk scale around a small CNN: a reverse-mode autodiff
tensor engine, white-box attacks (FGSM, PGD, DI2-FGSM, BPDA), the
two-stage blur-guided purification defense, and an evaluation harness.
"""

from .backend import BACKEND, NUMBA_AVAILABLE
from .tensor import NumericsError, ShapeError, Tensor, default_dtype, set_default_dtype

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "NUMBA_AVAILABLE",
    "NumericsError",
    "ShapeError",
    "Tensor",
    "default_dtype",
    "set_default_dtype",
    "__version__",
]
