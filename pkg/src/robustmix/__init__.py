"""robustmix: adversarial robustness lab built on a from-scratch autodiff
engine, with sign-gradient attacks, a soft mixture-of-experts defense, and a
standard/robust accuracy evaluation harness."""

from .tensor import Tensor, backward
from .errors import UsageError, DataFormatError, DivergenceError, CheckpointError

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "UsageError",
    "DataFormatError",
    "DivergenceError",
    "CheckpointError",
    "__version__",
]
