"""hfclab: adversarial examples that hide in the feature space of a medical-image classifier, at desk scale."""
from .errors import ConfigError, DegenerateDataError, HfcLabError, MissingPairError, NotPDError, PreconditionError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateDataError",
    "HfcLabError",
    "MissingPairError",
    "NotPDError",
    "PreconditionError",
    "ShapeError",
    "__version__",
]
