"""shrinklm: low-rank compression and progressive decoding for a tiny LM.

Train a desk-scale byte-level transformer, score each projection's
compression sensitivity from calibration gradients, split an integer
rank budget across projections proportionally, factorize with SVD
(optionally activation-whitened), and decode under a non-increasing
per-token rank-budget schedule.
"""

from .errors import NumericalError, ValidationError
from .model import ModelConfig, ProjectionId, TinyLM, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "NumericalError",
    "ProjectionId",
    "TinyLM",
    "TrainConfig",
    "ValidationError",
    "__version__",
]
