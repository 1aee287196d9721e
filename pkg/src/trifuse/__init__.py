"""Tri-modal sentiment fusion with masked-restoration training.

The package couples a small float64 autodiff engine with a cross-modal
transformer whose default fusion route passes everything through a compact
global context, plus the training objectives that make the model robust to
randomly missing modality features.
"""

from .tensor import Tensor, RngState, backward, finite_diff_check, no_grad
from .fusion import FusionConfig
from .estimator import SentimentRegressor

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "RngState",
    "backward",
    "finite_diff_check",
    "no_grad",
    "FusionConfig",
    "SentimentRegressor",
    "__version__",
]
