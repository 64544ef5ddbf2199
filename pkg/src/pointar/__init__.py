"""Auto-regressive pre-training for point clouds, desk scale.

Clouds become Morton-ordered patch sequences; a dual-masked
extractor-generator decoder learns to predict each next patch; the
extractor's latents then serve classification, fine-tuning, and few-shot
protocols on synthetic shape corpora. Everything numerical, including
reverse-mode differentiation, is implemented in-repo over numpy.
"""
from pointar.estimators import PointCloudClassifier, SequencePretrainer
from pointar.exceptions import ConfigMismatchError, FormatError, NumericError

__version__ = "0.1.0"

__all__ = [
    "PointCloudClassifier",
    "SequencePretrainer",
    "FormatError",
    "ConfigMismatchError",
    "NumericError",
    "__version__",
]
