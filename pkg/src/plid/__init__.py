"""Compositional zero-shot learning with language-informed class distributions.

Pipeline: class descriptions define per-class Gaussian support around
learnable prompt-derived class embeddings; training minimizes an
upper-bound cross entropy with covariance margins plus primitive
decomposition losses; prediction fuses direct and recomposed compositional
logits with a Beta-prior mixing coefficient; evaluation follows the
closed-/open-world calibration-bias protocol.
"""

__version__ = "0.1.0"

from .checkpointing import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .corpus import (CompositionSplit, Dataset, DescriptionCorpus, SampleRecord,
                     Vocabulary, feasible_compositions, load_dataset,
                     make_synthetic_dataset)
from .encoders import (ArrayBackend, ImageViews, SyntheticImageBackend,
                       TextEncoder, TokenLexicon, TokenSequence, embed_tokens)
from .errors import (ConfigError, LoadError, PlidError, TrainingError,
                     ValidationError)
from .estimator import CompositionalZeroShotClassifier
from .evaluation import MetricsReport, bias_sweep, evaluate, score_test_set
from .gradcheck import gradient_check
from .model import CompositionModel, ModelBundle
from .objective import (BetaPrior, LogitBundle, LossReport, csp_logits,
                        mix_logits, sample_lambda, upper_bound_loss)
from .training import resume, train

__all__ = [
    "ArrayBackend", "BetaPrior", "Checkpoint", "CompositionModel",
    "CompositionSplit", "CompositionalZeroShotClassifier", "ConfigError",
    "Dataset", "DescriptionCorpus", "ImageViews", "LoadError", "LogitBundle",
    "LossReport", "MetricsReport", "ModelBundle", "PlidError", "SampleRecord",
    "SyntheticImageBackend", "TextEncoder", "TokenLexicon", "TokenSequence",
    "TrainConfig", "TrainingError", "ValidationError", "Vocabulary",
    "bias_sweep", "csp_logits", "embed_tokens", "evaluate",
    "feasible_compositions", "gradient_check", "load_checkpoint",
    "load_dataset", "make_synthetic_dataset", "mix_logits", "resume",
    "sample_lambda", "save_checkpoint", "score_test_set", "train",
    "upper_bound_loss",
]
