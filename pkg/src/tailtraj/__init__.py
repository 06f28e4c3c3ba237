"""Long-tail aware multi-hypothesis trajectory prediction at desk scale."""

from .data import SyntheticConfig, extract_samples, generate_synthetic, load_ethucy, split_samples, write_ethucy
from .difficulty import DifficultyTable, KalmanConfig, kalman_score, score_split
from .estimators import KalmanDifficultyScorer, MultiHypothesisForecaster
from .evaluation import evaluate
from .losses import LossConfig, contrastive_loss, ewta_loss
from .model import ModelConfig, init_params
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DifficultyTable",
    "KalmanConfig",
    "KalmanDifficultyScorer",
    "LossConfig",
    "ModelConfig",
    "MultiHypothesisForecaster",
    "SyntheticConfig",
    "TrainConfig",
    "contrastive_loss",
    "evaluate",
    "ewta_loss",
    "extract_samples",
    "generate_synthetic",
    "init_params",
    "kalman_score",
    "load_ethucy",
    "score_split",
    "split_samples",
    "train",
    "write_ethucy",
]
