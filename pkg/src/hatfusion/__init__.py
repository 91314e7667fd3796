"""Early-fusion handwriting classifier (image patches + pen strokes) on a small numpy autodiff engine."""

from .data import Sample, digit_templates, generate, read_dataset, write_dataset
from .model import HatModel, Mode, ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, compute_metrics, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "HatModel",
    "Mode",
    "ModelConfig",
    "Sample",
    "TrainConfig",
    "compute_metrics",
    "digit_templates",
    "evaluate",
    "generate",
    "load_checkpoint",
    "read_dataset",
    "save_checkpoint",
    "train",
    "write_dataset",
]
