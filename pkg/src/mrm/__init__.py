"""Masked record modeling: joint masked image and masked report pre-training for radiograph encoders."""

from .masking import MaskConfig
from .nets import ModelConfig, init_params
from .pretrain import TrainConfig, train
from .record_io import Record, Vocabulary, load_manifest, synth_generate
from .transfer import FinetuneConfig, auc, finetune, mean_auc

__version__ = "0.1.0"

__all__ = [
    "FinetuneConfig", "MaskConfig", "ModelConfig", "Record", "TrainConfig", "Vocabulary", "auc",
    "finetune", "init_params", "load_manifest", "mean_auc", "synth_generate", "train",
]
