"""Band-split RNN extractor, loss and optimizer, checkpoints, query composition."""
from .checkpoint import load_checkpoint, save_checkpoint
from .compose import compose_conical, ring_extract, spherical_extract
from .model import PRESETS, BandSplitModel, ModelConfig, preset
from .train import AdamW, Dataset, Example, batch_loss, item_loss, train

__all__ = ["load_checkpoint", "save_checkpoint", "compose_conical", "ring_extract", "spherical_extract",
           "PRESETS", "BandSplitModel", "ModelConfig", "preset", "AdamW", "Dataset", "Example",
           "batch_loss", "item_loss", "train"]
