"""Model checkpoints in the versioned tensor container."""
from __future__ import annotations

from pathlib import Path

from ..tensorio import ContainerError, read_tensors, write_tensors
from .model import BandSplitModel, ModelConfig
from .train import AdamW

__all__ = ["save_checkpoint", "load_checkpoint", "CHECKPOINT_KIND"]

CHECKPOINT_KIND = "regionsep-model"


def save_checkpoint(path, model: BandSplitModel, optimizer: AdamW | None = None, step: int = 0,
                    extra: dict | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in model.params.items()}
    tensors.update({f"buffer/{k}": v for k, v in model.buffers.items()})
    meta = {
        "kind": CHECKPOINT_KIND,
        "config": model.config.to_dict(),
        "layout": model.layout.to_dict(),
        "step": int(step),
        "extra": extra or {},
    }
    if optimizer is not None:
        opt_meta, opt_tensors = optimizer.state_dict()
        meta["optimizer"] = opt_meta
        tensors.update(opt_tensors)
    write_tensors(Path(path), tensors, meta)


def load_checkpoint(path) -> tuple[BandSplitModel, AdamW | None, int, dict]:
    """Return (model, optimizer or None, step, extra metadata)."""
    tensors, meta = read_tensors(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ContainerError(f"{path}: not a model checkpoint")
    config = ModelConfig.from_dict(meta["config"])
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    buffers = {k[7:]: v for k, v in tensors.items() if k.startswith("buffer/")}
    model = BandSplitModel(config, params=params, buffers=buffers)
    if model.layout.to_dict() != meta["layout"]:
        raise ContainerError(f"{path}: band layout does not match the stored config")
    opt = AdamW.from_state(meta["optimizer"], tensors) if "optimizer" in meta else None
    return model, opt, int(meta["step"]), meta.get("extra", {})
