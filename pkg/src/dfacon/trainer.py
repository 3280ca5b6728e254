"""Training loop: SGD with momentum, linear warmup into cosine decay, early stopping.

The learning rate is set once per epoch. Validation loss (the same contrastive
objective on batches built from the validation groups) drives early stopping
and best-checkpoint selection.
"""

from __future__ import annotations

import copy
import hashlib
import io
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from dfacon.data import AnchorGroup, DatasetSplit
from dfacon.embedder import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    INPUT_SIZE,
    ContrastiveModel,
    EncoderConfig,
    EncoderHandle,
    make_encoder,
    preprocess_paths,
)
from dfacon.errors import (
    CheckpointIntegrityError,
    ConfigurationError,
    IncompatibleCheckpointError,
    NumericError,
)
from dfacon.loss import supcon_loss_torch
from dfacon.sampler import ContrastiveBatch, make_batches, positive_mask

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DFACKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    warmup_epochs: int = 10
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    anchors_per_batch: int | None = None
    positives_per_anchor: int = 3
    patience: int = 10
    temperature: float = 0.07
    seed: int = 0
    head_variant: str = "mlp"

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}/{self.epochs}")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if not self.base_lr > 0:
            raise ConfigurationError("base_lr must be positive")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        if self.batch_size not in (32, 64, 128):
            logger.warning("batch_size %d is outside the studied set {32, 64, 128}", self.batch_size)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    lr: float = 0.0
    best_val_loss: float = math.inf
    best_epoch: int = -1
    epochs_since_best: int = 0


@dataclass
class TrainResult:
    handle: EncoderHandle
    log: list[dict] = field(default_factory=list)
    state: TrainState = field(default_factory=TrainState)
    stopped_early: bool = False


def lr_schedule(epoch_fraction: float, config: TrainConfig) -> float:
    """Linear ramp from 0 over the warmup, then half-cosine decay to 0 at ``epochs``."""
    t = float(epoch_fraction)
    w, total, base = config.warmup_epochs, config.epochs, config.base_lr
    if t < w:
        return base * t / w
    return base * 0.5 * (1.0 + math.cos(math.pi * (t - w) / (total - w)))


def parameter_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _batch_loss(model: ContrastiveModel, batch: ContrastiveBatch, temperature: float, device: str) -> torch.Tensor:
    x = preprocess_paths(batch.paths).to(device)
    _, z = model(x)
    z = torch.nn.functional.normalize(z, dim=1)
    mask = torch.from_numpy(positive_mask(batch)).to(device)
    return supcon_loss_torch(z, mask, temperature)


def _describe(batch: ContrastiveBatch) -> str:
    ids = batch.anchor_ids
    return f"N={batch.size}, anchors={sorted(set(ids))[:8]}"


@torch.no_grad()
def validation_loss(handle: EncoderHandle, groups: Sequence[AnchorGroup], config: TrainConfig) -> float:
    """Mean loss over a fixed set of validation batches; never updates parameters."""
    batches = make_batches(groups, config.batch_size, config.anchors_per_batch,
                           config.positives_per_anchor, seed=config.seed, epoch=0)
    model = handle.model
    was_training = model.training
    model.eval()
    try:
        losses = [float(_batch_loss(model, b, config.temperature, handle.device)) for b in batches]
    finally:
        model.train(was_training)
    return float(np.mean(losses))


def train(split: DatasetSplit, handle: EncoderHandle, config: TrainConfig) -> TrainResult:
    if not getattr(handle, "trainable", False):
        raise ConfigurationError("encoder handle is not trainable")
    if not split.val_groups:
        raise ConfigurationError("validation partition is empty")
    if not any(g.forgery_paths for g in split.val_groups):
        raise ConfigurationError("validation partition has no anchor with forgeries")

    torch.manual_seed(config.seed)
    model = handle.model
    params = [p for p in model.parameters() if p.requires_grad]
    opt = (torch.optim.SGD(params, lr=0.0, momentum=config.momentum, weight_decay=config.weight_decay)
           if params else None)

    state = TrainState()
    result = TrainResult(handle=handle, state=state)
    best_params = copy.deepcopy(model.state_dict())

    for epoch in range(config.epochs):
        state.epoch = epoch
        state.lr = lr_schedule(epoch, config)
        if opt is not None:
            for group in opt.param_groups:
                group["lr"] = state.lr

        batches = make_batches(split.train_groups, config.batch_size, config.anchors_per_batch,
                               config.positives_per_anchor, seed=config.seed, epoch=epoch)
        model.train()
        losses = []
        for batch in batches:
            loss = _batch_loss(model, batch, config.temperature, handle.device)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, step {state.step}, lr {state.lr:.3g}, batch {_describe(batch)}"
                )
            if opt is not None:
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            losses.append(loss.item())
            state.step += 1

        val = validation_loss(handle, split.val_groups, config)
        if not math.isfinite(val):
            raise NumericError(f"non-finite validation loss at epoch {epoch}, lr {state.lr:.3g}")
        if val < state.best_val_loss:
            state.best_val_loss, state.best_epoch, state.epochs_since_best = val, epoch, 0
            best_params = copy.deepcopy(model.state_dict())
        else:
            state.epochs_since_best += 1

        record = {"epoch": epoch, "lr": state.lr, "train_loss": float(np.mean(losses)), "val_loss": val,
                  "steps": len(batches)}
        result.log.append(record)
        logger.info("epoch %d lr=%.5f train=%.4f val=%.4f", epoch, state.lr, record["train_loss"], val)

        if state.epochs_since_best > config.patience:
            result.stopped_early = True
            logger.info("early stop after epoch %d (best epoch %d)", epoch, state.best_epoch)
            break

    model.load_state_dict(best_params)
    return result


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(handle: EncoderHandle, path: str | Path, train_config: TrainConfig | None = None) -> Path:
    """Write magic + version + sha256 + torch payload."""
    buf = io.BytesIO()
    torch.save({
        "encoder_config": asdict(handle.config),
        "head_config": asdict(handle.head_config),
        "feature_dim": handle.model.feature_dim,
        "state_dict": handle.model.state_dict(),
        "preprocessing": {"input_size": INPUT_SIZE, "mean": IMAGENET_MEAN, "std": IMAGENET_STD},
        "train_config": asdict(train_config) if train_config else None,
    }, buf)
    payload = buf.getvalue()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(payload)))
        fh.write(hashlib.sha256(payload).digest())
        fh.write(payload)
    return path


def load_checkpoint(path: str | Path, device: str = "cpu") -> EncoderHandle:
    raw = Path(path).read_bytes()
    header = len(CHECKPOINT_MAGIC) + 12 + 32
    if len(raw) < header or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointIntegrityError(f"{path}: not a checkpoint file or header truncated")
    version, size = struct.unpack("<IQ", raw[len(CHECKPOINT_MAGIC): len(CHECKPOINT_MAGIC) + 12])
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    digest = raw[header - 32: header]
    payload = raw[header:]
    if len(payload) != size or hashlib.sha256(payload).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: payload truncated or corrupted")
    blob = torch.load(io.BytesIO(payload), map_location=device, weights_only=True)
    cfg = EncoderConfig(**blob["encoder_config"])
    # weights come from the payload; never fetch them again
    handle = make_encoder(cfg.kind, replace(cfg, weights="random"), device=device)
    handle.config = cfg
    handle.model.load_state_dict(blob["state_dict"])
    handle.model.eval()
    return handle
