"""AdamW training loop with the mask-ratio curriculum and a warmup+cosine LR."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import NumericError, ParameterError, ShapeError, StateError
from .field_io import VELOCITY_SCALE, PatchSample
from .model import MaskedAutoencoder, ModelConfig, masked_mse, visible_index_tensor
from .patching import CurriculumSchedule, mask_ratio_at, sample_mask, to_tokens

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cumolos-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    base_lr: float = 1.5e-4
    lr_scale_denominator: int = 256
    weight_decay: float = 0.05
    warmup_epochs: int = 30
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.95)
    grad_clip: float | None = None
    checkpoint_every: int = 0
    loss_thresholds: tuple[float, ...] = (0.20, 0.189)

    @property
    def effective_lr(self) -> float:
        return self.base_lr * self.batch_size / self.lr_scale_denominator

    def validate(self) -> None:
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            problems.append("warmup_epochs must lie in [0, epochs]")
        if self.base_lr <= 0 or self.lr_scale_denominator <= 0:
            problems.append("base_lr and lr_scale_denominator must be positive")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if problems:
            raise ParameterError("; ".join(problems))


def lr_at(config: TrainConfig, epoch: float) -> float:
    """Linear warmup to ``effective_lr``, then half-cosine decay to 0 at ``epochs``."""
    if not 0 <= epoch <= config.epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {config.epochs}]")
    peak = config.effective_lr
    if epoch < config.warmup_epochs:
        return peak * epoch / config.warmup_epochs
    span = config.epochs - config.warmup_epochs
    if span == 0:
        return peak
    return peak * (1.0 + math.cos(math.pi * (epoch - config.warmup_epochs) / span)) / 2.0


@dataclass
class EpochRecord:
    epoch: int
    mask_ratio: float
    lr: float
    mean_loss: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    thresholds: tuple[float, ...] = ()
    threshold_epochs: dict[float, int | None] = field(default_factory=dict)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)
        for thr in self.thresholds:
            if self.threshold_epochs.get(thr) is None and rec.mean_loss < thr:
                self.threshold_epochs[thr] = rec.epoch

    def epochs_to(self, threshold: float) -> int | None:
        for rec in self.records:
            if rec.mean_loss < threshold:
                return rec.epoch
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mask_ratio", "lr", "mean_loss"])
        for r in self.records:
            w.writerow([r.epoch, repr(float(r.mask_ratio)), repr(float(r.lr)), repr(float(r.mean_loss))])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_csv())
        os.replace(tmp, path)
        return path

    @classmethod
    def read_csv(cls, path) -> "TrainingLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), float(r["mask_ratio"]), float(r["lr"]), float(r["mean_loss"]))
                    for r in rows])


def param_groups(model: MaskedAutoencoder, weight_decay: float):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim < 2 or name == "mask_token":
            no_decay.append(p)
        else:
            decay.append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def make_optimizer(model: MaskedAutoencoder, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(param_groups(model, config.weight_decay), lr=config.effective_lr,
                             betas=tuple(config.betas))


def stack_patches(patches: Sequence[PatchSample]):
    """Token tensors (N, L, 4) and per-element validity for a patch list."""
    shapes = {p.shape for p in patches}
    if len(shapes) != 1:
        raise ShapeError(f"all patches must share one shape, got {sorted(shapes)}")
    (H, W), = shapes
    values = np.stack([p.values for p in patches])
    valid = np.stack([p.validity for p in patches])
    return to_tokens(values), to_tokens(valid), (H // 2, W // 2)


def save_checkpoint(path, model: MaskedAutoencoder, *, schedule: CurriculumSchedule, train_config: TrainConfig,
                    grid_hw, optimizer=None, rng_state=None, epochs_done: int = 0,
                    log_records: Sequence[EpochRecord] = ()) -> Path:
    """Atomically write a self-contained checkpoint."""
    path = Path(path)
    state = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "curriculum": asdict(schedule),
        "train_config": asdict(train_config),
        "velocity_scale": VELOCITY_SCALE,
        "grid_hw": list(grid_hw),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng_state": rng_state,
        "epochs_done": epochs_done,
        "log": [asdict(r) for r in log_records],
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise StateError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise StateError(f"{path} is not a checkpoint of this package")
    if state.get("version") != CHECKPOINT_VERSION:
        raise StateError(f"{path}: checkpoint version {state.get('version')} != supported {CHECKPOINT_VERSION}")
    return state


def model_from_checkpoint(state: dict) -> MaskedAutoencoder:
    model = MaskedAutoencoder(ModelConfig(**state["model_config"]))
    model.load_state_dict(state["state_dict"])
    model.eval()
    return model


def train(
    dataset: Sequence[PatchSample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    schedule: CurriculumSchedule,
    *,
    out_dir=None,
    resume: dict | None = None,
    dtype: torch.dtype = torch.float32,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[MaskedAutoencoder, TrainingLog]:
    """Train a masked autoencoder on ``dataset``.

    Each sample gets its own mask every step at the epoch's curriculum
    ratio. When ``out_dir`` is given, ``checkpoint.pt`` and
    ``training_log.csv`` are written there (checkpoint every
    ``checkpoint_every`` epochs and at the end).
    """
    if len(dataset) == 0:
        raise ParameterError("training dataset is empty")
    train_config.validate()
    schedule.validate()
    tokens_np, valid_np, grid_hw = stack_patches(dataset)
    N, L, _ = tokens_np.shape
    tokens = torch.as_tensor(tokens_np, dtype=dtype)
    valid = torch.as_tensor(valid_np)

    torch.manual_seed(train_config.seed)
    model = MaskedAutoencoder(model_config).to(dtype)
    optimizer = make_optimizer(model, train_config)
    rng = np.random.default_rng(train_config.seed)
    tlog = TrainingLog(thresholds=tuple(train_config.loss_thresholds))
    start_epoch = 0

    if resume is not None:
        if resume["model_config"] != asdict(model_config):
            raise StateError("resume checkpoint was trained with a different model config")
        model.load_state_dict(resume["state_dict"])
        if resume.get("optimizer") is not None:
            optimizer.load_state_dict(resume["optimizer"])
        if resume.get("rng_state") is not None:
            rng.bit_generator.state = resume["rng_state"]
        start_epoch = int(resume.get("epochs_done", 0))
        for r in resume.get("log", []):
            tlog.append(EpochRecord(**r))

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / "checkpoint.pt" if out_dir is not None else None
    n_batches = math.ceil(N / train_config.batch_size)

    def checkpoint(epochs_done):
        if ckpt_path is None:
            return
        save_checkpoint(ckpt_path, model, schedule=schedule, train_config=train_config, grid_hw=grid_hw,
                        optimizer=optimizer, rng_state=rng.bit_generator.state, epochs_done=epochs_done,
                        log_records=tlog.records)
        tlog.write_csv(out_dir / "training_log.csv")

    model.train()
    for epoch in range(start_epoch, train_config.epochs):
        ratio = mask_ratio_at(schedule, epoch)
        epoch_lr = lr_at(train_config, epoch)
        order = rng.permutation(N)
        loss_sum = 0.0
        for b in range(n_batches):
            idx = order[b * train_config.batch_size:(b + 1) * train_config.batch_size]
            lr = lr_at(train_config, epoch + b / n_batches)
            for group in optimizer.param_groups:
                group["lr"] = lr
            seeds = rng.integers(0, 2**31 - 1, size=len(idx))
            masks = [sample_mask(L, ratio, int(s)) for s in seeds]
            vis = visible_index_tensor(masks)
            hidden = torch.as_tensor(np.stack([m.hidden for m in masks]))
            x = tokens[idx]
            pred = model(x, vis, grid_hw)
            loss = masked_mse(pred, x, hidden, valid[idx])
            if not torch.isfinite(loss):
                dump = None
                if out_dir is not None:
                    dump = save_checkpoint(out_dir / "abort_state.pt", model, schedule=schedule,
                                           train_config=train_config, grid_hw=grid_hw, optimizer=optimizer,
                                           rng_state=rng.bit_generator.state, epochs_done=epoch,
                                           log_records=tlog.records)
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b} (lr={lr:.3g}, "
                                   f"mask ratio={ratio:.3f}); state dumped to {dump}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if train_config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
            optimizer.step()
            loss_sum += float(loss.detach()) * len(idx)

        rec = EpochRecord(epoch, ratio, epoch_lr, loss_sum / N)
        tlog.append(rec)
        log.info("epoch %d  r=%.4f  lr=%.3e  loss=%.5f", epoch, ratio, epoch_lr, rec.mean_loss)
        if on_epoch is not None:
            on_epoch(rec)
        every = train_config.checkpoint_every
        if every and (epoch + 1) % every == 0 and epoch + 1 < train_config.epochs:
            checkpoint(epoch + 1)

    checkpoint(train_config.epochs)
    model.eval()
    return model, tlog
