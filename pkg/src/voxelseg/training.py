"""Optimization: Adam, plateau learning-rate decay, early stopping, the fit loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from voxelseg import losses, unet3d
from voxelseg.augment import AugmentConfig
from voxelseg.errors import ConfigError, NonFiniteGradient
from voxelseg.nn.tensor import Tape, Tensor
from voxelseg.patch_engine import PatchGridConfig, training_batch
from voxelseg.volume_io import Sample

log = logging.getLogger(__name__)

TRAIN_STREAM = 0
VAL_STREAM = 1


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    beta: float = 0.5
    initial_lr: float = 1e-3
    lr_factor: float = 0.1
    lr_patience: int = 15
    min_lr: float = 1e-5
    es_patience: int = 100
    max_epochs: int = 1000
    batches_per_epoch: int = 150
    batch_size: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_prob_floor: float = 1e-7
    tversky_smooth: float = 1e-5
    checkpoint_every: int = 50

    def __post_init__(self):
        if not 0.0 < self.lr_factor < 1.0:
            raise ConfigError("lr_factor must lie in (0, 1)")
        if not 0.0 < self.min_lr <= self.initial_lr:
            raise ConfigError("need 0 < min_lr <= initial_lr")
        if self.lr_patience < 1 or self.es_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.max_epochs < 0 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs >= 0, batches_per_epoch >= 1, batch_size >= 1 required")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    @property
    def val_batches(self) -> int:
        return max(1, self.batches_per_epoch // 10)


# --- Adam --------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimizerState":
        return cls(cfg.initial_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place.

    All gradients are checked before anything is modified, so a
    :class:`NonFiniteGradient` leaves the model untouched.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name].data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= step.astype(p.dtype, copy=False)


# --- schedules -----------------------------------------------------------------

@dataclass
class PlateauState:
    lr: float
    factor: float = 0.1
    patience: int = 15
    min_lr: float = 1e-5
    best: float = math.inf
    wait: int = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "PlateauState":
        return cls(cfg.initial_lr, cfg.lr_factor, cfg.lr_patience, cfg.min_lr)


def lr_on_plateau(train_loss_history: Sequence[float], state: PlateauState) -> float:
    """Consume the newest epoch loss; decay the lr after ``patience`` epochs
    without a strict improvement, then restart the count."""
    loss = train_loss_history[-1]
    if loss < state.best:
        state.best = loss
        state.wait = 0
    else:
        state.wait += 1
        if state.wait >= state.patience:
            state.lr = max(state.lr * state.factor, state.min_lr)
            state.wait = 0
    return state.lr


def early_stop(train_loss_history: Sequence[float], es_patience: int) -> bool:
    """True once the last ``es_patience`` epochs all failed to beat the best before them."""
    if len(train_loss_history) <= es_patience:
        return False
    best_at = int(np.argmin(train_loss_history))  # first occurrence: ties never improve
    return len(train_loss_history) - 1 - best_at >= es_patience


# --- fit log -------------------------------------------------------------------

FITLOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "seconds")


@dataclass(frozen=True)
class FitRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class FitLog:
    rows: list[FitRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, row: FitRow) -> None:
        expected = len(self.rows) + 1
        if row.epoch != expected:
            raise ValueError(f"fit log rows must be contiguous: expected epoch {expected}, got {row.epoch}")
        self.rows.append(row)

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.rows]

    def write_csv(self, path) -> Path:
        """Floats are written with ``repr`` so a reread is exact."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FITLOG_COLUMNS)
            for r in self.rows:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr), f"{r.seconds:.3f}"])
        return path

    @classmethod
    def read_csv(cls, path) -> "FitLog":
        log_ = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                log_.append(FitRow(int(rec["epoch"]), float(rec["train_loss"]), float(rec["val_loss"]),
                                   float(rec["lr"]), float(rec["seconds"])))
        return log_


# --- fit -----------------------------------------------------------------------

def train_step(model: unet3d.Model, images: np.ndarray, onehot: np.ndarray,
               cfg: TrainConfig, opt: OptimizerState) -> float:
    model.zero_grad()
    with Tape() as tape:
        probs = unet3d.forward(model, images.astype(model.dtype, copy=False), mode="train")
        loss = losses.total_loss(probs, onehot, cfg.alpha, cfg.beta, cfg.tversky_smooth, cfg.loss_prob_floor)
        tape.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in model.params.items()}
    adam_step(model.params, grads, opt)
    return float(loss.data)


def eval_loss(model: unet3d.Model, images: np.ndarray, onehot: np.ndarray, cfg: TrainConfig) -> float:
    probs = unet3d.forward(model, images.astype(model.dtype, copy=False), mode="infer")
    return float(losses.total_loss(probs, onehot, cfg.alpha, cfg.beta,
                                   cfg.tversky_smooth, cfg.loss_prob_floor).data)


def fit(model: unet3d.Model, train: Sequence[Sample], val: Sequence[Sample], cfg: TrainConfig,
        seed: int, patch_cfg: PatchGridConfig | None = None, aug_cfg: AugmentConfig | None = None,
        out_dir=None, on_epoch: Callable[[FitRow], None] | None = None) -> tuple[unet3d.Model, FitLog]:
    """Train ``model`` in place and return it with its per-epoch log.

    Plateau decay and early stopping watch the mean training loss; the
    validation loss is only recorded.  With ``out_dir`` set, the log is
    rewritten after every epoch and checkpoints go to
    ``checkpoint_epochNNNN`` every ``cfg.checkpoint_every`` epochs and to
    ``model`` at the end.
    """
    if not train:
        raise ValueError("fit needs at least one training sample")
    patch_cfg = patch_cfg or PatchGridConfig(batch_size=cfg.batch_size)
    if patch_cfg.batch_size != cfg.batch_size:
        patch_cfg = PatchGridConfig(patch_cfg.patch_shape, patch_cfg.overlap, cfg.batch_size)
    aug_cfg = aug_cfg or AugmentConfig()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    opt = OptimizerState.from_config(cfg)
    plateau = PlateauState.from_config(cfg)
    fitlog = FitLog()
    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        lr = opt.lr
        train_losses = []
        for b in range(cfg.batches_per_epoch):
            images, onehot = training_batch(train, patch_cfg, aug_cfg, seed, epoch, b, TRAIN_STREAM)
            train_losses.append(train_step(model, images, onehot, cfg, opt))
        val_losses = []
        if val:
            for b in range(cfg.val_batches):
                images, onehot = training_batch(val, patch_cfg, aug_cfg, seed, epoch, b, VAL_STREAM)
                val_losses.append(eval_loss(model, images, onehot, cfg))
        row = FitRow(epoch, float(np.mean(train_losses)),
                     float(np.mean(val_losses)) if val_losses else math.nan,
                     lr, time.perf_counter() - start)
        fitlog.append(row)
        opt.lr = lr_on_plateau(fitlog.train_losses, plateau)
        log.info("epoch %d train %.5f val %.5f lr %.1e (%.1fs)", epoch, row.train_loss,
                 row.val_loss, row.lr, row.seconds)
        if on_epoch is not None:
            on_epoch(row)
        if out_dir is not None:
            fitlog.write_csv(out_dir / "fitlog.csv")
            if epoch % cfg.checkpoint_every == 0:
                unet3d.save_model(model, out_dir / f"checkpoint_epoch{epoch:04d}", {"epoch": epoch})
        if early_stop(fitlog.train_losses, cfg.es_patience):
            log.info("early stop after epoch %d", epoch)
            break
    if out_dir is not None:
        fitlog.write_csv(out_dir / "fitlog.csv")
        unet3d.save_model(model, out_dir / "model", {"epoch": len(fitlog)})
    return model, fitlog
