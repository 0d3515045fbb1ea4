"""NT-Xent loss, training configuration presets and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SituationPair, pairs_to_arrays
from .errors import ConfigError, InputError, NumericError, ShapeError
from .nn import AdamW, Encoder, checkpoint_bytes, model_from_bytes

log = logging.getLogger(__name__)


def cos_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def nt_xent_loss(z: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Normalized temperature-scaled cross entropy over a batch of pairs.

    Rows ``2m`` and ``2m+1`` of ``z`` (0-based) are a positive pair.  Each
    row's loss is a softmax cross entropy over its cosine similarities to the
    other B-1 rows; the batch loss is the mean over all B rows, i.e. over
    both orderings of every pair.

    Returns ``(loss, dloss/dz)``.
    """
    z = np.asarray(z)
    if z.ndim != 2:
        raise ShapeError(f"embeddings must be 2-D, got shape {z.shape}")
    B = z.shape[0]
    if B % 2 or B < 2:
        raise ShapeError(f"batch must hold an even number (>= 2) of rows, got {B}")
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError("zero-norm embedding in batch")
    u = z / norms
    logits = (u @ u.T) / tau
    np.fill_diagonal(logits, -np.inf)
    positive = np.arange(B) ^ 1
    rows = np.arange(B)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_prob = shifted[rows, positive] - np.log(denom[:, 0])
    loss = float(-log_prob.mean())

    dlogits = exp / denom
    dlogits[rows, positive] -= 1.0
    dlogits /= B
    dsim = dlogits / tau
    du = (dsim + dsim.T) @ u
    dz = (du - u * np.sum(du * u, axis=1, keepdims=True)) / norms
    return loss, dz.astype(z.dtype)


@dataclass
class TrainConfig:
    name: str = "clsr-10"
    tau: float = 0.10
    batch_size: int = 256  # situations per batch, i.e. batch_size/2 pairs
    lr: float = 1e-5
    weight_decay: float = 1e-4
    patience: int = 5
    max_epochs: int = 200
    seed: int = 42
    cyclic_shift: bool = False
    vertical_shift: bool = False
    scale: bool = False

    def validate(self) -> "TrainConfig":
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be an even number of situations")
        if self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("patience and max_epochs must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        return self

    @property
    def augmentations(self) -> frozenset:
        names = ("cyclic_shift", "vertical_shift", "scale")
        return frozenset(n for n in names if getattr(self, n))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _preset(name, tau, **aug) -> TrainConfig:
    return TrainConfig(name=name, tau=tau, **aug)


PRESETS: dict[str, TrainConfig] = {
    c.name: c
    for c in [
        _preset("clsr-10", 0.10),
        _preset("clsr-20", 0.20),
        _preset("clsr-10-cyclic-shift", 0.10, cyclic_shift=True),
        _preset("clsr-20-cyclic-shift", 0.20, cyclic_shift=True),
        _preset("clsr-10-vertical-shift", 0.10, vertical_shift=True),
        _preset("clsr-20-vertical-shift", 0.20, vertical_shift=True),
        _preset("clsr-10-scale", 0.10, scale=True),
        _preset("clsr-20-scale", 0.20, scale=True),
    ]
}


def preset(name: str, **overrides) -> TrainConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides).validate()


class EarlyStopping:
    """Tracks validation loss; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.bad_epochs == 0


@dataclass
class TrainReport:
    config: dict
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""
    checkpoint_path: str | None = None
    steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, json_path, csv_path=None):
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["epoch", "train_loss", "val_loss"])
                for i, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                    w.writerow([i, repr(tl), repr(vl)])


def _interleave_batch(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Stack (P, T, C) halves into (2P, T, C) with pair members adjacent."""
    out = np.empty((first.shape[0] * 2,) + first.shape[1:], dtype=first.dtype)
    out[0::2] = first
    out[1::2] = second
    return out


def evaluate_loss(
    model: Encoder, first: np.ndarray, second: np.ndarray, tau: float, batch_size: int
) -> float:
    """Mean eval-mode NT-Xent over full batches (the whole set if smaller)."""
    per_batch = batch_size // 2
    n = first.shape[0]
    if n < 2:
        raise InputError("validation needs at least two pairs")
    if n < per_batch:
        spans = [(0, n)]
    else:
        spans = [(i, i + per_batch) for i in range(0, n - per_batch + 1, per_batch)]
    losses = []
    for lo, hi in spans:
        z = model.forward(_interleave_batch(first[lo:hi], second[lo:hi]), train=False)
        loss, _ = nt_xent_loss(z.astype(np.float64), tau)
        losses.append(loss)
    return float(np.mean(losses))


def train(
    pairs: Sequence[SituationPair] | tuple[np.ndarray, np.ndarray],
    val_pairs: Sequence[SituationPair] | tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    model: Encoder,
    checkpoint_path=None,
    val_loss_hook=None,
) -> TrainReport:
    """Train ``model`` in place and leave it at its best-validation weights.

    ``pairs`` / ``val_pairs`` are situation pairs or pre-stacked
    ``(first, second)`` arrays.  ``val_loss_hook`` (testing aid) may replace
    the computed validation loss: ``hook(epoch, loss) -> loss``.
    """
    cfg.validate()
    first, second = pairs if isinstance(pairs, tuple) else pairs_to_arrays(pairs)
    v_first, v_second = val_pairs if isinstance(val_pairs, tuple) else pairs_to_arrays(val_pairs)
    per_batch = cfg.batch_size // 2
    n = first.shape[0]
    if n < per_batch:
        raise InputError(f"training set has {n} pairs, fewer than one batch of {per_batch}")
    if v_first.shape[0] == 0:
        raise InputError("validation set is empty")
    if not model.norm.fitted:
        raise InputError("fit_normalization must run before training")

    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience)
    report = TrainReport(config=cfg.to_dict())
    best_blob = checkpoint_bytes(model)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        batch_losses = []
        for b, lo in enumerate(range(0, n - per_batch + 1, per_batch)):
            idx = order[lo : lo + per_batch]
            x = _interleave_batch(first[idx], second[idx])
            z = model.forward(x, train=True, rng=rng)
            loss, dz = nt_xent_loss(z.astype(np.float64), cfg.tau)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            model.backward(dz)
            opt.step(model.learned_parameters())
            batch_losses.append(loss)
        report.steps = opt.step_count
        train_loss = float(np.mean(batch_losses))
        val_loss = evaluate_loss(model, v_first, v_second, cfg.tau, cfg.batch_size)
        if val_loss_hook is not None:
            val_loss = val_loss_hook(epoch, val_loss)
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        stop = stopper.update(epoch, val_loss)
        if stopper.improved_last:
            best_blob = checkpoint_bytes(model)
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if stop:
            report.stop_reason = "early_stopping"
            break
    else:
        report.stop_reason = "max_epochs"

    report.best_epoch = stopper.best_epoch
    best = model_from_bytes(best_blob)
    for (_, dst), (_, src) in zip(model.named_parameters(), best.named_parameters()):
        dst.data = src.data.astype(dst.data.dtype)
    model.zero_grad()
    if checkpoint_path is not None:
        path = Path(checkpoint_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(best_blob)
        report.checkpoint_path = str(path)
    return report
