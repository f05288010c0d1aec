"""Cross-entropy loss, Adam, and the early-stopped training loop.

The loss is a fused log-sum-exp op registered on the autodiff tape: rows
whose target equals ``ignore_index`` contribute nothing and are excluded
from the mean. Early stopping watches validation loss when a subject-level
carve-out exists, else training loss, and always returns the parameter
snapshot from the best monitored epoch.

On numeric divergence (NaN loss or NaN gradients) the loop stops, keeps the
last good snapshot, and records the failure in the log instead of raising,
so callers can still persist the best checkpoint before reporting the error.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, DivergenceError, ShapeError
from .model import ModelConfig, ModelParams, forward, unit_scale_u8

IGNORE_INDEX = -100


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 100
    early_stop_patience: int = 10
    early_stop_min_delta: float = 1e-4
    val_fraction: float = 0.1
    seed: int = 0
    deterministic_mode: bool = False
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.early_stop_patience < 1:
            raise ConfigError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax on plain arrays (inference path)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood over non-ignored rows, via log-sum-exp."""
    x = logits.data
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {list(x.shape)}")
    y = np.asarray(targets, dtype=np.int64).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{y.shape[0]} targets for {x.shape[0]} logit rows")
    n_classes = x.shape[1]
    valid = y != ignore_index
    if np.any((y[valid] < 0) | (y[valid] >= n_classes)):
        raise ConfigError(f"targets must be in [0, {n_classes}) or equal "
                          f"ignore_index={ignore_index}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ConfigError("cross_entropy over zero non-ignored rows is undefined")

    x64 = x.astype(np.float64)
    m = x64.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x64 - m).sum(axis=1))
    picked = x64[np.arange(len(y)), np.where(valid, y, 0)]
    per_row = np.where(valid, lse - picked, 0.0)
    loss_value = per_row.sum() / n_valid
    if math.isnan(loss_value):
        raise DivergenceError("cross_entropy produced NaN loss")

    def backward(g):
        soft = np.exp(x64 - m) / np.exp(lse - m[:, 0])[:, None]
        soft[np.arange(len(y)), np.where(valid, y, 0)] -= 1.0
        soft[~valid] = 0.0
        return [(g * soft / n_valid).astype(x.dtype)]

    out = np.asarray(loss_value, dtype=x.dtype)
    return ad.apply_op("cross_entropy", [logits], out, backward)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(m={n: np.zeros_like(t.data) for n, t in params.items()},
                   v={n: np.zeros_like(t.data) for n, t in params.items()})


def adam_step(params: ModelParams, grads, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place."""
    for name, _ in params.items():
        if name not in grads or grads[name] is None:
            raise ConfigError(f"missing gradient for parameter {name!r}")
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.data.shape:
            raise ShapeError(f"gradient shape {list(g.shape)} does not match parameter "
                             f"{name!r} shape {list(tensor.data.shape)}")
        if np.any(np.isnan(g)):
            raise DivergenceError(f"NaN gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(tensor.data.dtype)


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without a ``min_delta``
    improvement of the monitored loss; remembers the best epoch."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = math.inf
        self.best_epoch = None
        self._waited = 0

    def update(self, epoch: int, monitored: float) -> str:
        """Returns 'improved', 'wait', or 'stop'."""
        if monitored < self.best_loss - self.min_delta:
            self.best_loss = monitored
            self.best_epoch = epoch
            self._waited = 0
            return "improved"
        self._waited += 1
        if self._waited >= self.patience:
            return "stop"
        return "wait"


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None
    elapsed_ms: float


@dataclass
class TrainLog:
    learning_rate: float
    monitored: str
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    early_stop_epoch: int | None = None
    divergence_error: str | None = None

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.epochs:
                fh.write(json.dumps({"epoch": s.epoch, "train_loss": s.train_loss,
                                     "train_acc": s.train_acc, "val_loss": s.val_loss,
                                     "elapsed_ms": s.elapsed_ms}) + "\n")


def _sample_batch(samples):
    volumes = np.stack([unit_scale_u8(s.volume.data) for s in samples])
    ages = np.array([s.age for s in samples], dtype=np.float64)
    labels = np.array([int(s.label) for s in samples], dtype=np.int64)
    return volumes, ages, labels


def _eval_loss(params, model_cfg, samples, batch_size, ignore_index):
    total, correct, n = 0.0, 0, 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        volumes, ages, labels = _sample_batch(chunk)
        logits = forward(Tensor(volumes), ages, params, model_cfg)
        loss = cross_entropy(logits, labels, ignore_index)
        total += float(loss.data) * len(chunk)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
        n += len(chunk)
    return total / n, correct / n


def _carve_validation(samples, val_fraction, rng):
    """Split train samples again at subject level for the early-stop monitor."""
    subjects = list(dict.fromkeys(s.subject_id for s in samples))
    n_val = math.floor(val_fraction * len(subjects))
    if n_val == 0:
        return samples, []
    order = rng.permutation(len(subjects))
    val_ids = {subjects[i] for i in order[:n_val]}
    fit = [s for s in samples if s.subject_id not in val_ids]
    val = [s for s in samples if s.subject_id in val_ids]
    if not fit:
        return samples, []
    return fit, val


def _snapshot(params: ModelParams) -> ModelParams:
    return ModelParams({name: Tensor(t.data.copy(), requires_grad=True)
                        for name, t in params.items()})


def train(params: ModelParams, model_cfg: ModelConfig, split, cfg: TrainConfig):
    """Optimize ``params`` in place; return (best-epoch snapshot, TrainLog).

    ``split.train`` feeds the loop; ``split.test`` is never touched here.
    """
    samples = list(split.train)
    if not samples:
        raise ConfigError("training set is empty")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    fit_samples, val_samples = (samples, [])
    if cfg.val_fraction > 0:
        fit_samples, val_samples = _carve_validation(samples, cfg.val_fraction, rng)

    log = TrainLog(learning_rate=cfg.learning_rate,
                   monitored="val_loss" if val_samples else "train_loss")
    state = AdamState.for_params(params)
    best = _snapshot(params)
    stopper = EarlyStopper(cfg.early_stop_patience, cfg.early_stop_min_delta)

    for epoch in range(1, cfg.max_epochs + 1):
        started = time.monotonic()
        order = rng.permutation(len(fit_samples))
        epoch_loss, epoch_correct = 0.0, 0
        try:
            for start in range(0, len(order), cfg.batch_size):
                batch = [fit_samples[i] for i in order[start:start + cfg.batch_size]]
                volumes, ages, labels = _sample_batch(batch)
                with Tape() as tape:
                    logits = forward(Tensor(volumes), ages, params, model_cfg)
                    loss = cross_entropy(logits, labels, cfg.ignore_index)
                tape.backward(loss)
                grads = {name: t.grad for name, t in params.items()}
                adam_step(params, grads, state, cfg.learning_rate)
                ad.zero_grads(t for _, t in params.items())
                epoch_loss += float(loss.data) * len(batch)
                epoch_correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            train_loss = epoch_loss / len(fit_samples)
            train_acc = epoch_correct / len(fit_samples)
            val_loss = None
            if val_samples:
                val_loss, _ = _eval_loss(params, model_cfg, val_samples,
                                         cfg.batch_size, cfg.ignore_index)
        except DivergenceError as exc:
            log.divergence_error = str(exc)
            break
        monitored = val_loss if val_samples else train_loss
        log.epochs.append(EpochStats(epoch, train_loss, train_acc, val_loss,
                                     (time.monotonic() - started) * 1000.0))
        if math.isnan(monitored):
            log.divergence_error = "monitored loss is NaN"
            break
        verdict = stopper.update(epoch, monitored)
        if verdict == "improved":
            best = _snapshot(params)
            log.best_epoch = epoch
        elif verdict == "stop":
            log.early_stop_epoch = epoch
            break
    return best, log


def predict(params: ModelParams, model_cfg: ModelConfig, samples, batch_size: int = 16):
    """Class codes and per-class probabilities; ties go to the lowest code."""
    codes, probs = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        volumes, ages, _ = _sample_batch(chunk)
        logits = forward(Tensor(volumes), ages, params, model_cfg).data
        p = softmax_probs(logits.astype(np.float64))
        codes.append(np.argmax(p, axis=1))  # argmax returns the first (lowest) max
        probs.append(p)
    return np.concatenate(codes), np.vstack(probs)
