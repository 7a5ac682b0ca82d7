"""Supervised training: minibatched BCE on window scores, four optimizers,
cosine-annealed learning rate, validation-based early stopping."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import model as mdl
from .autograd import Tape, Tensor
from .data import WindowSet, split_train_test
from .errors import ConfigError, ContractError, NumericError

OPTIMIZER_KINDS = ("sgd", "adagrad", "adam", "adamw")
SCORE_CLAMP = 1e-7


def derive_seed(*parts) -> int:
    """Stable child seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class TrainConfig:
    optimizer: str = "adamw"
    initial_lr: float = 1e-4
    lr_min: float = 1e-6
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    min_improvement: float = 1e-5
    weight_decay: float = 0.01   # adamw only
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        if self.optimizer not in OPTIMIZER_KINDS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; valid: {OPTIMIZER_KINDS}")
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr must be positive, got {self.initial_lr}")
        if self.lr_min < 0 or self.lr_min > self.initial_lr:
            raise ConfigError(f"lr_min must lie in [0, initial_lr], got {self.lr_min}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")

    def to_dict(self) -> dict:
        return {
            "optimizer": self.optimizer,
            "initial_lr": self.initial_lr,
            "lr_min": self.lr_min,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "min_improvement": self.min_improvement,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "eps": self.eps,
            "seed": self.seed,
            "val_fraction": self.val_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# ---------------------------------------------------------------------------
# loss


def bce_loss(scores: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy; scores clamped to [1e-7, 1-1e-7] before log."""
    y = labels if isinstance(labels, Tensor) else Tensor(np.asarray(labels, dtype=np.float64))
    if scores.shape != y.shape:
        raise ContractError(f"scores {scores.shape} and labels {y.shape} disagree")
    s = ag.clip(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    one = Tensor(np.ones(y.shape))
    ll = ag.add(ag.mul(y, ag.log(s)),
                ag.mul(ag.sub(one, y), ag.log(ag.clip(ag.sub(one, scores),
                                                      SCORE_CLAMP, 1.0 - SCORE_CLAMP))))
    return ag.neg(ag.mean_over_axis(ll, 0))


def bce_loss_value(scores: np.ndarray, labels: np.ndarray) -> float:
    """Plain-array BCE for validation passes (no tape)."""
    s = np.clip(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    return float(np.mean(-(labels * np.log(s) + (1 - labels) * np.log(1 - s))))


# ---------------------------------------------------------------------------
# optimizers


class OptimizerState:
    """Per-parameter accumulators plus the shared step counter."""

    def __init__(self):
        self.slots: dict = {}
        self.step_count: int = 0


class _Optimizer:
    def __init__(self, params: mdl.ModelParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = OptimizerState()

    def step(self, lr: float) -> None:
        self.state.step_count += 1
        for name, p in self.params.named():
            if p.grad is None:
                continue
            self._update(name, p, p.grad, lr)

    def _update(self, name, p, g, lr):
        raise NotImplementedError


class SGD(_Optimizer):
    def _update(self, name, p, g, lr):
        p.data -= lr * g


class AdaGrad(_Optimizer):
    def _update(self, name, p, g, lr):
        slot = self.state.slots.get(name)
        if slot is None:
            slot = self.state.slots[name] = {"sq": np.zeros_like(p.data)}
        slot["sq"] += g * g
        p.data -= lr * g / (np.sqrt(slot["sq"]) + self.cfg.eps)


class Adam(_Optimizer):
    decoupled_decay = 0.0

    def _update(self, name, p, g, lr):
        b1, b2 = self.cfg.betas
        slot = self.state.slots.get(name)
        if slot is None:
            slot = self.state.slots[name] = {
                "m": np.zeros_like(p.data),
                "v": np.zeros_like(p.data),
            }
        t = self.state.step_count
        slot["m"] = b1 * slot["m"] + (1 - b1) * g
        slot["v"] = b2 * slot["v"] + (1 - b2) * (g * g)
        m_hat = slot["m"] / (1 - b1**t)
        v_hat = slot["v"] / (1 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + self.cfg.eps)
        if self.decoupled_decay:
            p.data -= lr * self.decoupled_decay * p.data


class AdamW(Adam):
    def __init__(self, params, cfg):
        super().__init__(params, cfg)
        self.decoupled_decay = cfg.weight_decay


def make_optimizer(kind: str, params: mdl.ModelParams, cfg: TrainConfig) -> _Optimizer:
    table = {"sgd": SGD, "adagrad": AdaGrad, "adam": Adam, "adamw": AdamW}
    if kind not in table:
        raise ConfigError(f"unknown optimizer {kind!r}; valid: {OPTIMIZER_KINDS}")
    return table[kind](params, cfg)


def cosine_lr(epoch: int, max_epochs: int, lr0: float, lr_min: float) -> float:
    """Half-cosine decay from lr0 at epoch 0 to lr_min at epoch max_epochs."""
    if not 0 <= epoch <= max_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {max_epochs}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / max_epochs))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_f1: float
    lr: float
    elapsed_s: float = 0.0   # informational; excluded from the CSV log


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("epoch,train_loss,val_loss,val_f1,lr\n")
            for e in self.entries:
                f.write(f"{e.epoch},{e.train_loss!r},{e.val_loss!r},{e.val_f1!r},{e.lr!r}\n")

    def train_losses(self) -> list:
        return [e.train_loss for e in self.entries]


def _binary_f1(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def train(params: mdl.ModelParams, train_windows: WindowSet, cfg: TrainConfig):
    """Train in place and return (params restored to the best-validation
    snapshot, TrainLog). Fully deterministic for a given seed."""
    if train_windows.labels.sum() == 0 or train_windows.labels.sum() == len(train_windows):
        raise ConfigError("training set must contain both classes")
    # validation carved once from the training windows; the fit side gets 1 - val_fraction
    fit_ws, val_ws = split_train_test(
        train_windows, ratio=1.0 - cfg.val_fraction, seed=derive_seed(cfg.seed, 101)
    )
    log = TrainLog()
    best_val = math.inf
    best_snapshot = params.snapshot()
    epochs_since_best = 0
    n_fit = len(fit_ws)
    dropout_rng = np.random.default_rng(derive_seed(cfg.seed, 208))
    optimizer = make_optimizer(cfg.optimizer, params, cfg)

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg.max_epochs, cfg.initial_lr, cfg.lr_min)
        order = np.random.default_rng(derive_seed(cfg.seed, 1, epoch)).permutation(n_fit)
        loss_sum = 0.0
        for start in range(0, n_fit, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = fit_ws.windows[idx]
            labels = fit_ws.labels[idx].astype(np.float64)
            params.zero_grads()
            with Tape() as tape:
                scores, _, _ = mdl.forward_windows(batch, params, train_mode=True,
                                                   dropout_rng=dropout_rng)
                loss = bce_loss(scores, labels)
                ag.backward(loss, tape)
            lval = loss.item()
            if not math.isfinite(lval):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch + 1}, "
                    f"batch starting {start} (optimizer {cfg.optimizer}, lr {lr:g})"
                )
            optimizer.step(lr)
            loss_sum += lval * len(idx)
        train_loss = loss_sum / n_fit

        val_scores = mdl.score_windows(val_ws.windows, params)
        val_loss = bce_loss_value(val_scores, val_ws.labels.astype(np.float64))
        val_f1 = _binary_f1(val_scores, val_ws.labels)
        log.entries.append(EpochStats(epoch + 1, train_loss, val_loss, val_f1, lr,
                                      time.perf_counter() - t0))

        if val_loss <= best_val - cfg.min_improvement:
            best_val = val_loss
            best_snapshot = params.snapshot()
            log.best_epoch = epoch + 1
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                log.stop_reason = f"early_stop(epoch={epoch + 1})"
                break
    if not log.stop_reason:
        log.stop_reason = "max_epochs"
    params.restore(best_snapshot)
    return params, log
