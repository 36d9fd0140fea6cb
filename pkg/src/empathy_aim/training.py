"""Mini-batch training with a conversation-level BCE objective and dev-set model selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .data import Conversation, Corpus
from .errors import EmptyEvalSet, EmptyHistory, MissingLabel, NonFiniteLoss, ShapeError
from .model import ModelConfig, backward_batch, forward_batch, init_model, make_layout, predict
from .nn import AdamState, ModelParams, adam_step

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self) -> None:
        from .errors import ConfigError

        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")


class Checkpoint(NamedTuple):
    epoch: int  # 1-based
    params: ModelParams | None


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    dev_acc: list[float] = field(default_factory=list)
    # params saved whenever dev accuracy strictly improved; keyed by 1-based epoch
    checkpoints: dict[int, ModelParams] = field(default_factory=dict)

    @property
    def best_epoch(self) -> int:
        return select_best(self).epoch

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,dev_acc"]
        for e, (l, a) in enumerate(zip(self.train_loss, self.dev_acc), start=1):
            lines.append(f"{e},{l!r},{a!r}")
        return "\n".join(lines) + "\n"


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce_batch_loss(y_est: Sequence[float], y_tgt: Sequence[int]) -> float:
    p = _clamp(np.asarray(y_est, dtype=np.float64))
    t = np.asarray(y_tgt, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"{p.shape[0] if p.ndim else 0} predictions vs {t.shape[0] if t.ndim else 0} targets")
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))


def bce_batch_grad(y_est: Sequence[float], y_tgt: Sequence[int]) -> np.ndarray:
    """d loss / d y_est, evaluated at the clamped probabilities."""
    p = _clamp(np.asarray(y_est, dtype=np.float64))
    t = np.asarray(y_tgt, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError("predictions and targets differ in length")
    return (p - t) / (p * (1.0 - p)) / p.size


def select_best(history: TrainHistory) -> Checkpoint:
    """Epoch with the highest dev accuracy; the earliest one wins ties."""
    if not history.dev_acc:
        raise EmptyHistory("no epochs recorded")
    best = int(np.argmax(history.dev_acc)) + 1  # argmax returns the first maximum
    return Checkpoint(best, history.checkpoints.get(best))


def _labels(convs: Sequence[Conversation]) -> np.ndarray:
    for c in convs:
        if c.label is None:
            raise MissingLabel(f"conversation {c.id!r} is unlabeled")
    return np.array([c.label for c in convs], dtype=np.float64)


def derive_seeds(seed: int, n: int) -> list[int]:
    """Independent child seeds from one integer seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def train(train_set: Corpus | Sequence[Conversation], dev_set: Corpus | Sequence[Conversation],
          mcfg: ModelConfig, tcfg: TrainConfig,
          init: ModelParams | None = None) -> tuple[ModelParams, TrainHistory]:
    """Train for ``tcfg.epochs`` epochs and return the parameters of the best dev epoch."""
    train_convs = list(train_set)
    dev_convs = list(dev_set)
    if not train_convs:
        raise EmptyEvalSet("empty training set")
    if not dev_convs:
        raise EmptyEvalSet("empty development set")
    y_train = _labels(train_convs)
    y_dev = _labels(dev_convs)

    init_seed, shuffle_seed = derive_seeds(tcfg.seed, 2)
    params = init_model(mcfg, init_seed) if init is None else init.copy()
    flat = params.arrays()
    state = AdamState.zeros(flat)
    rng = np.random.default_rng(shuffle_seed)
    history = TrainHistory()
    best_acc = -1.0
    n = len(train_convs)
    L = tcfg.batch_size

    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(n) if tcfg.shuffle else np.arange(n)
        total = 0.0
        for s in range(0, n, L):
            idx = order[s:s + L]
            batch = [train_convs[i] for i in idx]
            tgt = y_train[idx]
            params = ModelParams.from_arrays(flat)
            trace = forward_batch(make_layout(batch, mcfg), params, mcfg)
            loss = bce_batch_loss(trace.y_est, tgt)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}, batch {s // L + 1}: loss is {loss}")
            grads = backward_batch(trace, params, mcfg, bce_batch_grad(trace.y_est, tgt))
            flat, state = adam_step(flat, grads.arrays(), state, tcfg.lr,
                                    tcfg.beta1, tcfg.beta2, tcfg.eps)
            total += loss * len(idx)
        params = ModelParams.from_arrays(flat)
        acc = accuracy(predict(dev_convs, params, mcfg), y_dev)
        history.train_loss.append(total / n)
        history.dev_acc.append(acc)
        if acc > best_acc:
            best_acc = acc
            history.checkpoints[epoch] = params
        log.debug("epoch %d loss %.6f dev_acc %.4f", epoch, total / n, acc)

    return select_best(history).params, history


def accuracy(preds: Sequence[float], labels: Sequence[int]) -> float:
    """Fraction of conversations where ``pred > 0.5`` agrees with the label (0.5 counts as low)."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels)
    if p.size == 0:
        raise EmptyEvalSet("accuracy of an empty set")
    if p.shape != y.shape:
        raise ShapeError("predictions and labels differ in length")
    return float(np.mean((p > 0.5).astype(int) == y))
