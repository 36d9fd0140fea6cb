"""Cross-validation and hyperparameter sweeps."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from .data import Corpus, default_dyad_key
from .errors import ConfigError, InvalidFoldCount
from .model import ModelConfig, Variant, predict
from .training import TrainConfig, accuracy, derive_seeds, train

__all__ = [
    "CvPlan", "CvReport", "SweepTable", "accuracy", "kfold_split",
    "cross_validate", "sweep", "SWEEP_PARAMS",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CvPlan:
    """Fold assignment. Iteration ``j`` tests on fold ``j``, selects on fold ``(j+1) % k``
    and trains on the rest."""

    k: int
    seed: int
    folds: tuple[tuple[str, ...], ...]

    @property
    def assignment(self) -> dict[str, int]:
        return {cid: f for f, ids in enumerate(self.folds) for cid in ids}

    def iteration(self, j: int) -> tuple[list[str], list[str], list[str]]:
        test = list(self.folds[j])
        dev = list(self.folds[(j + 1) % self.k])
        train_ids = [cid for f, ids in enumerate(self.folds)
                     if f not in (j, (j + 1) % self.k) for cid in ids]
        return train_ids, dev, test


def kfold_split(corpus: Corpus, k: int = 6, seed: int = 0, dyad_disjoint: bool = False,
                dyad_key: Callable[[str], str] = default_dyad_key) -> CvPlan:
    """Seeded random partition of the conversations into ``k`` near-equal folds.

    With ``dyad_disjoint`` whole dyads are assigned to folds (each to the
    currently smallest fold), so fold sizes may differ by more than one.
    """
    if k < 2:
        raise InvalidFoldCount(f"need at least 2 folds, got {k}")
    ids = corpus.ids
    if len(ids) < k:
        raise InvalidFoldCount(f"{len(ids)} conversations cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    if not dyad_disjoint:
        perm = rng.permutation(len(ids))
        folds = tuple(tuple(ids[i] for i in part) for part in np.array_split(perm, k))
        return CvPlan(k, seed, folds)
    groups: dict[str, list[str]] = {}
    for cid in ids:
        groups.setdefault(dyad_key(cid), []).append(cid)
    if len(groups) < k:
        raise InvalidFoldCount(f"{len(groups)} dyads cannot fill {k} folds")
    keys = list(groups)
    buckets: list[list[str]] = [[] for _ in range(k)]
    for gi in rng.permutation(len(keys)):
        smallest = min(range(k), key=lambda f: (len(buckets[f]), f))
        buckets[smallest].extend(groups[keys[gi]])
    return CvPlan(k, seed, tuple(tuple(b) for b in buckets))


@dataclass
class CvReport:
    fold_acc: list[float]
    best_epochs: list[int]
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def mean_acc(self) -> float:
        return float(sum(self.fold_acc) / len(self.fold_acc))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "test_acc", "best_epoch"])
        for j, (a, e) in enumerate(zip(self.fold_acc, self.best_epochs)):
            w.writerow([j, repr(a), e])
        w.writerow(["mean", repr(self.mean_acc), ""])
        return buf.getvalue()


def config_echo(mcfg: ModelConfig, tcfg: TrainConfig) -> dict[str, Any]:
    out = {f"model.{k}": (v.value if isinstance(v, Variant) else v) for k, v in vars(mcfg).items()}
    out.update({f"train.{k}": v for k, v in vars(tcfg).items()})
    return out


def cross_validate(corpus: Corpus, mcfg: ModelConfig, tcfg: TrainConfig, plan: CvPlan,
                   progress: Callable[[int, float], None] | None = None) -> CvReport:
    """Train and test once per fold; each fold gets its own derived training seed."""
    fold_seeds = derive_seeds(tcfg.seed, plan.k)
    accs, epochs = [], []
    for j in range(plan.k):
        train_ids, dev_ids, test_ids = plan.iteration(j)
        params, hist = train(corpus.subset(train_ids), corpus.subset(dev_ids), mcfg,
                             replace(tcfg, seed=fold_seeds[j]))
        test = corpus.subset(test_ids)
        acc = accuracy(predict(list(test), params, mcfg), [c.label for c in test])
        accs.append(acc)
        epochs.append(hist.best_epoch)
        log.info("fold %d/%d test_acc %.4f (best epoch %d)", j + 1, plan.k, acc, hist.best_epoch)
        if progress is not None:
            progress(j, acc)
    return CvReport(accs, epochs, config_echo(mcfg, tcfg))


SWEEP_PARAMS = ("lambda", "window_K", "variant")


def _apply(mcfg: ModelConfig, parameter: str, value) -> ModelConfig:
    if parameter == "lambda":
        return replace(mcfg, lam=float(value))
    if parameter == "window_K":
        return replace(mcfg, K=int(value))
    if parameter == "variant":
        return replace(mcfg, variant=Variant(value))
    raise ConfigError(f"unknown sweep parameter {parameter!r}; expected one of {SWEEP_PARAMS}")


@dataclass
class SweepTable:
    parameter: str
    values: list
    reports: list[CvReport]

    @property
    def means(self) -> list[float]:
        return [r.mean_acc for r in self.reports]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = len(self.reports[0].fold_acc) if self.reports else 0
        w.writerow([self.parameter, "mean_acc"] + [f"fold{j}" for j in range(k)])
        for v, r in zip(self.values, self.reports):
            w.writerow([v, repr(r.mean_acc)] + [repr(a) for a in r.fold_acc])
        return buf.getvalue()

    def plot_data(self) -> str:
        """Whitespace-separated ``index value mean_acc`` lines for gnuplot."""
        lines = [f"# {self.parameter} sweep: index value mean_acc"]
        for i, (v, m) in enumerate(zip(self.values, self.means)):
            lines.append(f"{i} {v} {m!r}")
        return "\n".join(lines) + "\n"


def sweep(corpus: Corpus, mcfg: ModelConfig, tcfg: TrainConfig, parameter: str,
          values: Sequence, plan: CvPlan) -> SweepTable:
    """Cross-validate once per value with the same fold plan and training seeds."""
    cfgs = [_apply(mcfg, parameter, v) for v in values]  # validate everything up front
    reports = []
    for v, cfg in zip(values, cfgs):
        log.info("sweep %s=%s", parameter, v)
        reports.append(cross_validate(corpus, cfg, tcfg, plan))
    return SweepTable(parameter, list(values), reports)
