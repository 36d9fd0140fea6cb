"""Seeded synthetic dyadic conversations with a planted, mode-dependent class signal.

High-empathy conversations receive a mean shift ``b`` in the first ``subspace_dim``
feature dimensions on the turns selected by the influence mode:

* ``interpersonal``: client turns at most ``lag`` turns before some therapist turn
* ``intrapersonal``: therapist turns at most ``lag`` turns before some therapist turn
* ``mixed``: both of the above
* ``none``: the therapist turns themselves

Every other value is standard normal noise, identical in distribution across classes.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Conversation, Corpus, Speaker, write_corpus
from .errors import ConfigError

MODES = ("interpersonal", "intrapersonal", "mixed", "none")
MANIFEST_NAME = "synth.json"
SESSIONS_PER_DYAD = 4


@dataclass(frozen=True)
class SynthConfig:
    n_conversations: int = 80
    turns_per_conversation: tuple[int, int] = (12, 24)  # inclusive range
    feature_dim: int = 88
    influence_mode: str = "mixed"
    lag: int = 3
    signal_strength: float = 0.8
    label_balance: float = 0.5
    seed: int = 0
    subspace_dim: int = 4
    bias_scale: float = 1.0  # per-dimension shift at full strength

    def __post_init__(self) -> None:
        lo, hi = self.turns_per_conversation
        if self.n_conversations < 2:
            raise ConfigError("n_conversations must be >= 2")
        if not 2 <= lo <= hi:
            raise ConfigError(f"turn range must satisfy 2 <= min <= max, got {lo}..{hi}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.influence_mode not in MODES:
            raise ConfigError(f"influence_mode must be one of {MODES}, got {self.influence_mode!r}")
        if self.lag < 1:
            raise ConfigError("lag must be >= 1")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ConfigError("signal_strength must lie in [0, 1]")
        if not 0.0 <= self.label_balance <= 1.0:
            raise ConfigError("label_balance must lie in [0, 1]")
        if not 1 <= self.subspace_dim <= self.feature_dim:
            raise ConfigError("subspace_dim must lie in [1, feature_dim]")
        if self.bias_scale < 0:
            raise ConfigError("bias_scale must be non-negative")

    @property
    def bias(self) -> np.ndarray:
        b = np.zeros(self.feature_dim)
        b[: self.subspace_dim] = self.signal_strength * self.bias_scale
        return b


def conversation_id(i: int) -> str:
    """Ids group consecutive sessions into dyads, e.g. ``d003-2``."""
    return f"d{i // SESSIONS_PER_DYAD:03d}-{i % SESSIONS_PER_DYAD + 1}"


def biased_turns(speakers: list[Speaker], mode: str, lag: int) -> np.ndarray:
    """Boolean mask of the turns that carry the class bias in a high-empathy conversation."""
    n = len(speakers)
    sel = np.zeros(n, dtype=bool)
    for i, s in enumerate(speakers):
        if s is not Speaker.THERAPIST:
            continue
        if mode == "none":
            sel[i] = True
            continue
        for j in range(max(0, i - lag), i):
            if speakers[j] is Speaker.CLIENT and mode in ("interpersonal", "mixed"):
                sel[j] = True
            elif speakers[j] is Speaker.THERAPIST and mode in ("intrapersonal", "mixed"):
                sel[j] = True
    return sel


def _labels(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n_high = int(round(cfg.n_conversations * cfg.label_balance))
    labels = np.zeros(cfg.n_conversations, dtype=int)
    labels[:n_high] = 1
    return rng.permutation(labels)


def generate(cfg: SynthConfig) -> Corpus:
    """Deterministic in ``cfg``: each conversation draws from its own child seed."""
    root = np.random.SeedSequence(cfg.seed)
    label_seq, *conv_seqs = root.spawn(cfg.n_conversations + 1)
    labels = _labels(cfg, np.random.default_rng(label_seq))
    lo, hi = cfg.turns_per_conversation
    bias = cfg.bias
    convs = []
    for i, (seq, y) in enumerate(zip(conv_seqs, labels)):
        rng = np.random.default_rng(seq)
        n = int(rng.integers(lo, hi + 1))
        first = int(rng.integers(2))
        speakers = [(Speaker.CLIENT, Speaker.THERAPIST)[(t + first) % 2] for t in range(n)]
        X = rng.standard_normal((n, cfg.feature_dim))
        if y == 1:
            X[biased_turns(speakers, cfg.influence_mode, cfg.lag)] += bias
        convs.append(Conversation(conversation_id(i), tuple(speakers), X, int(y)))
    return Corpus(convs, cfg.feature_dim)


def config_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["turns_per_conversation"] = list(cfg.turns_per_conversation)
    return d


def write_synth(corpus: Corpus, cfg: SynthConfig, directory: str | os.PathLike) -> list[Path]:
    """Corpus files plus a sidecar ``synth.json`` echoing the generator config."""
    paths = write_corpus(corpus, directory)
    side = Path(directory) / MANIFEST_NAME
    side.write_text(json.dumps({"generator": "empathy-aim-synth/1", "config": config_dict(cfg)},
                               indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths + [side]
