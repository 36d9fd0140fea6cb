"""Turn-level feature corpora: parsing, serialization and speaker-dependent z-normalization.

A corpus file holds one conversation::

    #conv <id> <label|?> <D>
    C<TAB>f1,f2,...,fD
    T<TAB>f1,f2,...,fD
    ...

Turns are listed chronologically and must alternate between client (``C``)
and therapist (``T``). A directory of such files is a corpus.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, TextIO

import numpy as np

from .errors import (
    AlreadyNormalized,
    AlternationViolation,
    ConfigError,
    FeatureDimMismatch,
    NonFiniteFeature,
    ParseError,
)

DEFAULT_FEATURE_DIM = 88  # eGeMAPS functionals
NORM_EPS = 1e-8
CORPUS_SUFFIX = ".conv"


class Speaker(str, Enum):
    THERAPIST = "T"
    CLIENT = "C"


@dataclass(frozen=True)
class Turn:
    speaker: Speaker
    features: np.ndarray
    index: int  # 1-based position in the conversation


@dataclass(frozen=True, eq=False)
class Conversation:
    """An alternating sequence of turns with an optional binary empathy label.

    Features are stored as one ``(N, D)`` float64 matrix; :attr:`turns` gives the
    per-turn view.
    """

    id: str
    speakers: tuple[Speaker, ...]
    features: np.ndarray
    label: int | None = None

    def __post_init__(self) -> None:
        feats = np.array(self.features, dtype=np.float64, copy=True)
        if feats.ndim != 2 or feats.shape[0] != len(self.speakers):
            raise ParseError(
                f"conversation {self.id!r}: features must be (n_turns, D), got {feats.shape}"
            )
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "speakers", tuple(Speaker(s) for s in self.speakers))
        if self.label is not None and self.label not in (0, 1):
            raise ParseError(f"conversation {self.id!r}: label must be 0, 1 or None")
        validate_conversation(self)

    @classmethod
    def from_turns(cls, conv_id: str, turns: Iterable[tuple[str, Iterable[float]]],
                   label: int | None = None) -> "Conversation":
        turns = list(turns)
        speakers = tuple(Speaker(s) for s, _ in turns)
        feats = np.array([list(f) for _, f in turns], dtype=np.float64)
        return cls(conv_id, speakers, feats, label)

    @property
    def n_turns(self) -> int:
        return len(self.speakers)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def turns(self) -> tuple[Turn, ...]:
        return tuple(
            Turn(s, self.features[i], i + 1) for i, s in enumerate(self.speakers)
        )

    @property
    def therapist_indices(self) -> tuple[int, ...]:
        """1-based indices of therapist turns."""
        return tuple(i + 1 for i, s in enumerate(self.speakers) if s is Speaker.THERAPIST)

    def with_features(self, features: np.ndarray) -> "Conversation":
        return replace(self, features=features)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Conversation):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.speakers == other.speakers
            and self.features.shape == other.features.shape
            and bool(np.array_equal(self.features, other.features))
        )

    __hash__ = None  # type: ignore[assignment]


def validate_conversation(conv: Conversation, feature_dim: int | None = None) -> None:
    if feature_dim is not None and conv.features.shape[1] != feature_dim:
        raise FeatureDimMismatch(conv.id, None, feature_dim, conv.features.shape[1])
    for i in range(1, len(conv.speakers)):
        if conv.speakers[i] == conv.speakers[i - 1]:
            raise AlternationViolation(conv.id, i + 1)
    bad = ~np.isfinite(conv.features).all(axis=1)
    if bad.any():
        raise NonFiniteFeature(conv.id, int(np.argmax(bad)) + 1)
    if Speaker.THERAPIST not in conv.speakers:
        raise ParseError(f"conversation {conv.id!r} has no therapist turn")


@dataclass(frozen=True, eq=False)
class Corpus:
    conversations: tuple[Conversation, ...]
    feature_dim: int
    # (group key, speaker) -> (mean, std) actually applied; None until normalized
    normalization: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "conversations", tuple(self.conversations))
        ids = [c.id for c in self.conversations]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ParseError(f"duplicate conversation ids: {dupes}")
        for conv in self.conversations:
            if conv.feature_dim != self.feature_dim:
                raise FeatureDimMismatch(conv.id, None, self.feature_dim, conv.feature_dim)

    def __len__(self) -> int:
        return len(self.conversations)

    def __iter__(self) -> Iterator[Conversation]:
        return iter(self.conversations)

    def __getitem__(self, i: int) -> Conversation:
        return self.conversations[i]

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.conversations]

    @property
    def is_normalized(self) -> bool:
        return self.normalization is not None

    def subset(self, ids: Iterable[str]) -> "Corpus":
        by_id = {c.id: c for c in self.conversations}
        return Corpus(tuple(by_id[i] for i in ids), self.feature_dim, self.normalization)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.feature_dim == other.feature_dim
            and self.conversations == other.conversations
            and self.is_normalized == other.is_normalized
        )

    __hash__ = None  # type: ignore[assignment]


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

def _parse_header(line: str, lineno: int) -> tuple[str, int | None, int]:
    parts = line.split()
    if len(parts) != 4 or parts[0] != "#conv":
        raise ParseError(f"line {lineno}: expected '#conv <id> <label|?> <D>', got {line!r}")
    _, conv_id, label_tok, dim_tok = parts
    if label_tok == "?":
        label = None
    elif label_tok in ("0", "1"):
        label = int(label_tok)
    else:
        raise ParseError(f"line {lineno}: label must be 0, 1 or '?', got {label_tok!r}")
    try:
        dim = int(dim_tok)
    except ValueError:
        raise ParseError(f"line {lineno}: bad feature dimension {dim_tok!r}") from None
    return conv_id, label, dim


def _iter_conversations(lines: Iterable[str], feature_dim: int,
                        source: str) -> Iterator[Conversation]:
    header: tuple[str, int | None, int] | None = None
    speakers: list[Speaker] = []
    rows: list[list[float]] = []

    def finish() -> Conversation:
        assert header is not None
        conv_id, label, _ = header
        if not speakers:
            raise ParseError(f"{source}: conversation {conv_id!r} has no turns")
        return Conversation(conv_id, tuple(speakers), np.array(rows, dtype=np.float64), label)

    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#conv"):
            if header is not None:
                yield finish()
            header = _parse_header(line, lineno)
            if header[2] != feature_dim:
                raise FeatureDimMismatch(header[0], None, feature_dim, header[2])
            speakers, rows = [], []
            continue
        if line.startswith("#"):
            continue
        if header is None:
            raise ParseError(f"{source}, line {lineno}: turn row before '#conv' header")
        conv_id = header[0]
        turn_no = len(speakers) + 1
        tag, _, values = line.partition("\t") if "\t" in line else line.partition(" ")
        tag = tag.strip()
        if tag not in ("T", "C"):
            raise ParseError(
                f"{source}, line {lineno}: unknown speaker tag {tag!r} in conversation {conv_id!r}"
            )
        try:
            row = [float(v) for v in values.strip().split(",")]
        except ValueError:
            raise ParseError(
                f"{source}, line {lineno}: malformed feature row in conversation {conv_id!r}"
            ) from None
        if len(row) != feature_dim:
            raise FeatureDimMismatch(conv_id, turn_no, feature_dim, len(row))
        if not all(math.isfinite(v) for v in row):
            raise NonFiniteFeature(conv_id, turn_no)
        speaker = Speaker(tag)
        if speakers and speakers[-1] is speaker:
            raise AlternationViolation(conv_id, turn_no)
        speakers.append(speaker)
        rows.append(row)
    if header is not None:
        yield finish()


def parse_corpus(source: str | os.PathLike | TextIO,
                 feature_dim: int = DEFAULT_FEATURE_DIM) -> Corpus:
    """Read a corpus from a directory of ``*.conv`` files, a single file, or a text stream.

    Directory entries are read in sorted filename order. A single file or stream may
    contain several ``#conv`` blocks.
    """
    if feature_dim <= 0:
        raise ConfigError("feature_dim must be positive")
    convs: list[Conversation] = []
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        files = sorted(path.glob(f"*{CORPUS_SUFFIX}")) if path.is_dir() else [path]
        for f in files:
            with open(f, encoding="utf-8") as fh:
                convs.extend(_iter_conversations(fh, feature_dim, str(f)))
    else:
        convs.extend(_iter_conversations(source, feature_dim, getattr(source, "name", "<stream>")))
    return Corpus(tuple(convs), feature_dim)


def format_conversation(conv: Conversation) -> str:
    label = "?" if conv.label is None else str(conv.label)
    out = [f"#conv {conv.id} {label} {conv.feature_dim}"]
    for spk, row in zip(conv.speakers, conv.features):
        # repr() gives the shortest string that round-trips exactly
        out.append(spk.value + "\t" + ",".join(repr(float(v)) for v in row))
    return "\n".join(out) + "\n"


def write_corpus(corpus: Corpus, directory: str | os.PathLike) -> list[Path]:
    """Write one ``<id>.conv`` file per conversation; returns the paths in corpus order."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for conv in corpus:
        p = out / f"{conv.id}{CORPUS_SUFFIX}"
        p.write_text(format_conversation(conv), encoding="utf-8")
        paths.append(p)
    return paths


def dumps_corpus(corpus: Corpus) -> str:
    buf = io.StringIO()
    for conv in corpus:
        buf.write(format_conversation(conv))
    return buf.getvalue()


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

def default_dyad_key(conv_id: str) -> str:
    """Dyad key used by pooled normalization and dyad-disjoint folds: id up to the last '-'."""
    return conv_id.rsplit("-", 1)[0]


def zscore_normalize(corpus: Corpus, scope: str = "conversation",
                     dyad_key: Callable[[str], str] = default_dyad_key) -> Corpus:
    """Speaker-dependent z-normalization of every feature dimension.

    ``scope="conversation"`` computes mean and population std per speaker within
    each conversation. ``scope="dyad"`` pools each speaker role over all
    conversations sharing a dyad key. Constant dimensions map to zero.
    """
    if corpus.is_normalized:
        raise AlreadyNormalized("corpus has already been z-normalized")
    if scope not in ("conversation", "dyad"):
        raise ConfigError(f"unknown normalization scope {scope!r}")

    def group(conv: Conversation) -> str:
        return conv.id if scope == "conversation" else dyad_key(conv.id)

    pooled: dict[tuple[str, str], list[np.ndarray]] = {}
    for conv in corpus:
        spk = np.array([s.value for s in conv.speakers])
        for s in (Speaker.CLIENT, Speaker.THERAPIST):
            mask = spk == s.value
            if mask.any():
                pooled.setdefault((group(conv), s.value), []).append(conv.features[mask])

    stats: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}
    for key, blocks in pooled.items():
        x = np.concatenate(blocks, axis=0)
        mu = x.mean(axis=0)
        sd = x.std(axis=0)  # population std
        # exactly constant columns: pin mean to the value so they map to exact zeros
        const = x.max(axis=0) == x.min(axis=0)
        mu = np.where(const, x[0], mu)
        sd = np.where(const, 0.0, sd)
        stats[key] = (mu, sd)

    out = []
    for conv in corpus:
        feats = conv.features.copy()
        spk = np.array([s.value for s in conv.speakers])
        for s in (Speaker.CLIENT, Speaker.THERAPIST):
            mask = spk == s.value
            if mask.any():
                mu, sd = stats[(group(conv), s.value)]
                feats[mask] = (feats[mask] - mu) / np.maximum(sd, NORM_EPS)
        out.append(conv.with_features(feats))
    return Corpus(tuple(out), corpus.feature_dim, stats)
