"""Attention-based influence model and its baselines.

One GRU reads every turn of a conversation in order. For each therapist turn
the hidden states of an influence window of earlier turns are pooled with
dot-product attention (queries and keys are ``tanh(W_x h)``), blended into the
target's hidden state, and mapped to a per-turn probability. The median of the
therapist-turn probabilities is the conversation-level estimate.

Public functions use 1-based turn indices, matching :class:`~empathy_aim.data.Turn`.
The batched engine (:func:`forward_batch` / :func:`backward_batch`) is what
training uses; :func:`forward_conversation` is a batch of one.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .data import Conversation, Speaker
from .errors import ConfigError, EmptyConversation, EmptyWindow, ShapeError, TraceMismatch
from .nn import (
    GruSequenceCache,
    ModelParams,
    gru_cell_forward,
    gru_sequence_backward,
    gru_sequence_forward,
    init_params,
    masked_softmax,
    sigmoid,
    softmax,
)


class Variant(str, Enum):
    AIM = "aim"
    IM = "im"
    AIM_T = "aim_t"
    AIM_C = "aim_c"
    AIM_CONCAT = "aim_concat"

    @property
    def uses_attention(self) -> bool:
        return self is not Variant.IM


WINDOW_MODES = ("recent", "subset")


@dataclass(frozen=True)
class ModelConfig:
    """Structural hyperparameters.

    ``window_mode`` only affects AIM_T / AIM_C: ``"recent"`` takes the K most
    recent turns of that speaker, ``"subset"`` keeps that speaker's turns among
    the last K turns.
    """

    variant: Variant = Variant.AIM
    D: int = 88
    H: int = 64
    P: int = 32
    K: int = 3
    lam: float = 0.2
    window_mode: str = "recent"

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "variant", Variant(self.variant))
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}") from None
        if min(self.D, self.H, self.P) <= 0:
            raise ConfigError("D, H and P must be positive")
        if self.variant.uses_attention and self.K < 1:
            raise ConfigError("influence window size K must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("influence scale lambda must lie in [0, 1]")
        if self.window_mode not in WINDOW_MODES:
            raise ConfigError(f"window_mode must be one of {WINDOW_MODES}")

    @property
    def out_width(self) -> int:
        return 2 * self.H if self.variant is Variant.AIM_CONCAT else self.H


def init_model(cfg: ModelConfig, seed: int) -> ModelParams:
    return init_params(seed, cfg.D, cfg.H, cfg.P, cfg.out_width)


def check_params(params: ModelParams, cfg: ModelConfig) -> None:
    params.gru.check()
    if params.gru.input_dim != cfg.D or params.gru.hidden_dim != cfg.H:
        raise ShapeError(
            f"GRU is D={params.gru.input_dim}, H={params.gru.hidden_dim}; config wants D={cfg.D}, H={cfg.H}"
        )
    if params.W_x.shape != (cfg.P, cfg.H):
        raise ShapeError(f"W_x shape {params.W_x.shape} != {(cfg.P, cfg.H)}")
    if params.W_o.shape != (1, cfg.out_width):
        raise ShapeError(f"W_o shape {params.W_o.shape} != {(1, cfg.out_width)}")
    if params.b_o.shape != (1,):
        raise ShapeError(f"b_o shape {params.b_o.shape} != (1,)")


# --------------------------------------------------------------------------
# per-turn building blocks
# --------------------------------------------------------------------------

def _window0(i0: int, speakers: Sequence[Speaker], cfg: ModelConfig) -> list[int]:
    v = cfg.variant
    if v is Variant.IM:
        return []
    if v in (Variant.AIM, Variant.AIM_CONCAT):
        return list(range(max(0, i0 - cfg.K), i0))
    want = Speaker.THERAPIST if v is Variant.AIM_T else Speaker.CLIENT
    if cfg.window_mode == "subset":
        return [j for j in range(max(0, i0 - cfg.K), i0) if speakers[j] is want]
    picked = []
    for j in range(i0 - 1, -1, -1):
        if len(picked) == cfg.K:
            break
        if speakers[j] is want:
            picked.append(j)
    return picked[::-1]


def influence_window(i: int, cfg: ModelConfig, conv: Conversation | Sequence[Speaker]) -> list[int]:
    """1-based indices of the turns that therapist turn ``i`` attends to, oldest first."""
    speakers = conv.speakers if isinstance(conv, Conversation) else tuple(Speaker(s) for s in conv)
    if not 1 <= i <= len(speakers):
        raise IndexError(f"turn index {i} outside 1..{len(speakers)}")
    return [j + 1 for j in _window0(i - 1, speakers, cfg)]


def encode(conv: Conversation, params: ModelParams) -> np.ndarray:
    """GRU hidden states ``(N, H)`` over all turns, starting from a zero state.

    Chains :func:`gru_cell_forward` turn by turn; the batched engine uses the
    equivalent :func:`gru_sequence_forward`.
    """
    gru = params.gru
    if conv.feature_dim != gru.input_dim:
        raise ShapeError(f"features have D={conv.feature_dim}, GRU expects {gru.input_dim}")
    h = np.zeros(gru.hidden_dim)
    out = np.empty((conv.n_turns, gru.hidden_dim))
    for t, x in enumerate(conv.features):
        h, _ = gru_cell_forward(x, h, gru)
        out[t] = h
    return out


def attend(i: int, window: Sequence[int], h: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Attention weights over ``window`` (1-based) for target ``i`` and the pooled state."""
    if len(window) == 0:
        raise EmptyWindow(f"turn {i} has an empty influence window")
    idx = np.asarray(window, dtype=int) - 1
    q = np.tanh(params.W_x @ h[i - 1])
    keys = np.tanh(h[idx] @ params.W_x.T)
    alpha = softmax(keys @ q)
    return alpha, alpha @ h[idx]


def refine(h_i: np.ndarray, v: np.ndarray | None, cfg: ModelConfig) -> np.ndarray:
    v = np.zeros_like(h_i) if v is None else v
    if cfg.variant is Variant.IM:
        return h_i
    if cfg.variant is Variant.AIM_CONCAT:
        return np.concatenate([h_i, v], axis=-1)
    return (1.0 - cfg.lam) * h_i + cfg.lam * v


def turn_probability(r: np.ndarray, params: ModelParams) -> float:
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != params.W_o.shape[1]:
        raise ShapeError(f"representation width {r.shape[-1]} != W_o width {params.W_o.shape[1]}")
    return sigmoid(r @ params.W_o[0] + params.b_o[0])


def _median_weights(p: np.ndarray) -> np.ndarray:
    """Weights ``w`` with ``median(p) == w @ p``; ties resolved by stable sort."""
    n = p.size
    if n == 0:
        raise EmptyConversation("median of zero therapist-turn probabilities")
    order = np.argsort(p, kind="stable")
    w = np.zeros(n)
    if n % 2:
        w[order[n // 2]] = 1.0
    else:
        w[order[n // 2 - 1]] = 0.5
        w[order[n // 2]] = 0.5
    return w


def median_fuse(probs: Sequence[float]) -> float:
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size == 0:
        raise EmptyConversation("median of zero therapist-turn probabilities")
    s = np.sort(p, kind="stable")
    n = s.size
    if n % 2:
        return float(s[n // 2])
    return float((s[n // 2 - 1] + s[n // 2]) / 2.0)


# --------------------------------------------------------------------------
# batched engine
# --------------------------------------------------------------------------

@dataclass
class BatchLayout:
    """Padded features plus flattened (conversation, therapist turn) targets."""

    X: np.ndarray          # (B, N_max, D)
    lengths: np.ndarray    # (B,)
    tb: np.ndarray         # (M,) conversation of each target
    ti: np.ndarray         # (M,) 0-based turn index of each target
    win: np.ndarray        # (M, K_max) 0-based window indices (0 where masked)
    mask: np.ndarray       # (M, K_max) bool
    spans: list[tuple[int, int]]  # target range [start, stop) of each conversation


_window_cache: dict[tuple, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _conversation_targets(conv: Conversation, cfg: ModelConfig):
    key = (conv.speakers, cfg.variant, cfg.K, cfg.window_mode)
    hit = _window_cache.get(key)
    if hit is not None:
        return hit
    ti = np.array([i for i, s in enumerate(conv.speakers) if s is Speaker.THERAPIST], dtype=int)
    kmax = cfg.K if cfg.variant.uses_attention else 0
    win = np.zeros((ti.size, kmax), dtype=int)
    mask = np.zeros((ti.size, kmax), dtype=bool)
    for m, i0 in enumerate(ti):
        w = _window0(int(i0), conv.speakers, cfg)
        win[m, :len(w)] = w
        mask[m, :len(w)] = True
    if len(_window_cache) > 50_000:
        _window_cache.clear()
    _window_cache[key] = (ti, win, mask)
    return ti, win, mask


def make_layout(convs: Sequence[Conversation], cfg: ModelConfig) -> BatchLayout:
    if not convs:
        raise EmptyConversation("empty batch")
    lengths = np.array([c.n_turns for c in convs])
    n_max = int(lengths.max())
    X = np.zeros((len(convs), n_max, cfg.D))
    tbs, tis, wins, masks, spans = [], [], [], [], []
    start = 0
    for b, conv in enumerate(convs):
        if conv.feature_dim != cfg.D:
            raise ShapeError(f"conversation {conv.id!r} has D={conv.feature_dim}, model expects {cfg.D}")
        X[b, :conv.n_turns] = conv.features
        ti, win, mask = _conversation_targets(conv, cfg)
        if ti.size == 0:
            raise EmptyConversation(f"conversation {conv.id!r} has no therapist turn")
        tbs.append(np.full(ti.size, b))
        tis.append(ti)
        wins.append(win)
        masks.append(mask)
        spans.append((start, start + ti.size))
        start += ti.size
    return BatchLayout(X, lengths, np.concatenate(tbs), np.concatenate(tis),
                       np.concatenate(wins), np.concatenate(masks), spans)


@dataclass
class BatchTrace:
    layout: BatchLayout
    hidden: np.ndarray       # (B, N_max, H)
    gru_cache: GruSequenceCache
    U: np.ndarray | None     # (B, N_max, P) attention projections
    alpha: np.ndarray        # (M, K_max)
    v: np.ndarray            # (M, H)
    r: np.ndarray            # (M, H or 2H)
    probs: np.ndarray        # (M,)
    median_w: np.ndarray     # (M,)
    y_est: np.ndarray        # (B,)


def forward_batch(layout: BatchLayout, params: ModelParams, cfg: ModelConfig) -> BatchTrace:
    Hs, caches = gru_sequence_forward(layout.X, params.gru)
    tb, ti = layout.tb, layout.ti
    h_t = Hs[tb, ti]
    M = ti.size
    if cfg.variant.uses_attention:
        U = np.tanh(Hs @ params.W_x.T)
        q = U[tb, ti]
        keys = U[tb[:, None], layout.win]
        scores = np.einsum("mkp,mp->mk", keys, q)
        alpha = masked_softmax(scores, layout.mask)
        v = np.einsum("mk,mkh->mh", alpha, Hs[tb[:, None], layout.win])
    else:
        U = None
        alpha = np.zeros((M, 0))
        v = np.zeros_like(h_t)
    r = refine(h_t, v, cfg)
    probs = sigmoid(r @ params.W_o[0] + params.b_o[0])
    median_w = np.zeros(M)
    y_est = np.zeros(len(layout.spans))
    for b, (s, e) in enumerate(layout.spans):
        w = _median_weights(probs[s:e])
        median_w[s:e] = w
        y_est[b] = median_fuse(probs[s:e])
    return BatchTrace(layout, Hs, caches, U, alpha, v, r, probs, median_w, y_est)


def backward_batch(trace: BatchTrace, params: ModelParams, cfg: ModelConfig,
                   dy_est: np.ndarray) -> ModelParams:
    """Gradients of ``sum_b dy_est[b] * y_est[b]`` with respect to every parameter."""
    lay = trace.layout
    tb, ti = lay.tb, lay.ti
    Hs = trace.hidden
    H = cfg.H
    dy_est = np.asarray(dy_est, dtype=np.float64).reshape(-1)

    dy = trace.median_w * dy_est[tb]
    y = trace.probs
    dlogit = dy * y * (1.0 - y)
    dW_o = (dlogit @ trace.r)[None, :]
    db_o = np.array([dlogit.sum()])
    dr = dlogit[:, None] * params.W_o[0][None, :]

    if cfg.variant is Variant.IM:
        dh_t, dv = dr, None
    elif cfg.variant is Variant.AIM_CONCAT:
        dh_t, dv = dr[:, :H], dr[:, H:]
    else:
        dh_t, dv = (1.0 - cfg.lam) * dr, cfg.lam * dr

    dH = np.zeros_like(Hs)
    np.add.at(dH, (tb, ti), dh_t)
    dW_x = np.zeros_like(params.W_x)

    if dv is not None:
        win = lay.win
        alpha = trace.alpha
        Hw = Hs[tb[:, None], win]
        dalpha = np.einsum("mkh,mh->mk", Hw, dv)
        np.add.at(dH, (tb[:, None], win), alpha[:, :, None] * dv[:, None, :])
        dscores = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
        U = trace.U
        q = U[tb, ti]
        keys = U[tb[:, None], win]
        dU = np.zeros_like(U)
        np.add.at(dU, (tb, ti), np.einsum("mk,mkp->mp", dscores, keys))
        np.add.at(dU, (tb[:, None], win), dscores[:, :, None] * q[:, None, :])
        dA = dU * (1.0 - U * U)
        P = params.W_x.shape[0]
        dW_x = dA.reshape(-1, P).T @ Hs.reshape(-1, H)
        dH += dA @ params.W_x

    _, dgru = gru_sequence_backward(trace.gru_cache, params.gru, dH)
    return ModelParams(dgru, dW_x, dW_o, db_o)


def predict(convs: Sequence[Conversation], params: ModelParams, cfg: ModelConfig,
            chunk: int = 64) -> np.ndarray:
    """Conversation-level probabilities, evaluated in chunks."""
    out = []
    for s in range(0, len(convs), chunk):
        out.append(forward_batch(make_layout(convs[s:s + chunk], cfg), params, cfg).y_est)
    return np.concatenate(out) if out else np.zeros(0)


# --------------------------------------------------------------------------
# single-conversation API
# --------------------------------------------------------------------------

def _fingerprint(conv: Conversation, params: ModelParams, cfg: ModelConfig) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(repr((conv.id, conv.speakers, cfg)).encode())
    h.update(conv.features.tobytes())
    for k, v in params.arrays().items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


@dataclass
class ForwardTrace:
    """Everything computed by :func:`forward_conversation`.

    Per-target lists are aligned with :attr:`targets` (1-based therapist turn indices).
    """

    hidden: np.ndarray
    projections: np.ndarray | None
    targets: list[int]
    windows: list[list[int]]
    alphas: list[np.ndarray]
    v: np.ndarray
    refined: np.ndarray
    probs: np.ndarray
    y_est: float
    _batch: BatchTrace = field(repr=False)
    _fingerprint: str = field(repr=False)

    def records(self) -> list[dict]:
        return [
            {"turn": i, "window": w, "alpha": a.tolist(), "prob": float(p)}
            for i, w, a, p in zip(self.targets, self.windows, self.alphas, self.probs)
        ]


def forward_conversation(conv: Conversation, params: ModelParams,
                         cfg: ModelConfig) -> tuple[float, ForwardTrace]:
    check_params(params, cfg)
    bt = forward_batch(make_layout([conv], cfg), params, cfg)
    lay = bt.layout
    windows = [[int(j) + 1 for j in lay.win[m][lay.mask[m]]] for m in range(lay.ti.size)]
    alphas = [bt.alpha[m][lay.mask[m]] for m in range(lay.ti.size)]
    y = float(bt.y_est[0])
    trace = ForwardTrace(
        hidden=bt.hidden[0], projections=None if bt.U is None else bt.U[0],
        targets=[int(i) + 1 for i in lay.ti], windows=windows, alphas=alphas,
        v=bt.v, refined=bt.r, probs=bt.probs, y_est=y,
        _batch=bt, _fingerprint=_fingerprint(conv, params, cfg),
    )
    return y, trace


def backward_conversation(trace: ForwardTrace, conv: Conversation, params: ModelParams,
                          cfg: ModelConfig, dy_est: float) -> ModelParams:
    if trace._fingerprint != _fingerprint(conv, params, cfg):
        raise TraceMismatch("trace was produced for different inputs, parameters or config")
    return backward_batch(trace._batch, params, cfg, np.array([dy_est]))
