"""Small verified numerical kernel: GRU cell, activations, Glorot init, Adam, gradient checks.

Everything runs in float64. The GRU uses the Cho et al. (2014) gating with the
reset gate applied to the previous state before the recurrent candidate
matrix::

    z  = sigmoid(W_z x + U_z h_prev + b_z)
    r  = sigmoid(W_r x + U_r h_prev + b_r)
    hc = tanh(W_h x + U_h (r * h_prev) + b_h)
    h  = (1 - z) * h_prev + z * hc

All cell functions accept a leading batch axis on ``x`` and ``h_prev``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
from scipy.special import expit

from .errors import EmptyWindow, NonFiniteGradient, ShapeError

GRU_FIELDS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise EmptyWindow("softmax of an empty score vector")
    e = np.exp(s - s.max())
    return e / e.sum()


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax over ``mask``-ed entries; rows with no valid entry give zeros."""
    s = np.where(mask, scores, -np.inf)
    smax = s.max(axis=-1, keepdims=True)
    smax = np.where(np.isfinite(smax), smax, 0.0)
    e = np.where(mask, np.exp(np.where(mask, scores - smax, 0.0)), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.where(denom > 0, denom, 1.0)


@dataclass
class GruParams:
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[0]

    def check(self) -> None:
        D, H = self.input_dim, self.hidden_dim
        want = {"W": (H, D), "U": (H, H), "b": (H,)}
        for name in GRU_FIELDS:
            arr = getattr(self, name)
            if arr.shape != want[name[0]]:
                raise ShapeError(f"GRU {name}: expected shape {want[name[0]]}, got {arr.shape}")

    @classmethod
    def zeros(cls, D: int, H: int) -> "GruParams":
        return cls(*(np.zeros((H, D)) for _ in range(3)),
                   *(np.zeros((H, H)) for _ in range(3)),
                   *(np.zeros(H) for _ in range(3)))


@dataclass
class GruCellCache:
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    h_cand: np.ndarray
    h: np.ndarray


def gru_cell_forward(x, h_prev, p: GruParams) -> tuple[np.ndarray, GruCellCache]:
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x.shape[-1] != p.input_dim or h_prev.shape[-1] != p.hidden_dim \
            or x.shape[:-1] != h_prev.shape[:-1]:
        raise ShapeError(
            f"gru_cell_forward: x {x.shape}, h_prev {h_prev.shape} do not fit "
            f"D={p.input_dim}, H={p.hidden_dim}"
        )
    z = sigmoid(x @ p.W_z.T + h_prev @ p.U_z.T + p.b_z)
    r = sigmoid(x @ p.W_r.T + h_prev @ p.U_r.T + p.b_r)
    h_cand = np.tanh(x @ p.W_h.T + (r * h_prev) @ p.U_h.T + p.b_h)
    h = (1.0 - z) * h_prev + z * h_cand
    return h, GruCellCache(x, h_prev, z, r, h_cand, h)


def gru_cell_backward(cache: GruCellCache, p: GruParams, dh) -> tuple[np.ndarray, np.ndarray, GruParams]:
    """Reverse-mode of :func:`gru_cell_forward` for the scalar ``<dh, h>``.

    With a batch axis, parameter gradients are summed over the batch.
    """
    dh = np.asarray(dh, dtype=np.float64)
    if dh.shape != cache.h.shape:
        raise ShapeError(f"gru_cell_backward: dh {dh.shape} does not match h {cache.h.shape}")
    x, h_prev, z, r, hc = cache.x, cache.h_prev, cache.z, cache.r, cache.h_cand

    d_hc = dh * z
    d_z = dh * (hc - h_prev)
    dh_prev = dh * (1.0 - z)

    da_h = d_hc * (1.0 - hc * hc)
    d_rh = da_h @ p.U_h
    d_r = d_rh * h_prev
    dh_prev = dh_prev + d_rh * r

    da_z = d_z * z * (1.0 - z)
    da_r = d_r * r * (1.0 - r)

    dx = da_z @ p.W_z + da_r @ p.W_r + da_h @ p.W_h
    dh_prev = dh_prev + da_z @ p.U_z + da_r @ p.U_r

    def outer(a, b):
        return a.T @ b if a.ndim == 2 else np.outer(a, b)

    def bsum(a):
        return a.sum(axis=0) if a.ndim == 2 else a

    grads = GruParams(
        W_z=outer(da_z, x), W_r=outer(da_r, x), W_h=outer(da_h, x),
        U_z=outer(da_z, h_prev), U_r=outer(da_r, h_prev), U_h=outer(da_h, r * h_prev),
        b_z=bsum(da_z), b_r=bsum(da_r), b_h=bsum(da_h),
    )
    return dx, dh_prev, grads


@dataclass
class GruSequenceCache:
    X: np.ndarray       # (..., N, D)
    h_prev: np.ndarray  # (..., N, H) state entering each step
    z: np.ndarray
    r: np.ndarray
    h_cand: np.ndarray


def gru_sequence_forward(X, p: GruParams, h0=None) -> tuple[np.ndarray, GruSequenceCache]:
    """Run the cell over the time axis (second to last) of ``X``.

    Same recurrence as :func:`gru_cell_forward`, but the input projections of all
    steps are computed in one matrix product.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != p.input_dim:
        raise ShapeError(f"features have D={X.shape[-1]}, GRU expects {p.input_dim}")
    H = p.hidden_dim
    n = X.shape[-2]
    W = np.concatenate([p.W_z, p.W_r, p.W_h], axis=0)
    b = np.concatenate([p.b_z, p.b_r, p.b_h])
    A = X @ W.T + b
    U_zr = np.concatenate([p.U_z, p.U_r], axis=0)
    h = np.zeros(X.shape[:-2] + (H,)) if h0 is None else np.asarray(h0, dtype=np.float64)
    hp_all = np.empty(X.shape[:-1] + (H,))
    z_all, r_all, c_all, h_all = (np.empty_like(hp_all) for _ in range(4))
    for t in range(n):
        a = A[..., t, :]
        zr = sigmoid(a[..., :2 * H] + h @ U_zr.T)
        z, r = zr[..., :H], zr[..., H:]
        hc = np.tanh(a[..., 2 * H:] + (r * h) @ p.U_h.T)
        hp_all[..., t, :] = h
        h = (1.0 - z) * h + z * hc
        z_all[..., t, :], r_all[..., t, :], c_all[..., t, :], h_all[..., t, :] = z, r, hc, h
    return h_all, GruSequenceCache(X, hp_all, z_all, r_all, c_all)


def gru_sequence_backward(cache: GruSequenceCache, p: GruParams, dH) -> tuple[np.ndarray, GruParams]:
    """Backprop through time given upstream gradients ``dH`` on every output state.

    Returns the gradient on the initial state and the summed parameter gradients.
    """
    dH = np.asarray(dH, dtype=np.float64)
    H = p.hidden_dim
    n = dH.shape[-2]
    U_zr = np.concatenate([p.U_z, p.U_r], axis=0)
    dA = np.empty(dH.shape[:-1] + (3 * H,))
    dh_next = np.zeros(dH.shape[:-2] + (H,))
    for t in range(n - 1, -1, -1):
        dh = dH[..., t, :] + dh_next
        z, r, hc, hp = (cache.z[..., t, :], cache.r[..., t, :],
                        cache.h_cand[..., t, :], cache.h_prev[..., t, :])
        da_h = dh * z * (1.0 - hc * hc)
        d_rh = da_h @ p.U_h
        da_z = dh * (hc - hp) * z * (1.0 - z)
        da_r = d_rh * hp * r * (1.0 - r)
        da_zr = np.concatenate([da_z, da_r], axis=-1)
        dh_next = dh * (1.0 - z) + d_rh * r + da_zr @ U_zr
        dA[..., t, :H], dA[..., t, H:2 * H], dA[..., t, 2 * H:] = da_z, da_r, da_h
    D = cache.X.shape[-1]
    A2 = dA.reshape(-1, 3 * H)
    dW = A2.T @ cache.X.reshape(-1, D)
    db = A2.sum(axis=0)
    hp2 = cache.h_prev.reshape(-1, H)
    dU_zr = A2[:, :2 * H].T @ hp2
    dU_h = A2[:, 2 * H:].T @ (cache.r.reshape(-1, H) * hp2)
    grads = GruParams(
        W_z=dW[:H], W_r=dW[H:2 * H], W_h=dW[2 * H:],
        U_z=dU_zr[:H], U_r=dU_zr[H:], U_h=dU_h,
        b_z=db[:H], b_r=db[H:2 * H], b_h=db[2 * H:],
    )
    return dh_next, grads


# --------------------------------------------------------------------------
# full parameter set
# --------------------------------------------------------------------------

@dataclass
class ModelParams:
    """All trainable weights: shared GRU, attention projection, output head."""

    gru: GruParams
    W_x: np.ndarray  # (P, H), no bias
    W_o: np.ndarray  # (1, H) or (1, 2H) for concatenation
    b_o: np.ndarray  # (1,)

    def arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view in canonical order."""
        out = {f"gru.{n}": getattr(self.gru, n) for n in GRU_FIELDS}
        out.update(W_x=self.W_x, W_o=self.W_o, b_o=self.b_o)
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        gru = GruParams(**{n: np.asarray(arrays[f"gru.{n}"], dtype=np.float64) for n in GRU_FIELDS})
        return cls(gru, *(np.asarray(arrays[k], dtype=np.float64) for k in ("W_x", "W_o", "b_o")))

    def zeros_like(self) -> "ModelParams":
        return ModelParams.from_arrays({k: np.zeros_like(v) for k, v in self.arrays().items()})

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays({k: v.copy() for k, v in self.arrays().items()})

    def __add__(self, other: "ModelParams") -> "ModelParams":
        b = other.arrays()
        return ModelParams.from_arrays({k: v + b[k] for k, v in self.arrays().items()})

    def equal(self, other: "ModelParams") -> bool:
        b = other.arrays()
        return all(v.shape == b[k].shape and np.array_equal(v, b[k]) for k, v in self.arrays().items())


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_out, fan_in = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(seed: int, D: int, H: int, P: int, out_width: int) -> ModelParams:
    """Glorot-uniform weights and zero biases, fully determined by ``seed``.

    Draw order is fixed (W_z, W_r, W_h, U_z, U_r, U_h, W_x, W_o) so variants that
    differ only in output width share the same encoder initialization.
    """
    rng = np.random.default_rng(seed)
    W = [glorot_uniform(rng, (H, D)) for _ in range(3)]
    U = [glorot_uniform(rng, (H, H)) for _ in range(3)]
    W_x = glorot_uniform(rng, (P, H))
    W_o = glorot_uniform(rng, (1, out_width))
    gru = GruParams(*W, *U, np.zeros(H), np.zeros(H), np.zeros(H))
    return ModelParams(gru, W_x, W_o, np.zeros(1))


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k!r} at step {state.t + 1}")
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient {k!r}: shape {g.shape} != parameter shape {p.shape}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        new_p[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def numeric_gradient(loss_fn: Callable[[Any], float], params, eps: float = 1e-5):
    """Central differences of ``loss_fn`` at ``params`` (an array or a name -> array mapping)."""
    if isinstance(params, Mapping):
        work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        out = {}
        for k, arr in work.items():
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = loss_fn(work)
                flat[j] = orig - eps
                fm = loss_fn(work)
                flat[j] = orig
                gflat[j] = (fp - fm) / (2.0 * eps)
            out[k] = g
        return out
    work = np.array(params, dtype=np.float64)
    return numeric_gradient(lambda d: loss_fn(d["_"]), {"_": work}, eps)["_"]


def relative_error(analytic, numeric) -> float:
    """Max over coordinates of |a - n| / max(|a|, |n|, 1e-8)."""
    if isinstance(analytic, Mapping):
        return max((relative_error(analytic[k], numeric[k]) for k in analytic), default=0.0)
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def finite_diff_check(loss_and_grad: Callable[[Any], tuple[float, Any]], params,
                      eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``loss_and_grad(params)`` returns ``(loss, grad)`` with ``grad`` shaped like
    ``params``.
    """
    _, analytic = loss_and_grad(params)
    numeric = numeric_gradient(lambda p: loss_and_grad(p)[0], params, eps)
    return relative_error(analytic, numeric)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_FORMAT = "empathy-aim-checkpoint/1"


def save_checkpoint(path: str | os.PathLike, params: ModelParams, meta: Mapping[str, Any]) -> None:
    """Write a self-describing JSON checkpoint.

    Floats are written with ``repr`` so loading reproduces every bit.
    """
    tensors = [
        {"name": k, "shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
        for k, v in params.arrays().items()
    ]
    doc = {"format": CHECKPOINT_FORMAT, "meta": dict(meta), "tensors": tensors}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelParams, dict[str, Any]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    arrays = {
        t["name"]: np.array(t["data"], dtype=np.float64).reshape(t["shape"])
        for t in doc["tensors"]
    }
    return ModelParams.from_arrays(arrays), doc["meta"]
