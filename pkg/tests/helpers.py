"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from empathy_aim.data import Conversation
from empathy_aim.model import ModelConfig, backward_conversation, forward_conversation, init_model
from empathy_aim.nn import ModelParams
from empathy_aim.training import bce_batch_grad, bce_batch_loss

VARIANTS = ("aim", "im", "aim_t", "aim_c", "aim_concat")


def random_conversation(rng: np.random.Generator, n: int, D: int, label: int | None = 1,
                        first: str | None = None, conv_id: str = "c") -> Conversation:
    first = first or ("C" if rng.random() < 0.5 else "T")
    other = "T" if first == "C" else "C"
    spk = [first if t % 2 == 0 else other for t in range(n)]
    if "T" not in spk:
        spk[0] = "T"
    return Conversation(conv_id, tuple(spk), rng.standard_normal((n, D)), label)


def tiny_config(variant: str, **kw) -> ModelConfig:
    base = dict(variant=variant, D=3, H=2, P=2, K=2, lam=0.2)
    base.update(kw)
    return ModelConfig(**base)


def conversation_loss_and_grad(conv: Conversation, cfg: ModelConfig):
    """Closure for finite-difference checks: flat parameter dict -> (loss, grad dict)."""
    def f(arrays):
        params = ModelParams.from_arrays(arrays)
        y, trace = forward_conversation(conv, params, cfg)
        loss = bce_batch_loss([y], [conv.label])
        dy = bce_batch_grad([y], [conv.label])[0]
        return loss, backward_conversation(trace, conv, params, cfg, dy).arrays()
    return f


def tiny_instance(variant: str, seed: int, n_turns: int = 5):
    cfg = tiny_config(variant)
    rng = np.random.default_rng(seed)
    conv = random_conversation(rng, n_turns, cfg.D, label=int(rng.integers(2)))
    return conv, cfg, init_model(cfg, seed)
