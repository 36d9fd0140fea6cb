import math

import numpy as np
import pytest

from empathy_aim.data import Conversation, Corpus
from empathy_aim.errors import ConfigError, EmptyEvalSet, EmptyHistory, MissingLabel, ShapeError
from empathy_aim.model import ModelConfig, forward_batch, init_model, make_layout, predict
from empathy_aim.nn import numeric_gradient, relative_error
from empathy_aim.synth import SynthConfig, generate
from empathy_aim.training import (
    TrainConfig,
    TrainHistory,
    accuracy,
    bce_batch_grad,
    bce_batch_loss,
    derive_seeds,
    select_best,
    train,
)

from helpers import random_conversation, tiny_config


def test_train_config_defaults_and_validation():
    t = TrainConfig()
    assert (t.epochs, t.batch_size, t.lr, t.beta1, t.beta2, t.eps, t.shuffle) == (
        100, 8, 1e-3, 0.9, 0.999, 1e-8, True)
    for bad in (dict(epochs=0), dict(batch_size=0), dict(lr=0.0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


# -- loss ----------------------------------------------------------------------

def test_bce_half():
    assert bce_batch_loss([0.5], [1]) == pytest.approx(math.log(2), abs=1e-15)


def test_bce_confident_correct():
    assert bce_batch_loss([1 - 1e-7], [1]) == pytest.approx(1e-7, rel=1e-6)


def test_bce_two_items():
    assert bce_batch_loss([0.9, 0.1], [1, 0]) == pytest.approx(-0.5 * (2 * math.log(0.9)), abs=1e-15)
    assert bce_batch_loss([0.9, 0.1], [1, 0]) == pytest.approx(0.10536, abs=1e-5)


def test_bce_clamps_extremes():
    assert math.isfinite(bce_batch_loss([0.0, 1.0], [1, 0]))
    assert bce_batch_loss([0.0], [1]) == pytest.approx(-math.log(1e-7))


def test_bce_length_mismatch():
    with pytest.raises(ShapeError):
        bce_batch_loss([0.5, 0.5], [1])
    with pytest.raises(ShapeError):
        bce_batch_grad([0.5], [1, 0])


def test_bce_gradient_formula_and_fd():
    p = np.array([0.3, 0.8, 0.55])
    t = np.array([1, 0, 1])
    g = bce_batch_grad(p, t)
    assert np.allclose(g, (p - t) / (p * (1 - p)) / 3, rtol=1e-14)
    num = numeric_gradient(lambda q: bce_batch_loss(q, t), p, eps=1e-7)
    assert relative_error(g, num) < 1e-6


# -- selection -----------------------------------------------------------------

@pytest.mark.parametrize("accs, best", [([0.5, 0.8, 0.7], 2), ([0.6, 0.6], 1), ([0.4], 1)])
def test_select_best(accs, best):
    h = TrainHistory(train_loss=[0.0] * len(accs), dev_acc=accs)
    assert select_best(h).epoch == best


def test_select_best_empty():
    with pytest.raises(EmptyHistory):
        select_best(TrainHistory())


def test_history_csv():
    h = TrainHistory(train_loss=[0.5, 0.25], dev_acc=[0.5, 1.0])
    assert h.to_csv() == "epoch,train_loss,dev_acc\n1,0.5,0.5\n2,0.25,1.0\n"


# -- accuracy ------------------------------------------------------------------

@pytest.mark.parametrize("preds, labels, acc", [
    ([0.9, 0.1], [1, 0], 1.0),
    ([0.9, 0.1], [0, 1], 0.0),
    ([0.5], [1], 0.0),
    ([0.5], [0], 1.0),
])
def test_accuracy_examples(preds, labels, acc):
    assert accuracy(preds, labels) == acc


def test_accuracy_empty():
    with pytest.raises(EmptyEvalSet):
        accuracy([], [])


# -- training loop -------------------------------------------------------------

def _corpus(n, seed, D=3, label=None):
    rng = np.random.default_rng(seed)
    return [random_conversation(rng, int(rng.integers(2, 9)), D,
                                label=(i % 2 if label is None else label), conv_id=f"c{i}")
            for i in range(n)]


def test_one_epoch_decreases_loss():
    cfg = tiny_config("aim")
    conv = _corpus(1, 0, label=1)
    init = init_model(cfg, derive_seeds(0, 2)[0])
    before = bce_batch_loss(predict(conv, init, cfg), [1])
    params, hist = train(conv, conv, cfg, TrainConfig(epochs=1, seed=0))
    after = bce_batch_loss(predict(conv, params, cfg), [1])
    assert after < before
    assert hist.train_loss[0] == pytest.approx(before, rel=1e-12)  # loss of the (only) batch before its step


def test_training_deterministic():
    cfg = tiny_config("aim_c", K=3)
    data = _corpus(13, 1)
    tc = TrainConfig(epochs=4, batch_size=4, seed=3)
    p1, h1 = train(data[:9], data[9:], cfg, tc)
    p2, h2 = train(data[:9], data[9:], cfg, tc)
    assert p1.equal(p2)
    assert h1.train_loss == h2.train_loss and h1.dev_acc == h2.dev_acc


def test_steps_per_epoch_and_partial_batch(monkeypatch):
    import empathy_aim.training as tr
    calls = []
    real = tr.adam_step

    def spy(*a, **k):
        calls.append(1)
        return real(*a, **k)

    monkeypatch.setattr(tr, "adam_step", spy)
    cfg = tiny_config("im")
    train(_corpus(11, 2), _corpus(2, 3), cfg, TrainConfig(epochs=3, batch_size=4))
    assert len(calls) == 3 * math.ceil(11 / 4)


def test_history_lengths_and_best_params():
    cfg = tiny_config("aim")
    data = _corpus(10, 4)
    params, hist = train(data[:7], data[7:], cfg, TrainConfig(epochs=5, batch_size=3))
    assert len(hist.train_loss) == len(hist.dev_acc) == 5
    best = hist.best_epoch
    assert hist.checkpoints[best].equal(params)
    assert accuracy(predict(data[7:], params, cfg), [c.label for c in data[7:]]) == max(hist.dev_acc)


def test_missing_label():
    cfg = tiny_config("aim")
    data = _corpus(4, 5)
    unlabeled = Conversation("u", ("C", "T"), np.zeros((2, 3)), None)
    with pytest.raises(MissingLabel):
        train(data + [unlabeled], data, cfg, TrainConfig(epochs=1))
    with pytest.raises(MissingLabel):
        train(data, [unlabeled], cfg, TrainConfig(epochs=1))


def test_separable_synthetic_reaches_high_dev_accuracy():
    corpus = generate(SynthConfig(n_conversations=48, feature_dim=8, influence_mode="none",
                                  signal_strength=1.0, bias_scale=1.5, seed=0))
    cfg = ModelConfig(variant="aim", D=8, H=8, P=4)
    convs = list(corpus)
    _, hist = train(convs[:32], convs[32:], cfg, TrainConfig(epochs=100, seed=0))
    assert max(hist.dev_acc) >= 0.9


def test_derive_seeds():
    assert derive_seeds(4, 3) == derive_seeds(4, 3)
    assert len(set(derive_seeds(4, 6))) == 6
