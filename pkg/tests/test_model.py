import numpy as np
import pytest

from empathy_aim.data import Conversation
from empathy_aim.errors import ConfigError, EmptyConversation, EmptyWindow, ShapeError, TraceMismatch
from empathy_aim.model import (
    ModelConfig,
    Variant,
    attend,
    backward_conversation,
    encode,
    forward_conversation,
    influence_window,
    init_model,
    median_fuse,
    predict,
    refine,
    turn_probability,
)
from empathy_aim.nn import ModelParams, finite_diff_check, gru_cell_forward

import oracle
from helpers import VARIANTS, conversation_loss_and_grad, random_conversation, tiny_config, tiny_instance

SIX = ("C", "T", "C", "T", "C", "T")


def zero_params(cfg):
    return init_model(cfg, 0).zeros_like()


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(variant="bogus")
    with pytest.raises(ConfigError):
        ModelConfig(lam=1.5)
    with pytest.raises(ConfigError):
        ModelConfig(K=0)
    ModelConfig(variant="im", K=0)  # no window needed
    assert ModelConfig().out_width == 64 and ModelConfig(variant="aim_concat").out_width == 128


def test_reference_defaults():
    cfg = ModelConfig()
    assert (cfg.variant, cfg.D, cfg.H, cfg.P, cfg.K, cfg.lam) == (Variant.AIM, 88, 64, 32, 3, 0.2)


# -- encode --------------------------------------------------------------------

def test_encode_zero_params():
    cfg = tiny_config("aim")
    conv = random_conversation(np.random.default_rng(0), 6, 3)
    assert not encode(conv, zero_params(cfg)).any()


def test_encode_single_turn():
    cfg = tiny_config("aim")
    params = init_model(cfg, 3)
    conv = Conversation("a", ("T",), np.array([[0.3, -1.0, 2.0]]), 1)
    h, _ = gru_cell_forward(conv.features[0], np.zeros(2), params.gru)
    assert np.array_equal(encode(conv, params)[0], h)


def test_encode_matches_chained_cells():
    cfg = tiny_config("aim")
    params = init_model(cfg, 9)
    conv = random_conversation(np.random.default_rng(9), 4, 3)
    h = np.zeros(2)
    expected = []
    for x in conv.features:
        h, _ = gru_cell_forward(x, h, params.gru)
        expected.append(h)
    assert np.array_equal(encode(conv, params), np.array(expected))


def test_encode_dim_mismatch():
    params = init_model(tiny_config("aim"), 0)
    with pytest.raises(ShapeError):
        encode(random_conversation(np.random.default_rng(0), 3, 4), params)


# -- windows -------------------------------------------------------------------

def test_window_aim_worked_example():
    assert influence_window(6, ModelConfig(K=3), SIX) == [3, 4, 5]


def test_window_aim_c_recent_turns():
    assert influence_window(6, ModelConfig(variant="aim_c", K=3), SIX) == [1, 3, 5]


def test_window_aim_t_first_therapist_turn_empty():
    assert influence_window(2, ModelConfig(variant="aim_t", K=3), SIX) == []


def test_window_subset_mode():
    cfg = ModelConfig(variant="aim_c", K=3, window_mode="subset")
    assert influence_window(6, cfg, SIX) == [3, 5]


def test_window_im_empty_and_boundary():
    assert influence_window(6, ModelConfig(variant="im"), SIX) == []
    assert influence_window(2, ModelConfig(K=3), SIX) == [1]


# -- attend / refine / output --------------------------------------------------

def test_attend_identical_states():
    params = init_model(tiny_config("aim", H=3, P=2), 1)
    h = np.tile([0.1, -0.4, 0.7], (4, 1))
    alpha, v = attend(4, [1, 2, 3], h, params)
    assert np.allclose(alpha, 1 / 3, atol=1e-15)
    assert np.allclose(v, h[0], atol=1e-15)


def test_attend_single_turn():
    params = init_model(tiny_config("aim"), 1)
    h = np.random.default_rng(0).normal(size=(3, 2))
    alpha, v = attend(3, [2], h, params)
    assert alpha.tolist() == [1.0] and np.array_equal(v, h[1])


def test_attend_empty_window():
    params = init_model(tiny_config("aim"), 1)
    with pytest.raises(EmptyWindow):
        attend(1, [], np.zeros((1, 2)), params)


def test_attend_matches_transcription():
    cfg = tiny_config("aim", K=3)
    params = init_model(cfg, 4)
    conv = random_conversation(np.random.default_rng(4), 6, 3, first="C")
    h = encode(conv, params)
    alpha, v = attend(6, [3, 4, 5], h, params)
    _, _, alphas = oracle.forward(["C", "T"] * 3, conv.features.tolist(),
                                  oracle.params_as_lists(params.arrays()), "aim", 3, 0.2)
    assert np.allclose(alpha, alphas[-1], rtol=0, atol=1e-12)


def test_refine_scale_identities():
    h, v = np.array([0.3, -0.2]), np.array([0.9, 0.5])
    assert np.array_equal(refine(h, v, ModelConfig(lam=0.0)), h)
    assert np.array_equal(refine(h, v, ModelConfig(lam=1.0)), v)
    assert np.allclose(refine(np.array([1.0, 0.0]), np.array([0.0, 1.0]), ModelConfig(lam=0.2)), [0.8, 0.2])


def test_refine_variants_and_empty_window():
    h, v = np.array([0.3, -0.2]), np.array([0.9, 0.5])
    assert np.array_equal(refine(h, v, ModelConfig(variant="im")), h)
    assert refine(h, v, ModelConfig(variant="aim_concat")).tolist() == [0.3, -0.2, 0.9, 0.5]
    assert np.allclose(refine(h, None, ModelConfig(lam=0.2)), 0.8 * h)
    assert refine(h, None, ModelConfig(variant="aim_concat")).tolist() == [0.3, -0.2, 0.0, 0.0]


def _head(W_o, b_o, H=2):
    p = init_model(tiny_config("aim", H=H), 0)
    return ModelParams(p.gru, p.W_x, np.array([W_o], dtype=float), np.array([b_o], dtype=float))


def test_turn_probability_examples():
    assert turn_probability(np.array([0.4, -3.0]), _head([0, 0], 0)) == 0.5
    y = turn_probability(np.zeros(2), _head([0, 0], 50.0))
    assert np.isfinite(y) and y == pytest.approx(1.0)
    assert turn_probability(np.array([0.8, 0.2]), _head([1, 1], -1.0)) == pytest.approx(0.5, abs=1e-15)
    assert turn_probability(np.zeros(2), _head([0, 0], -800.0)) >= 0.0


def test_turn_probability_shape():
    with pytest.raises(ShapeError):
        turn_probability(np.zeros(3), _head([0, 0], 0))


# -- median fusion -------------------------------------------------------------

@pytest.mark.parametrize("probs, expected", [
    ([0.2, 0.8, 0.4], 0.4),
    ([0.2, 0.4, 0.6, 0.8], 0.5),
    ([0.7], 0.7),
])
def test_median_examples(probs, expected):
    assert median_fuse(probs) == pytest.approx(expected, abs=1e-15)


def test_median_empty():
    with pytest.raises(EmptyConversation):
        median_fuse([])


# -- full forward --------------------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_params_give_half(variant):
    cfg = tiny_config(variant)
    conv = random_conversation(np.random.default_rng(2), 7, 3)
    y, trace = forward_conversation(conv, zero_params(cfg), cfg)
    assert y == 0.5 and np.all(trace.probs == 0.5)


def test_lambda_zero_equals_im():
    conv = random_conversation(np.random.default_rng(5), 9, 3)
    aim, im = tiny_config("aim", lam=0.0), tiny_config("im")
    params = init_model(aim, 5)
    assert forward_conversation(conv, params, aim)[0] == forward_conversation(conv, params, im)[0]


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_matches_transcription(variant):
    for seed in range(5):
        cfg = tiny_config(variant, K=3, lam=0.35)
        rng = np.random.default_rng(seed)
        conv = random_conversation(rng, int(rng.integers(1, 9)), 3)
        params = init_model(cfg, seed)
        y, trace = forward_conversation(conv, params, cfg)
        y_ref, probs_ref, alphas_ref = oracle.forward(
            [s.value for s in conv.speakers], conv.features.tolist(),
            oracle.params_as_lists(params.arrays()), variant, 3, 0.35)
        assert abs(y - y_ref) < 1e-12
        assert np.allclose(trace.probs, probs_ref, rtol=0, atol=1e-12)
        for a, a_ref in zip(trace.alphas, alphas_ref):
            assert np.allclose(a, a_ref, rtol=0, atol=1e-12) if a_ref else a.size == 0


def test_trace_contents():
    cfg = tiny_config("aim_c", K=2)
    conv = Conversation("a", SIX, np.random.default_rng(0).normal(size=(6, 3)), 1)
    y, trace = forward_conversation(conv, init_model(cfg, 0), cfg)
    assert trace.targets == [2, 4, 6]
    assert trace.windows == [[1], [1, 3], [3, 5]]
    assert y == median_fuse(trace.probs)
    recs = trace.records()
    assert recs[1]["turn"] == 4 and recs[1]["window"] == [1, 3]
    assert sum(recs[2]["alpha"]) == pytest.approx(1.0, abs=1e-12)


def test_predict_matches_single_conversation_path():
    cfg = tiny_config("aim", K=3)
    params = init_model(cfg, 1)
    rng = np.random.default_rng(1)
    convs = [random_conversation(rng, int(rng.integers(1, 12)), 3, conv_id=str(i)) for i in range(20)]
    batched = predict(convs, params, cfg, chunk=7)
    single = [forward_conversation(c, params, cfg)[0] for c in convs]
    assert np.allclose(batched, single, rtol=0, atol=1e-13)


# -- backward ------------------------------------------------------------------

def test_backward_zero_upstream():
    conv, cfg, params = tiny_instance("aim", 0)
    _, trace = forward_conversation(conv, params, cfg)
    grads = backward_conversation(trace, conv, params, cfg, 0.0)
    assert all(not g.any() for g in grads.arrays().values())


def test_backward_stale_trace():
    conv, cfg, params = tiny_instance("aim", 0)
    _, trace = forward_conversation(conv, params, cfg)
    other = params.copy()
    other.W_o[0, 0] += 1e-3
    with pytest.raises(TraceMismatch):
        backward_conversation(trace, conv, other, cfg, 1.0)


def test_odd_count_gradient_routes_through_median_turn():
    cfg = tiny_config("aim")
    rng = np.random.default_rng(12)
    conv = random_conversation(rng, 6, 3, first="T")  # therapist turns 1, 3, 5
    params = init_model(cfg, 12)
    y, trace = forward_conversation(conv, params, cfg)
    m = int(np.flatnonzero(trace.probs == y)[0])
    target = trace.targets[m]

    def median_turn_prob(arrays):
        _, tr = forward_conversation(conv, ModelParams.from_arrays(arrays), cfg)
        return float(tr.probs[tr.targets.index(target)])

    grads = backward_conversation(trace, conv, params, cfg, 1.0).arrays()
    from empathy_aim.nn import numeric_gradient, relative_error
    assert relative_error(grads, numeric_gradient(median_turn_prob, params.arrays())) < 1e-6


@pytest.mark.parametrize("variant", VARIANTS)
def test_full_model_gradient(variant):
    conv, cfg, params = tiny_instance(variant, 3)
    assert finite_diff_check(conversation_loss_and_grad(conv, cfg), params.arrays()) < 1e-4
