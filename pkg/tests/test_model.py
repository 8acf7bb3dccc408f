import math

import numpy as np
import pytest

from reference import random_example, tiny_model, tiny_vocab
from onestop.data import EOS, Example, make_batch
from onestop.model import LossBreakdown, joint_log_score, joint_objective
from onestop.numcore import Tensor, precision
from onestop.transformer import EncoderOutput


def test_joint_objective_examples():
    assert joint_objective(2.0, 1.0, 1.0, 0.2) == pytest.approx(2.0, abs=1e-12)
    assert joint_objective(3.0, 1.5, 0.25, 1.0) == 3.0
    assert joint_objective(3.0, 1.5, 0.25, 0.0) == 1.75
    with pytest.raises(ValueError):
        joint_objective(1.0, 1.0, 1.0, 1.5)


def test_forward_train_lambda_extremes():
    rng = np.random.default_rng(0)
    model = tiny_model()
    ex = random_example(rng)
    lb1, _, _ = model.forward_train(ex, 1.0)
    lb0, _, _ = model.forward_train(ex, 0.0)
    assert lb1.phi_total == lb1.phi_lm
    assert lb0.phi_total == lb0.phi_start + lb0.phi_end
    assert lb1.phi_lm == lb0.phi_lm  # the LM loss is computed either way


def test_loss_breakdown_json_keys():
    lb = LossBreakdown(1.0, 2.0, 3.0, 4.0, 0.2)
    assert lb.to_json(7) == {"step": 7, "phi_lm": 1.0, "phi_start": 2.0, "phi_end": 3.0, "phi_total": 4.0, "lambda": 0.2}


def test_span_distributions_normalise_over_ragged_batch():
    rng = np.random.default_rng(1)
    model = tiny_model()
    batch = make_batch([random_example(rng, idx=i) for i in range(6)], model.vocab)
    _, spans, logits = model.forward_train(batch, 0.2)
    mask = batch.doc_mask
    np.testing.assert_allclose(spans.p_start.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(spans.p_end.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(spans.p_start[~mask] == 0) and np.all(spans.p_end[~mask] == 0)
    assert logits.shape == (*batch.dec_in.shape, len(model.vocab))


def test_start_and_end_heads_are_distinct():
    model = tiny_model()
    assert model.w_start is not model.w_end
    assert not np.array_equal(model.w_start.data, model.w_end.data)


def _one_hot_encoder(n=4, m=16):
    states = np.zeros((1, n, m))
    states[0, np.arange(n), np.arange(n)] = 1.0
    return EncoderOutput(Tensor(states), np.ones((1, n), dtype=bool))


def test_span_head_one_hot_case():
    with precision(np.float64):
        model = tiny_model(dtype=np.float64)
        m = model.cfg.d_model
        model.w_start.data = 5.0 * np.eye(m)
        enc = _one_hot_encoder(4, m)
        for k in range(4):
            q = np.zeros(m)
            q[k] = 1.0
            spans = model.span_logits(enc, Tensor(q))
            # scores are 5 at k and 0 elsewhere
            expected = np.full(4, 1.0) / (3 + math.exp(5))
            expected[k] = math.exp(5) / (3 + math.exp(5))
            np.testing.assert_allclose(spans.p_start[0], expected, atol=1e-12)
            assert int(np.argmax(spans.p_start[0])) == k


def test_zero_start_head_gives_uniform_distribution():
    model = tiny_model(dtype=np.float64)
    model.w_start.data = np.zeros_like(model.w_start.data)
    enc = model.encode(np.array([[5, 6, 7, 8, 0, 0]]), np.array([[1, 1, 1, 1, 0, 0]], bool))
    spans = model.span_logits(enc, Tensor(np.random.default_rng(0).standard_normal(model.cfg.d_model)))
    np.testing.assert_allclose(spans.p_start[0], [0.25] * 4 + [0, 0], atol=1e-12)


def test_scaling_q_eos_keeps_normalisation():
    model = tiny_model()
    enc = model.encode(np.array([[5, 6, 7, 8, 9]]))
    q = np.random.default_rng(1).standard_normal(model.cfg.d_model)
    a = model.span_logits(enc, Tensor(q)).p_start
    for c in (0.1, 3.0, 20.0):
        b = model.span_logits(enc, Tensor(c * q)).p_start
        assert b.sum() == pytest.approx(1.0, abs=1e-6)
    assert not np.allclose(a, b)


def test_span_head_rejects_all_pad():
    model = tiny_model()
    enc = EncoderOutput(Tensor(np.zeros((1, 3, model.cfg.d_model))), np.zeros((1, 3), dtype=bool))
    with pytest.raises(ValueError):
        model.span_logits(enc, Tensor(np.zeros(model.cfg.d_model)))


def test_joint_log_score_examples():
    assert joint_log_score([0.0, 0.0], 1.0, 1.0) == 0.0
    assert joint_log_score([math.log(0.5)] * 2, 0.5, 0.5) == pytest.approx(4 * math.log(0.5), abs=1e-5)
    assert joint_log_score([math.log(0.5)] * 2, 0.5, 0.5) == pytest.approx(-2.7726, abs=1e-4)
    assert joint_log_score([-1.0], 0.0, 0.5) == -math.inf


def test_joint_log_score_is_monotone():
    rng = np.random.default_rng(2)
    for _ in range(50):
        lps = np.log(rng.uniform(0.05, 0.95, size=3))
        ps, pe = rng.uniform(0.05, 0.95, size=2)
        base = joint_log_score(lps, ps, pe)
        assert joint_log_score(lps, min(1.0, ps * 1.05), pe) > base
        assert joint_log_score(lps, ps, min(1.0, pe * 1.05)) > base
        up = lps.copy()
        up[int(rng.integers(3))] += 0.01
        assert joint_log_score(up, ps, pe) > base


def test_forward_train_rejects_bad_span():
    model = tiny_model()
    ex = Example(["w1", "w2"], ["w3"], 0, 1)
    batch = make_batch([ex], model.vocab)
    batch.ends[0] = 5
    with pytest.raises(ValueError):
        model.forward_train(batch, 0.2)


def _grads(model, ex, lam):
    model.zero_grad()
    lb, _, _ = model.forward_train(ex, lam)
    lb.objective.backward()
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in model.parameters().items()}


def test_gradient_is_linear_in_lambda():
    rng = np.random.default_rng(3)
    model = tiny_model(dtype=np.float64)
    ex = random_example(rng)
    g1, g0, gh = (_grads(model, ex, lam) for lam in (1.0, 0.0, 0.5))
    for k in g1:
        np.testing.assert_allclose(gh[k], 0.5 * g1[k] + 0.5 * g0[k], atol=1e-5)
    # an encoder weight hears from both loss groups
    key = "encoder.layers.0.attn.w_q"
    assert np.abs(g1[key]).max() > 1e-8 and np.abs(g0[key]).max() > 1e-8
    assert not np.allclose(g1[key], g0[key])


def test_q_eos_depends_on_the_whole_question():
    model = tiny_model(dtype=np.float64)
    vocab = model.vocab
    doc = vocab.encode(["w5", "w6", "w7", "w8"])
    q = vocab.encode(["w10", "w11", "w12"])
    _, full = model.question_representation(doc, q + [EOS])
    _, cut = model.question_representation(doc, q[:2] + [EOS])
    _, changed = model.question_representation(doc, [vocab.stoi["w20"]] + q[1:] + [EOS])
    assert not np.allclose(full.data, cut.data)
    assert not np.allclose(full.data, changed.data)


def test_q_eos_in_training_matches_forced_decoding():
    """The training pass reads q_eos at the position whose target is <eos>."""
    model = tiny_model(dtype=np.float64)
    ex = Example(["w5", "w6", "w7"], ["w9", "w10"], 1, 2)
    w_end = model.w_end.data.copy()
    _, spans, _ = model.forward_train(ex, 0.2)
    enc, q_eos = model.question_representation(model.vocab.encode(ex.document), model.vocab.encode(ex.question) + [EOS])
    again = model.span_logits(enc, q_eos)
    np.testing.assert_allclose(spans.p_start, again.p_start, atol=1e-12)
    np.testing.assert_array_equal(model.w_end.data, w_end)


def test_state_dict_round_trip():
    a, b = tiny_model(seed=0), tiny_model(seed=1)
    b.load_state_dict(a.state_dict())
    for k, p in a.parameters().items():
        np.testing.assert_array_equal(p.data, b.parameters()[k].data)
    with pytest.raises(KeyError):
        b.load_state_dict({"nope": np.zeros(1)})


def test_tied_embedding_registered_once():
    names = list(tiny_model().parameters())
    assert names.count("embed") == 1
    assert not any(n.endswith("_embed") for n in names)
    assert len(names) == len(set(names))
    assert len(tiny_vocab()) == 45
