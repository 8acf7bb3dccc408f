import math

import numpy as np
import pytest

from gradcheck import max_grad_error
from onestop.numcore import (
    EmptyMaskError,
    OptimizerState,
    ShapeError,
    Tensor,
    adam_step,
    clip_grad_norm,
    concat,
    cross_entropy,
    embedding,
    get_default_dtype,
    layer_norm,
    load_checkpoint,
    log_softmax,
    no_grad,
    precision,
    save_checkpoint,
    softmax,
)

SEEDS = range(20)


def leaf(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def check(build, leaves, tol=1e-4):
    """Backward through ``build(*leaves)`` (reduced by a fixed random projection) against finite differences."""
    rng = np.random.default_rng(123)
    out = build(*leaves)
    proj = rng.standard_normal(out.shape)
    (out * Tensor(proj)).sum().backward()

    def f():
        with no_grad():
            return float(np.sum(build(*leaves).data * proj))

    err = max_grad_error(f, [t.data for t in leaves], [t.grad for t in leaves])
    assert err < tol, err


LS_MASK = np.array([[1, 0, 1, 1], [1, 1, 1, 0]], bool)

# (name, leaf factory, function); every entry runs across 20 seeds in float64
OPS = {
    "add_broadcast": (lambda r: [leaf(r, 3, 4), leaf(r, 4)], lambda a, b: a + b),
    "sub": (lambda r: [leaf(r, 2, 3), leaf(r, 2, 3)], lambda a, b: a - b),
    "rsub_scalar": (lambda r: [leaf(r, 5)], lambda a: 2.0 - a),
    "mul_broadcast": (lambda r: [leaf(r, 2, 3, 4), leaf(r, 3, 1)], lambda a, b: a * b),
    "div": (lambda r: [leaf(r, 3, 3), leaf(r, 3, 3, positive=True)], lambda a, b: a / b),
    "neg": (lambda r: [leaf(r, 4)], lambda a: -a),
    "exp": (lambda r: [leaf(r, 3, 2)], lambda a: a.exp()),
    "log": (lambda r: [leaf(r, 3, 2, positive=True)], lambda a: a.log()),
    "relu": (lambda r: [leaf(r, 4, 5)], lambda a: a.relu()),
    "sum_axis": (lambda r: [leaf(r, 3, 4, 2)], lambda a: a.sum(axis=1)),
    "mean_keepdims": (lambda r: [leaf(r, 3, 4)], lambda a: a.mean(axis=-1, keepdims=True)),
    "reshape_transpose": (lambda r: [leaf(r, 2, 3, 4)], lambda a: a.transpose(2, 0, 1).reshape(4, 6)),
    "swapaxes": (lambda r: [leaf(r, 2, 3, 4)], lambda a: a.swapaxes(-1, -2)),
    "getitem_fancy": (lambda r: [leaf(r, 5, 3)], lambda a: a[np.array([0, 2, 2, 4])]),
    "getitem_pairs": (lambda r: [leaf(r, 3, 4, 2)], lambda a: a[np.arange(3), np.array([1, 3, 1])]),
    "matmul": (lambda r: [leaf(r, 3, 4), leaf(r, 4, 2)], lambda a, b: a @ b),
    "matmul_batched": (lambda r: [leaf(r, 2, 3, 4), leaf(r, 4, 5)], lambda a, b: a @ b),
    "concat": (lambda r: [leaf(r, 2, 3), leaf(r, 2, 1)], lambda a, b: concat([a, b], axis=1)),
    "softmax": (lambda r: [leaf(r, 3, 5)], lambda a: softmax(a)),
    "softmax_masked": (lambda r: [leaf(r, 3, 5)], lambda a: softmax(a, np.array([1, 1, 0, 1, 0], bool))),
    # masked outputs sit near -1e9 where finite differences cancel catastrophically; compare kept ones
    "log_softmax_masked": (lambda r: [leaf(r, 2, 4)], lambda a: log_softmax(a, LS_MASK) * Tensor(LS_MASK)),
    "layer_norm": (lambda r: [leaf(r, 2, 8), leaf(r, 8), leaf(r, 8)], lambda x, g, b: layer_norm(x, g, b)),
    "embedding": (lambda r: [leaf(r, 6, 3)], lambda w: embedding(w, np.array([[0, 5], [5, 2]]))),
    "reciprocal": (lambda r: [leaf(r, 4, positive=True)], lambda a: a.reciprocal()),
    "cross_entropy_sum": (lambda r: [leaf(r, 4, 5)], lambda z: cross_entropy(z, np.array([0, 4, 2, 2]))),
    "cross_entropy_masked": (
        lambda r: [leaf(r, 2, 3, 5)],
        lambda z: cross_entropy(z, np.array([[1, 2, 0], [4, 0, 0]]), mask=np.array([[1, 1, 1], [1, 0, 0]], bool),
                                reduction="none"),
    ),
    "cross_entropy_mean": (lambda r: [leaf(r, 3, 4)], lambda z: cross_entropy(z, np.array([3, 1, 0]), reduction="mean")),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_match_finite_differences(name):
    make, fn = OPS[name]
    with precision(np.float64):
        for seed in SEEDS:
            check(fn, make(np.random.default_rng(seed)))


# -- matmul ---------------------------------------------------------------------------


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal((eye @ Tensor([[3.0], [4.0]])).data, [[3.0], [4.0]])
    np.testing.assert_array_equal((Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_sum_gradient_is_ones_times_b_transpose():
    rng = np.random.default_rng(7)
    with precision(np.float64):
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        (a @ b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)

        def f():
            return float((a.data @ b.data).sum())

        assert max_grad_error(f, [a.data], [a.grad]) < 1e-4


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 5)))


# -- softmax ---------------------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    big = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-12
    with precision(np.float64):
        x = np.array([1.0, 2.0, 3.0])
        oracle = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(softmax(Tensor(x)).data, oracle, atol=1e-12)
        np.testing.assert_allclose(oracle, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_rows_sum_to_one_and_masked_positions_are_zero():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((6, 9)) * 5)
    mask = rng.random((6, 9)) < 0.6
    mask[:, 0] = True
    p = softmax(x, mask).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(p[~mask] == 0.0) and np.all(p >= 0)


def test_softmax_fully_masked_row_raises():
    with pytest.raises(EmptyMaskError):
        softmax(Tensor(np.zeros((2, 3))), np.array([[True, False, False], [False, False, False]]))


# -- layer norm ------------------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-3)


def test_layer_norm_moments():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        out = layer_norm(Tensor(rng.standard_normal((10, 16)) * 3 + 2), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-6
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)


def test_layer_norm_gradient_2x8():
    rng = np.random.default_rng(2)
    with precision(np.float64):
        check(lambda x, g, b: layer_norm(x, g, b), [leaf(rng, 2, 8), leaf(rng, 8), leaf(rng, 8)])


# -- cross entropy ---------------------------------------------------------------------


def test_cross_entropy_examples():
    with precision(np.float64):
        assert cross_entropy(Tensor([[20.0, 0.0]]), np.array([0])).item() < 1e-6
        assert cross_entropy(Tensor(np.zeros((1, 4))), np.array([2])).item() == pytest.approx(math.log(4), abs=1e-5)


def test_cross_entropy_gradient_is_softmax_minus_one_hot():
    rng = np.random.default_rng(3)
    with precision(np.float64):
        z = leaf(rng, 3, 6)
        t = np.array([5, 0, 2])
        cross_entropy(z, t).backward()
        p = np.exp(z.data) / np.exp(z.data).sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(z.grad, p - np.eye(6)[t], atol=1e-12)


def test_cross_entropy_errors():
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((2, 1))), np.array([0, 0]))


# -- autodiff graph --------------------------------------------------------------------


def test_diamond_graph_accumulates_both_paths():
    with precision(np.float64):
        x = Tensor([2.0, -1.0], requires_grad=True)
        y = x * 3.0
        z = (y * y + y).sum()  # y used twice
        z.backward()
    # dz/dx = (2y + 1) * 3
    np.testing.assert_allclose(x.grad, (2 * 3 * np.array([2.0, -1.0]) + 1) * 3)


def test_same_leaf_used_twice_in_one_op():
    x = Tensor([3.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_every_reachable_leaf_gets_a_gradient():
    rng = np.random.default_rng(4)
    a, b, unused = leaf(rng, 3), leaf(rng, 3), leaf(rng, 3)
    c = Tensor(np.ones(3))  # constant
    ((a * b).relu() * 0.0 + a.sum() * c).sum().backward()
    assert a.grad is not None and b.grad is not None
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert unused.grad is None and c.grad is None


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_default_precision_and_switch():
    assert get_default_dtype() == np.float32
    assert Tensor([1, 2]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert get_default_dtype() == np.float32


# -- Adam ------------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params_unchanged():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.zeros(2, dtype=np.float32)
    state = OptimizerState(base_lr=0.1, warmup_ratio=0.0, total_steps=10)
    adam_step({"p": p}, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step_count == 1


def test_adam_first_step_by_hand():
    with precision(np.float64):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([0.5])
        state = OptimizerState(base_lr=0.1, warmup_ratio=0.0, total_steps=10, beta1=0.9, beta2=0.999, epsilon=1e-8)
        adam_step({"p": p}, state)
    m_hat = (0.1 * 0.5) / (1 - 0.9)
    v_hat = (0.001 * 0.25) / (1 - 0.999)
    expected = 1.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p.data[0] == pytest.approx(expected, abs=1e-12)
    assert p.data[0] == pytest.approx(0.9, abs=1e-4)


def test_warmup_schedule():
    state = OptimizerState(base_lr=1.0, warmup_ratio=0.05, total_steps=100)
    assert state.warmup_steps == 5
    assert state.lr_at(1) == pytest.approx(1.0 / 5)
    assert [state.lr_at(t) for t in range(5, 9)] == [1.0] * 4
    assert [state.lr_at(t) for t in range(1, 5)] == pytest.approx([0.2, 0.4, 0.6, 0.8])


def test_adam_uses_schedule():
    p = Tensor([0.0], requires_grad=True)
    state = OptimizerState(base_lr=1.0, warmup_ratio=0.05, total_steps=100)
    lrs = []
    for _ in range(6):
        p.grad = np.ones(1, dtype=np.float32)
        lrs.append(adam_step({"p": p}, state))
    assert lrs == pytest.approx([0.2, 0.4, 0.6, 0.8, 1.0, 1.0])


def test_clip_grad_norm():
    a = Tensor([0.0, 0.0], requires_grad=True)
    b = Tensor([0.0], requires_grad=True)
    a.grad = np.array([3.0, 0.0], dtype=np.float32)
    b.grad = np.array([4.0], dtype=np.float32)
    norm = clip_grad_norm({"a": a, "b": b}, 1.0)
    assert norm == pytest.approx(5.0)
    total = math.sqrt(float((a.grad**2).sum() + (b.grad**2).sum()))
    assert total == pytest.approx(1.0, rel=1e-5)


# -- checkpoint ------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    params = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(3, dtype=np.float32)}
    state = OptimizerState(base_lr=0.5, total_steps=3)
    ptensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    for t in ptensors.values():
        t.grad = np.ones_like(t.data)
    adam_step(ptensors, state)
    path = save_checkpoint(tmp_path / "c.npz", params, {"model_config": {"x": 1}}, state)
    loaded, meta, moments = load_checkpoint(path)
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])
        np.testing.assert_array_equal(moments["m"][k], state.first_moment[k])
    assert meta["model_config"] == {"x": 1}
    assert meta["optimizer"]["step_count"] == 1
    assert meta["format_version"] == 1
    assert [p.name for p in tmp_path.iterdir()] == ["c.npz"]  # no temp files left behind
