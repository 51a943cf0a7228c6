import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from noisenerf import autodiff as ad
from noisenerf.autodiff import AdamState, GradTape, ShapeError, Tensor, adam_step


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def central_diff(f, x, h=1e-3):
    """Finite-difference gradient of scalar f at float64 array x."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def grad_of(fn, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        out = fn(*leaves)
    grads = tape.backward(out)
    return out, [grads[t] for t in leaves]


# ---------------------------------------------------------------- forward ops


def test_matmul_identity_and_orthogonal_rows():
    eye = Tensor(np.eye(2))
    m = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal((eye @ m).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(ad.matmul([[1, 0]], [[0], [5]]).data, [[0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(ad.matmul(a, b).data, naive_matmul(a, b), atol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_elementwise_dispatch():
    x = Tensor([0.0, 1.0, -2.0])
    np.testing.assert_allclose(ad.elementwise("relu", x).data, [0, 1, 0])
    np.testing.assert_allclose(ad.elementwise("add", x, x).data, [0, 2, -4])
    np.testing.assert_allclose(ad.elementwise("square", x).data, [0, 1, 4])
    with pytest.raises(ValueError):
        ad.elementwise("mul", x)
    with pytest.raises(ValueError):
        ad.elementwise("tanh", x)


def test_mismatched_shapes_rejected():
    with pytest.raises(ShapeError):
        ad.add(np.ones(3), np.ones(4))


def test_scalar_broadcast():
    out = ad.mul(Tensor([1.0, 2.0]), 3.0)
    np.testing.assert_array_equal(out.data, [3, 6])


def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        Tensor([1.0, np.nan])


def test_mse_matches_loop():
    rng = np.random.default_rng(1)
    a, b = rng.random((5, 3)), rng.random((5, 3))
    ref = sum((a[i, j] - b[i, j]) ** 2 for i in range(5) for j in range(3)) / 15
    assert ad.mse(a, b).item() == pytest.approx(ref, rel=1e-6)


def test_exclusive_cumsum_near_huge_entry():
    # inclusive-minus-self would lose the small prefix next to 1e10
    x = Tensor([[0.1, 0.2, 1e10]])
    np.testing.assert_allclose(ad.exclusive_cumsum(x).data, [[0.0, 0.1, 0.3]], rtol=1e-6)


def test_forward_ops_are_pure():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 5))
    w, b = rng.normal(size=(5, 3)), rng.normal(size=3)
    first = ad.sigmoid(ad.linear(x, w, b)).data
    second = ad.sigmoid(ad.linear(x, w, b)).data
    assert first.tobytes() == second.tobytes()


# ---------------------------------------------------------------- gradients


def test_dsin_at_zero():
    _, (g,) = grad_of(lambda x: ad.sum(ad.sin(x)), np.zeros(1))
    assert g[0] == pytest.approx(1.0)


@pytest.mark.parametrize("kind", ["exp", "sin", "cos", "relu", "sigmoid", "softplus",
                                  "squareplus", "square", "neg"])
def test_unary_gradients_match_central_differences(kind):
    rng = np.random.default_rng(3)
    for _ in range(100 // 9 + 1):
        x = rng.uniform(-2, 2, size=4)
        x = x[np.abs(x) > 1e-2]  # keep relu away from its kink
        fn = getattr(ad, kind)
        _, (g,) = grad_of(lambda t: ad.sum(fn(t)), x)
        ref = central_diff(lambda v: fn(Tensor(v)).data.astype(np.float64).sum(), x.astype(np.float64))
        np.testing.assert_allclose(g, ref, rtol=1e-2, atol=1e-3)


def _mlp_loss(x, w1, b1, w2, b2, y):
    h = ad.relu(ad.linear(x, w1, b1))
    return ad.mse(ad.linear(h, w2, b2), y)


def test_two_layer_mlp_gradient_float64_oracle():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    w1, b1 = rng.normal(size=(3, 5)), rng.normal(size=5)
    w2, b2 = rng.normal(size=(5, 2)), rng.normal(size=2)
    _, grads = grad_of(lambda *p: _mlp_loss(Tensor(x), *p, Tensor(y)), w1, b1, w2, b2)

    def f64(w1_, b1_, w2_, b2_):
        h = np.maximum(x @ w1_ + b1_, 0)
        return np.mean((h @ w2_ + b2_ - y) ** 2)

    params = [w1, b1, w2, b2]
    for k, g in enumerate(grads):
        def f(v, k=k):
            p = [q.astype(np.float64) for q in params]
            p[k] = v
            return f64(*p)
        ref = central_diff(f, params[k].astype(np.float64), h=1e-4)
        np.testing.assert_allclose(g, ref, rtol=1e-4, atol=1e-5)


def test_take_accumulates_repeated_indices():
    _, (g,) = grad_of(lambda x: ad.sum(ad.take(x, [0, 0, 2])), np.arange(3.0))
    np.testing.assert_array_equal(g, [2, 0, 1])


def test_concat_reshape_weighted_sum_gradients():
    rng = np.random.default_rng(5)
    w, v = rng.random((2, 4)), rng.random((2, 4, 3))

    def f(w_, v_):
        flat = ad.reshape(ad.weighted_sum(w_, v_), (6,))
        return ad.sum(ad.square(ad.concat([flat, flat], axis=0)))

    _, (gw, gv) = grad_of(f, w, v)
    fw = lambda a: 2 * np.sum(np.einsum("rn,rnc->rc", a, v) ** 2)  # noqa: E731
    fv = lambda a: 2 * np.sum(np.einsum("rn,rnc->rc", w, a) ** 2)  # noqa: E731
    np.testing.assert_allclose(gw, central_diff(fw, w), rtol=1e-3, atol=1e-4)
    np.testing.assert_allclose(gv, central_diff(fv, v), rtol=1e-3, atol=1e-4)


def test_exclusive_cumsum_gradient():
    rng = np.random.default_rng(6)
    x, c = rng.random((3, 5)), rng.random((3, 5))
    _, (g,) = grad_of(lambda t: ad.sum(ad.mul(ad.exclusive_cumsum(t), Tensor(c))), x)
    ref = central_diff(lambda a: np.sum((np.cumsum(a, -1) - a) * c), x)
    np.testing.assert_allclose(g, ref, rtol=1e-3, atol=1e-4)


def test_backward_is_linear_over_subgraphs():
    rng = np.random.default_rng(7)
    x = rng.normal(size=5)
    f1 = lambda t: ad.sum(ad.sin(t))  # noqa: E731
    f2 = lambda t: ad.sum(ad.square(t))  # noqa: E731
    _, (g1,) = grad_of(f1, x)
    _, (g2,) = grad_of(f2, x)
    _, (g12,) = grad_of(lambda t: ad.add(f1(t), f2(t)), x)
    np.testing.assert_allclose(g12, g1 + g2, rtol=1e-6)


def test_backward_gives_zeros_to_unreached_leaves():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0], requires_grad=True)
    with GradTape() as tape:
        loss = ad.sum(ad.square(a))
        ad.exp(b)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[a], [2, 4])
    np.testing.assert_array_equal(grads[b], [0])


def test_backward_requires_scalar_root():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        out = ad.square(a)
    with pytest.raises(ShapeError):
        tape.backward(out)


def test_no_recording_outside_tape():
    a = Tensor([1.0], requires_grad=True)
    out = ad.square(a)
    assert not out.requires_grad


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_is_identity():
    p = Tensor(np.arange(4.0))
    out = adam_step(p, np.zeros(4), AdamState.zeros_like(p), lr=0.1)
    np.testing.assert_array_equal(out.data, p.data)


@given(st.floats(-100, 100).filter(lambda g: abs(g) > 1e-3), st.floats(1e-4, 1.0))
def test_adam_first_step_magnitude_is_lr(g, lr):
    p = Tensor([0.5])
    out = adam_step(p, [g], AdamState.zeros_like(p), lr=lr)
    step = abs(out.data[0] - 0.5)
    assert 0.99 * lr <= step <= lr * (1 + 1e-5) + 1e-7


def test_adam_moves_monotonically_under_constant_gradient():
    p = Tensor([0.0])
    s = AdamState.zeros_like(p)
    p1 = adam_step(p, [1.0], s, 0.1)
    p2 = adam_step(p1, [1.0], s, 0.1)
    assert p.data[0] > p1.data[0] > p2.data[0]
    assert s.step_count == 2


def test_adam_errors():
    p = Tensor([0.0, 1.0])
    with pytest.raises(ValueError):
        adam_step(p, [1.0, 1.0], AdamState.zeros_like(p), 0.0)
    with pytest.raises(ShapeError):
        adam_step(p, [1.0], AdamState.zeros_like(p), 0.1)


def test_adam_row_sparse_leaves_other_rows():
    p = Tensor(np.ones((4, 2)))
    s = AdamState.zeros_like(p)
    out = adam_step(p, np.ones((4, 2)), s, 0.1, rows=[1, 3])
    np.testing.assert_array_equal(out.data[[0, 2]], 1.0)
    assert np.all(out.data[[1, 3]] < 1.0)
    np.testing.assert_array_equal(s.first_moment[[0, 2]], 0.0)


@settings(max_examples=50)
@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
def test_matmul_property_against_loop(a):
    b = np.linspace(-1, 1, 8).reshape(4, 2)
    np.testing.assert_allclose(ad.matmul(a, b).data, naive_matmul(a, b), rtol=1e-5, atol=1e-4)
