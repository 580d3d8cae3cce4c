import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbngranger import kernels
from tbngranger.diffkit import autodiff as ad
from tbngranger.diffkit import checkpoint, matrix_inverse_solve
from tbngranger.diffkit.gradcheck import check_gradients
from tbngranger.diffkit.nn import Mlp2, ParamStore, adam_step, sgd_step, value_and_grad

TOL = 1e-4


def leaf(v, name):
    return ad.Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=name)


def assert_grads(fn, leaves):
    errs = check_gradients(fn, leaves)
    assert max(errs.values()) <= TOL, errs


def test_identity_gradient():
    x = leaf([1.5, -2.0, 0.3], "x")
    ad.backward(ad.sum_(ad.identity(x)))
    np.testing.assert_array_equal(x.grad, 1.0)


def test_linear_form_gradient():
    W = leaf(np.random.default_rng(0).normal(size=(3, 4)), "W")
    v = np.array([1.0, 2.0, -1.0, 0.5])
    ad.backward(ad.sum_(ad.linear(W, v[:, None])))
    np.testing.assert_array_equal(W.grad, np.outer(np.ones(3), v))


def test_mlp2_gradients():
    rng = np.random.default_rng(1)
    store = ParamStore()
    mlp = Mlp2.create(store, "m.", 3, 3, 3, rng)
    x = rng.normal(size=(5, 3))
    assert_grads(lambda: ad.sum_(mlp(x)), list(store.params.values()))


def test_accumulation_over_reuse():
    x = leaf([2.0, 3.0], "x")
    ad.backward(ad.sum_(ad.add(ad.mul(x, x), x)))
    np.testing.assert_array_equal(x.grad, [5.0, 7.0])


def test_accumulation_order_independent():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(4,))
    terms = [lambda x: ad.sum_(ad.square(x)), lambda x: ad.sum_(ad.tanh(x)), lambda x: ad.sum_(ad.exp(x))]
    grads = []
    for order in ([0, 1, 2], [2, 0, 1], [1, 2, 0]):
        x = leaf(v, "x")
        total = terms[order[0]](x)
        for k in order[1:]:
            total = ad.add(total, terms[k](x))
        ad.backward(total)
        grads.append(x.grad)
    for g in grads[1:]:
        np.testing.assert_allclose(g, grads[0], rtol=1e-14, atol=1e-14)


def test_shape_errors_at_build_time():
    with pytest.raises(ad.ShapeError):
        ad.add(leaf(np.zeros(3), "a"), leaf(np.zeros(4), "b"))
    with pytest.raises(ad.ShapeError):
        ad.linear(leaf(np.zeros((2, 3)), "x"), leaf(np.zeros((4, 2)), "W"))
    with pytest.raises(ad.ShapeError):
        ad.solve(np.eye(3), np.zeros((4, 1)))


UNARY = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "exp": ad.exp,
    "square": ad.square,
    "neg": ad.neg,
    "scale": lambda a: ad.scale(a, 1.7),
    "shift": lambda a: ad.shift(a, -0.3),
    "softmax_last": ad.softmax_last,
    "sum_last": ad.sum_last,
    "mean": ad.mean,
    "transpose": ad.transpose,
    "reshape": lambda a: ad.reshape(a, (-1,)),
    "take": lambda a: ad.take(a, np.array([0, 0, 1])),
    "select": lambda a: ad.select(a, (slice(None), slice(0, 1))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=8, deadline=None)
@given(rows=st.integers(2, 4), cols=st.integers(2, 4), seed=st.integers(0, 2**31 - 1))
def test_unary_gradcheck(name, rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(rows, cols)), "x")
    w = rng.normal(size=UNARY[name](ad.Tensor(x.value)).shape)
    assert_grads(lambda: ad.sum_(ad.mul_const(UNARY[name](x), w)), [x])


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_relu_abs_gradcheck_away_from_kink(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(3, 3))
    v[np.abs(v) < 1e-2] = 0.5
    x = leaf(v, "x")
    assert_grads(lambda: ad.sum_(ad.add(ad.relu(x), ad.abs_(x))), [x])


@settings(max_examples=10, deadline=None)
@given(n=st.integers(1, 4), k=st.integers(1, 4), m=st.integers(1, 4), seed=st.integers(0, 2**31 - 1))
def test_binary_gradcheck(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.normal(size=(n, k)), "a")
    b = leaf(rng.normal(size=(n, k)), "b")
    W = leaf(rng.normal(size=(k, m)), "W")
    bias = leaf(rng.normal(size=(m,)), "bias")
    B3 = leaf(rng.normal(size=(2, k, m)), "B3")
    A3 = leaf(rng.normal(size=(2, n, k)), "A3")

    def f():
        s = ad.sum_(ad.mul(ad.sub(a, b), ad.add(a, b)))
        s = ad.add(s, ad.sum_(ad.square(ad.add_bias(ad.linear(a, W), bias))))
        s = ad.add(s, ad.sum_(ad.tanh(ad.bmm(A3, B3))))
        s = ad.add(s, ad.sum_(ad.square(ad.concat([a, b], axis=-1))))
        return ad.add(s, ad.sum_(ad.sigmoid(ad.stack([a, b]))))

    assert_grads(f, [a, b, W, bias, A3, B3])


def test_row_normalize_gradcheck():
    rng = np.random.default_rng(3)
    A = leaf(rng.uniform(0.1, 1.0, size=(2, 3, 3)), "A")
    w = rng.normal(size=(2, 3, 3))
    assert_grads(lambda: ad.sum_(ad.mul_const(ad.row_normalize(A), w)), [A])


@settings(max_examples=10, deadline=None)
@given(n=st.integers(2, 4), seed=st.integers(0, 2**31 - 1))
def test_acyclicity_gradcheck(n, seed):
    rng = np.random.default_rng(seed)
    A = leaf(rng.normal(0, 0.4, size=(2, n, n)), "A")
    assert_grads(lambda: ad.sum_(ad.acyclicity(A)), [A])


def test_solve_identity():
    B = np.random.default_rng(4).normal(size=(3, 2))
    np.testing.assert_array_equal(matrix_inverse_solve(np.eye(3), B).value, B)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 2**31 - 1))
def test_solve_neumann_oracle(n, seed):
    rng = np.random.default_rng(seed)
    A = np.triu(rng.normal(size=(n, n)), 1)
    B = rng.normal(size=(n, 3))
    X = matrix_inverse_solve(np.eye(n) - A.T, B).value
    ref, term = np.zeros_like(B), B.copy()
    for _ in range(n):
        ref += term
        term = A.T @ term
    np.testing.assert_allclose(X, ref, rtol=1e-10, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 2**31 - 1))
def test_solve_residual(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n)) + n * np.eye(n)
    B = rng.normal(size=(n, 2))
    X = matrix_inverse_solve(M, B).value
    assert np.abs(M @ X - B).max() <= 1e-8 * np.abs(B).max()


def test_solve_gradcheck():
    rng = np.random.default_rng(5)
    M = leaf(rng.normal(size=(2, 3, 3)) + 3 * np.eye(3), "M")
    B = leaf(rng.normal(size=(2, 3, 2)), "B")
    assert_grads(lambda: ad.sum_(ad.square(ad.solve(M, B))), [M, B])


def test_solve_singular_reports_condition():
    with pytest.raises(ad.SingularMatrixError) as e:
        matrix_inverse_solve(np.ones((3, 3)), np.ones((3, 1)))
    assert e.value.condition > 1e12
    with pytest.raises(ad.SingularMatrixError) as e:
        matrix_inverse_solve(np.diag([1.0, 1e-14]), np.ones((2, 1)))
    assert np.isfinite(e.value.condition) and e.value.condition > 1e12


def _quadratic_store(w0):
    store = ParamStore()
    store.add("w", w0)
    return store, lambda: ad.sum_(ad.square(store["w"]))


def test_adam_zero_gradient_only_decays_moments():
    store, _ = _quadratic_store(np.array([1.0, -2.0]))
    store["w"].grad = np.ones(2)
    adam_step(store, lr=0.1)
    before = store["w"].value.copy()
    m_before = store.m["w"].copy()
    store["w"].grad = np.zeros(2)
    adam_step(store, lr=0.1)
    np.testing.assert_allclose(store.m["w"], 0.9 * m_before)
    # the decayed first moment still moves w; with no history w stays put
    fresh, _ = _quadratic_store(np.array([1.0, -2.0]))
    fresh["w"].grad = np.zeros(2)
    adam_step(fresh, lr=0.1)
    np.testing.assert_array_equal(fresh["w"].value, [1.0, -2.0])
    assert not np.array_equal(before, store["w"].value)


def test_adam_constant_gradient_descends():
    store, _ = _quadratic_store(np.zeros(3))
    g = np.array([1.0, -2.0, 0.5])
    for _ in range(20):
        store["w"].grad = g.copy()
        adam_step(store, lr=0.01)
    assert np.all(np.sign(store["w"].value) == -np.sign(g))


def test_adam_quadratic_bowl_converges():
    store, f = _quadratic_store(np.random.default_rng(6).normal(size=5))
    for _ in range(2000):
        value_and_grad(f, store)
        adam_step(store, lr=1e-2)
    assert np.linalg.norm(store["w"].value) < 1e-3


def test_adam_skips_nan_slot():
    store, _ = _quadratic_store(np.ones(2))
    store["w"].grad = np.array([np.nan, 1.0])
    assert adam_step(store, lr=0.1) == ["w"]
    np.testing.assert_array_equal(store["w"].value, 1.0)


def test_adam_deterministic():
    def run():
        store, f = _quadratic_store(np.arange(4.0))
        for _ in range(50):
            value_and_grad(f, store)
            adam_step(store, lr=0.05)
        return store["w"].value.tobytes()
    assert run() == run()


def test_sgd_step():
    store, f = _quadratic_store(np.array([1.0, -1.0]))
    value_and_grad(f, store)
    sgd_step(store, lr=0.25)
    np.testing.assert_allclose(store["w"].value, [0.5, -0.5])


def test_checkpoint_roundtrip_and_errors(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.5])}
    checkpoint.save(arrays, tmp_path / "c.ckpt")
    back = checkpoint.load(tmp_path / "c.ckpt")
    assert list(back) == ["a", "b"]
    np.testing.assert_array_equal(back["a"], arrays["a"])
    blob = checkpoint.dumps(arrays)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"nope" + blob[4:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:-3])


@pytest.mark.skipif(kernels.c is None, reason="compiled kernels not built")
@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 8), b=st.integers(1, 3), seed=st.integers(0, 2**31 - 1))
def test_acyclicity_backends_agree(n, b, seed):
    A = np.random.default_rng(seed).normal(0, 0.5, size=(b, n, n))
    a1, g1 = kernels.py.acyclicity_batch(A, 10.0)
    a2, g2 = kernels.c.acyclicity_batch(A, 10.0)
    np.testing.assert_allclose(a1, a2, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-10)
