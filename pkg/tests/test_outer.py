import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbngranger import outer, synth
from tbngranger.diffkit import autodiff as ad
from tbngranger.diffkit.gradcheck import check_gradients
from tbngranger.outer import GrangerModel, OuterConfig


def leaf(v, name):
    return ad.Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=name)


def small_model(N_hidden=2, K=1, H_dim=1, seed=0, **kw):
    cfg = OuterConfig(K=K, L=kw.pop("L", 3), tau=kw.pop("tau", 1), hidden=N_hidden, seed=seed, **kw)
    return GrangerModel(H_dim, cfg)


def random_adj(rng, N):
    A = rng.random((N, N))
    np.fill_diagonal(A, 0.0)
    return A


def naive_transition(A):
    P = np.zeros_like(A)
    for i in range(A.shape[0]):
        d = A[i].sum()
        if d > 0:
            P[i] = A[i] / d
    return P


# --------------------------------------------------------------------------- diffusion


def test_diffusion_k0_is_scaled_identity():
    rng = np.random.default_rng(0)
    A, X = random_adj(rng, 4), rng.normal(size=(4, 3))
    t1, t2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    out = outer.diffusion_weights(A, X, [(t1, t2)], K=0).value
    np.testing.assert_allclose(out, X @ (t1 + t2), rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("K", [0, 1, 3])
def test_diffusion_empty_graph_keeps_only_zeroth_term(K):
    rng = np.random.default_rng(K)
    X = rng.normal(size=(5, 2))
    th = [(rng.normal(size=(2, 3)), rng.normal(size=(2, 3))) for _ in range(K + 1)]
    out = outer.diffusion_weights(np.zeros((5, 5)), X, th, K=K).value
    np.testing.assert_allclose(out, X @ (th[0][0] + th[0][1]), rtol=1e-13, atol=1e-13)


def test_diffusion_k2_matches_repeated_multiply():
    rng = np.random.default_rng(1)
    N, F, O = 6, 3, 2
    A = random_adj(rng, N)
    A[2] = 0.0  # zero out-degree row
    X = rng.normal(size=(N, F))
    th = [(rng.normal(size=(F, O)), rng.normal(size=(F, O))) for _ in range(3)]
    Pf, Pb = naive_transition(A), naive_transition(A.T)
    expected = np.zeros((N, O))
    mf = mb = np.eye(N)
    for k in range(3):
        expected += mf @ X @ th[k][0] + mb @ X @ th[k][1]
        mf, mb = mf @ Pf, mb @ Pb
    out = outer.diffusion_weights(A, X, th, K=2).value
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_diffusion_wrong_theta_count():
    with pytest.raises(ValueError):
        outer.diffusion_weights(np.zeros((2, 2)), np.zeros((2, 1)), [(np.zeros((1, 1)),) * 2], K=1)


def test_diffusion_gradcheck():
    rng = np.random.default_rng(2)
    A = leaf(random_adj(rng, 4) + 0.1, "A")
    X = leaf(rng.normal(size=(4, 3)), "X")
    th = [(leaf(rng.normal(size=(3, 2)), f"a{k}"), leaf(rng.normal(size=(3, 2)), f"b{k}")) for k in range(3)]
    b = leaf(rng.normal(size=2), "bias")
    leaves = [A, X, b] + [t for p in th for t in p]
    errs = check_gradients(lambda: ad.sum_(ad.square(outer.diffusion_weights(A, X, th, 2, b))), leaves)
    assert max(errs.values()) <= 1e-4, errs


# --------------------------------------------------------------------------- cell


def _set(model, name, value):
    p = model.store[name]
    p.value = np.broadcast_to(value, p.value.shape).astype(np.float64).copy()


def _zero_gate(model, cell, gate, bias):
    for k in range(model.K + 1):
        for d in (1, 2):
            _set(model, f"{cell}.{gate}.theta{k}_{d}", 0.0)
    _set(model, f"{cell}.{gate}.b", bias)


def test_gru_update_saturation_carries_state():
    rng = np.random.default_rng(3)
    m = small_model(N_hidden=3)
    _zero_gate(m, "enc", "U", 30.0)
    A, H, S = random_adj(rng, 4), rng.normal(size=(4, 1)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(outer.gru_cell(m, A, H, S).value, S, rtol=0, atol=1e-11)


def test_gru_update_closed_gives_candidate():
    rng = np.random.default_rng(4)
    m = small_model(N_hidden=3)
    _zero_gate(m, "enc", "U", -30.0)
    A, H, S = random_adj(rng, 4), rng.normal(size=(4, 1)), rng.normal(size=(4, 3))
    cand = outer.gru_cell(m, A, H, S, override={"U": 0.0}).value
    np.testing.assert_allclose(outer.gru_cell(m, A, H, S).value, cand, rtol=0, atol=1e-11)


def test_gru_cell_gradcheck():
    rng = np.random.default_rng(5)
    m = small_model(N_hidden=2, K=1)
    A = leaf(random_adj(rng, 3) + 0.1, "A")
    H = leaf(rng.normal(size=(3, 1)), "H")
    S = leaf(rng.normal(size=(3, 2)), "S")
    params = [p for name, p in m.store if name.startswith("enc.")]
    errs = check_gradients(lambda: ad.sum_(ad.square(outer.gru_cell(m, A, H, S))), [A, H, S] + params)
    assert max(errs.values()) <= 1e-4, errs


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0))
def test_gru_state_bounded(seed, mag):
    rng = np.random.default_rng(seed)
    m = small_model(N_hidden=3, K=2, seed=seed % 1000)
    for name, p in m.store:
        p.value = p.value * mag
    S = rng.normal(size=(4, 3)) * mag
    out = outer.gru_cell(m, random_adj(rng, 4), rng.normal(size=(4, 1)) * 10, S).value
    assert (np.abs(out) <= np.maximum(np.abs(S), 1.0) + 1e-12).all()


def test_gru_linear_reduction_matches_direct_var_layer():
    rng = np.random.default_rng(6)
    N, Hd, hid = 4, 2, 3
    m = GrangerModel(Hd, OuterConfig(K=1, L=2, tau=1, hidden=hid, candidate="identity", seed=1))
    A, H, S = random_adj(rng, N), rng.normal(size=(N, Hd)), rng.normal(size=(N, hid))
    got = outer.gru_cell(m, A, H, S, override={"U": 0.0, "R": 1.0}).value
    # S_t[i] = sum_j M_k[i, j] x_j theta + b, coded cell by cell
    Pf, Pb = naive_transition(A), naive_transition(A.T)
    th = m.thetas("enc", "C")
    x = np.concatenate([H, S], axis=1)
    b = m.store["enc.C.b"].value
    expected = np.zeros((N, hid))
    for i in range(N):
        acc = b.copy()
        for j in range(N):
            e = float(i == j)
            acc += x[j] @ (e * th[0] + e * th[1] + Pf[i, j] * th[2] + Pb[i, j] * th[3])
        expected[i] = acc
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)


# --------------------------------------------------------------------------- refinement


def test_refine_hard_limit():
    A = np.array([[0.0, 0.7, -0.2], [0.0, 0.0, 2.0], [1e-3, -5.0, 0.0]])
    p = outer.refine_adjacency(A, xi=1e-8).A_outer
    off = ~np.eye(3, dtype=bool)
    assert (p[off & (A > 0)] > 1 - 1e-12).all()
    assert (p[off & (A <= 0)] <= 0.5).all()
    assert (np.diag(p) == 0).all()


def test_refine_monte_carlo_symmetry():
    rng = np.random.default_rng(0)
    p = outer.gumbel_edge_probs(np.zeros((100_000, 2, 2)), 1.0, rng).value
    assert abs(p[:, 0, 1].mean() - 0.5) <= 0.01
    assert abs(p[:, 1, 0].mean() - 0.5) <= 0.01


def test_refine_deterministic_and_in_range():
    A = np.random.default_rng(1).normal(size=(5, 5))
    for mode in ("binary", "row"):
        a = outer.refine_adjacency(A, 0.5, seed=7, mode=mode)
        b = outer.refine_adjacency(A, 0.5, seed=7, mode=mode)
        assert a.A_outer.tobytes() == b.A_outer.tobytes() and a.gumbel_seed == 7
        assert ((a.A_outer >= 0) & (a.A_outer <= 1)).all() and (np.diag(a.A_outer) == 0).all()
    with pytest.raises(ValueError):
        outer.refine_adjacency(A, 0.0)


@pytest.mark.parametrize("mode", ["binary", "row"])
def test_refine_gradcheck(mode):
    A = leaf(np.random.default_rng(2).normal(size=(4, 4)), "A")
    w = np.random.default_rng(3).normal(size=(4, 4))

    def fn():
        p = outer.gumbel_edge_probs(A, 0.7, np.random.default_rng(11), mode)
        return ad.sum_(ad.mul_const(p, w))

    errs = check_gradients(fn, [A])
    assert errs["A"] <= 1e-4, errs


# --------------------------------------------------------------------------- forecast


def test_forecast_tau_zero_is_empty():
    m = small_model(L=3)
    out = outer.forecast(m, np.zeros((3, 4, 4)), np.zeros((3, 4, 1)), tau=0)
    assert out.shape == (0, 4, 1)


def test_forecast_wrong_lag():
    m = small_model(L=3)
    with pytest.raises(ValueError):
        outer.forecast(m, np.zeros((2, 4, 4)), np.zeros((2, 4, 1)), tau=1)


def test_forecast_carry_gives_constant_output_head():
    rng = np.random.default_rng(8)
    m = small_model(N_hidden=3, L=4)
    for cell in ("enc", "dec"):
        _zero_gate(m, cell, "U", 30.0)
    _set(m, "out.b", 0.37)
    out = outer.forecast(m, rng.random((4, 5, 5)), rng.normal(size=(4, 5, 1)), tau=6)
    np.testing.assert_allclose(out, 0.37, rtol=0, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_forecast_permutation_equivariance(N, seed):
    rng = np.random.default_rng(seed)
    m = GrangerModel(2, OuterConfig(K=2, L=3, tau=2, hidden=4, seed=seed % 97))
    A = rng.random((2, 3, N, N))
    H = rng.normal(size=(2, 3, N, 2))
    pi = rng.permutation(N)
    base = outer.forecast(m, A, H, 2)
    perm = outer.forecast(m, A[:, :, pi][:, :, :, pi], H[:, :, pi], 2)
    assert perm.tobytes() == base[:, :, pi].tobytes()


def test_forecast_deterministic():
    rng = np.random.default_rng(9)
    m = small_model(L=3)
    A, H = rng.random((3, 4, 4)), rng.normal(size=(3, 4, 1))
    assert outer.forecast(m, A, H, 2).tobytes() == outer.forecast(m, A, H, 2).tobytes()


def _rotation_var(seed, T=300):
    def rot(th):
        return np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])

    W = np.zeros((4, 4))
    W[:2, :2] = W[2:, 2:] = 0.995 * rot(0.3)
    init = np.random.default_rng(seed).normal(size=4) * 2
    ts, _ = synth.simulate_var(4, T, 1, W[None], noise_std=0.0, init=init)
    H = ts.values.transpose(2, 0, 1)
    H = H / H[:200].std()
    E = np.full((4, 4), -10.0)
    E[0, 1] = E[2, 3] = 10.0  # known directed coupling; coefficients are shared across blocks
    return H, np.repeat(E[None], T, axis=0)


@pytest.mark.parametrize("seed", range(5))
def test_forecast_beats_persistence_on_noiseless_var(seed):
    H, A = _rotation_var(seed)
    m = GrangerModel(1, OuterConfig(K=1, L=4, tau=1, hidden=8, epochs=60, lr=1e-2, batch_size=32, seed=seed))
    outer.train_outer(m, H, A, np.arange(0, 195), np.arange(200, 245))
    te = np.arange(250, H.shape[0] - 5)
    mae = outer.window_mae(m, H, A, te)
    persistence = np.mean(np.abs(H[te + 4] - H[te + 3]))
    assert mae <= 0.1 * persistence


# --------------------------------------------------------------------------- loss and training


def test_mae_closed_forms():
    H = np.random.default_rng(0).normal(size=(5, 3, 2))
    assert outer.mae_loss(ad.const(H), H).value == 0.0
    assert outer.mae_loss(ad.const(np.zeros_like(H)), H).value == pytest.approx(np.abs(H).mean(), rel=1e-14)


def test_mae_gradcheck():
    rng = np.random.default_rng(1)
    p = leaf(rng.normal(size=(3, 4)), "p")
    t = rng.normal(size=(3, 4))
    assert check_gradients(lambda: outer.mae_loss(p, t), [p])["p"] <= 1e-4


def _var_latent(seed, N=4, T=160):
    coefs = synth.random_var_coefficients(N, 1, density=0.3, radius=0.8, seed=seed)
    ts, truth = synth.simulate_var(N, T, 1, coefs, noise_std=1.0, seed=seed, burn_in=50)
    H = ts.values.transpose(2, 0, 1)
    return H / H[:100].std(), truth


def _train(seed, epochs=4, lr=1e-2):
    H, _ = _var_latent(seed)
    m = GrangerModel(1, OuterConfig(K=1, L=4, tau=1, hidden=6, epochs=epochs, lr=lr, batch_size=16, seed=seed))
    res = outer.train_outer(m, H, np.zeros((H.shape[0], 4, 4)), np.arange(0, 96), np.arange(100, 150))
    return m, res, H


def test_train_outer_restores_best_and_is_deterministic():
    m, res, H = _train(0)
    assert res.best_epoch == int(np.argmin(res.val_curve))
    assert outer.window_mae(m, H, np.zeros((H.shape[0], 4, 4)), np.arange(100, 150)) == pytest.approx(
        min(res.val_curve), rel=1e-12)
    m2, res2, _ = _train(0)
    assert m.checkpoint_bytes() == m2.checkpoint_bytes()
    assert res.val_curve == res2.val_curve
    assert res.probs.shape == (H.shape[0], 4, 4)


def test_validation_mae_decreases_early_majority():
    ok = 0
    for seed in range(20):
        _, res, _ = _train(seed, epochs=5, lr=1e-3)
        ok += all(b <= a for a, b in zip(res.val_curve, res.val_curve[1:]))
    assert ok > 10, ok


def test_cyclic_timestamps_flagged():
    A = np.zeros((3, 3, 3))
    A[1, 0, 1] = A[1, 1, 0] = 0.9
    A[2, 0, 1] = 0.9
    assert outer.cyclic_timestamps(A, 0.3) == [1]


def test_model_checkpoint_roundtrip(tmp_path):
    m, _, _ = _train(1, epochs=1)
    m.save(tmp_path / "m.ckpt")
    from tbngranger.diffkit import checkpoint
    m2 = GrangerModel(1, m.cfg)
    m2.load_state(checkpoint.load(tmp_path / "m.ckpt"))
    assert m2.checkpoint_bytes() == m.checkpoint_bytes()


# --------------------------------------------------------------------------- Granger causes


def test_zeroed_diffusion_terms_leave_self_causes_only():
    m = GrangerModel(1, OuterConfig(K=2, L=2, tau=1, hidden=3, seed=0))
    for cell in ("enc", "dec"):
        for gate in ("R", "U", "C"):
            for k in (1, 2):
                for d in (1, 2):
                    _set(m, f"{cell}.{gate}.theta{k}_{d}", 0.0)
    A = np.random.default_rng(0).random((3, 5, 5))
    causes, scores = outer.extract_granger_causes(m, A, 1e-12)
    np.testing.assert_array_equal(causes, np.eye(5, dtype=np.int64))
    assert (np.diag(scores) > 0).all()


def test_granger_score_matches_explicit_operator():
    rng = np.random.default_rng(3)
    m = GrangerModel(1, OuterConfig(K=1, L=2, tau=1, hidden=2, seed=3))
    A = random_adj(rng, 3)
    Pf, Pb = naive_transition(A), naive_transition(A.T)
    total = np.zeros((3, 3))
    for cell in ("enc", "dec"):
        for gate in ("R", "U", "C"):
            th = m.thetas(cell, gate)
            for i in range(3):
                for j in range(3):
                    e = float(i == j)
                    blk = e * th[0] + e * th[1] + Pf[i, j] * th[2] + Pb[i, j] * th[3]
                    total[j, i] += np.linalg.norm(blk)
    np.testing.assert_allclose(outer.granger_scores(m, A), total / 6, rtol=1e-10)


def test_infinite_tolerance_gives_no_causes():
    m = small_model()
    causes, _ = outer.extract_granger_causes(m, np.random.default_rng(0).random((2, 4, 4)), np.inf)
    assert causes.sum() == 0
