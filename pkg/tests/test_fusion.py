import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridvc.features import DataError, SynthSpec, pooled_arrays, synthesize
from hybridvc.fusion import (
    ARRAY_NAMES,
    FusionHyper,
    FusionNet,
    TrainingError,
    fusion_forward,
    fusion_objective,
    fusion_predict,
    fusion_train_step,
    init_fusion,
    load_fusion,
    norm_l11,
    norm_l21,
    objective_terms,
    prox_l21_l11,
    save_fusion,
    smooth_gradients,
    smooth_part,
    train_fusion,
    zero_rows,
)
from hybridvc.numcore import ShapeError
from hybridvc.verify import GRAD_TOL, numeric_gradient, prox_oracle, relative_error, row_objective


def random_net(rng, d_s=4, d_m=3, C=3, widths=(5, 4), P=6, scale=1.0):
    net = FusionNet.zeros(d_s, d_m, C, widths, P)
    for a in net.arrays():
        a[...] = rng.uniform(-scale, scale, size=a.shape)
    return net


def scalar_forward(net, xs, xm):
    sig = lambda z: 1 / (1 + math.exp(-z))
    layer = lambda W, b, x: [sig(b[r] + sum(W[r][j] * x[j] for j in range(len(x)))) for r in range(len(b))]
    hs = layer(net.A_s.tolist(), net.b_s.tolist(), list(xs))
    hm = layer(net.A_m.tolist(), net.b_m.tolist(), list(xm))
    fused = layer(net.W_E.tolist(), net.b_E.tolist(), hs + hm)
    return layer(net.O.tolist(), net.b_O.tolist(), fused)


# -- forward -------------------------------------------------------------------


def test_zero_net_scores_half():
    net = FusionNet.zeros(3, 2, 4, 5, 6)
    np.testing.assert_array_equal(fusion_forward(net, [1, 2, 3], [4, 5]), 0.5)


def test_dead_row_is_constant():
    rng = np.random.default_rng(0)
    net = random_net(rng)
    net.W_E[2] = 0.0
    from hybridvc.fusion import _forward

    fused = _forward(net, rng.normal(size=(10, 4)), rng.normal(size=(10, 3)))[3]
    np.testing.assert_allclose(fused[:, 2], 1 / (1 + math.exp(-net.b_E[2])), rtol=0, atol=1e-15)


def test_forward_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    for _ in range(5):
        net = random_net(rng)
        xs, xm = rng.normal(size=4), rng.normal(size=3)
        np.testing.assert_allclose(fusion_forward(net, xs, xm), scalar_forward(net, xs, xm), rtol=0, atol=1e-12)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        fusion_forward(FusionNet.zeros(3, 2, 2, 4, 4), np.zeros(2), np.zeros(2))


def test_block_views_follow_concatenation_order():
    net = FusionNet.zeros(3, 2, 2, (4, 5), 6)
    assert net.W_E_s.shape == (6, 4) and net.W_E_m.shape == (6, 5)
    net.W_E_s[...] = 1.0
    assert net.W_E[:, :4].all() and not net.W_E[:, 4:].any()


# -- norms -----------------------------------------------------------------------


def test_norm_examples():
    assert norm_l21([[3, 4], [0, 0]]) == 5
    assert norm_l21(np.eye(2)) == 2
    assert norm_l11([[1, -1], [2, 0]]) == 4
    assert norm_l11(np.zeros((3, 3))) == 0


def test_norms_match_loops():
    W = np.random.default_rng(2).normal(size=(4, 6))
    l21 = sum(math.sqrt(sum(W[i][j] ** 2 for j in range(6))) for i in range(4))
    l11 = sum(abs(W[i][j]) for i in range(4) for j in range(6))
    assert norm_l21(W) == pytest.approx(l21, abs=1e-12)
    assert norm_l11(W) == pytest.approx(l11, abs=1e-12)


# -- objective -------------------------------------------------------------------


def test_objective_zero_net_single_sample():
    net = FusionNet.zeros(2, 2, 2, 3, 3)
    batch = (np.ones((1, 2)), np.ones((1, 2)), np.array([[1.0, 0.0]]))
    assert fusion_objective(net, batch, FusionHyper()) == pytest.approx(0.5, abs=1e-15)


def test_objective_unregularized_is_squared_loss():
    rng = np.random.default_rng(3)
    net = random_net(rng)
    xs, xm, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 3)), np.eye(3)[[0, 1, 2, 0, 1]]
    hyper = FusionHyper(lambda1=0, lambda2=0, lambda3=0)
    expected = ((fusion_predict(net, xs, xm) - y) ** 2).sum()
    assert fusion_objective(net, (xs, xm, y), hyper) == pytest.approx(expected, abs=1e-12)


def test_objective_composition():
    rng = np.random.default_rng(4)
    net = random_net(rng)
    xs, xm, y = rng.normal(size=(6, 4)), rng.normal(size=(6, 3)), np.eye(3)[rng.integers(3, size=6)]
    h = FusionHyper(lambda1=0.01, lambda2=0.2, lambda3=0.05)
    loss = sum(sum((a - b) ** 2 for a, b in zip(fusion_forward(net, xs[i], xm[i]), y[i])) for i in range(6))
    phi = sum((np.asarray(W) ** 2).sum() for W in (net.A_s, net.A_m, net.W_E, net.O))
    expected = loss + h.lambda1 * phi + h.lambda2 / 2 * norm_l21(net.W_E) + h.lambda3 * norm_l11(net.W_E)
    assert fusion_objective(net, (xs, xm, y), h) == pytest.approx(expected, abs=1e-12)


# -- prox --------------------------------------------------------------------------


def test_prox_identity():
    V = np.random.default_rng(5).normal(size=(4, 3))
    np.testing.assert_array_equal(prox_l21_l11(V, 0, 0), V)


def test_prox_scalar_example_against_grid():
    grid = np.round(np.arange(-300000, 300001) * 1e-5, 10)
    best = grid[np.argmin(0.5 * (grid - 2.0) ** 2 + 0.6 * np.abs(grid) + 0.5 * np.abs(grid))]
    w = prox_l21_l11([[2.0]], 0.6, 0.5)[0, 0]
    assert w == pytest.approx(0.9, abs=1e-12)
    assert abs(w - best) <= 1e-5


def test_prox_group_zero_example():
    w = prox_l21_l11([[0.3, -0.4]], 0.5, 0.1)
    assert w.tolist() == [[0.0, 0.0]]
    assert np.allclose(prox_oracle([0.3, -0.4], 0.5, 0.1), 0, atol=1e-12)


def test_prox_matches_oracle_random_rows():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        v = rng.normal(0, 1.5, size=n)
        t2, t3 = rng.uniform(0, 2, size=2)
        w = prox_l21_l11(v[None], t2, t3)[0]
        o = prox_oracle(v, t2, t3)
        assert np.abs(w - o).max() <= 1e-6
        assert row_objective(w, v, t2, t3) <= row_objective(o, v, t2, t3) + 1e-12


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 2), st.floats(0, 2))
def test_prox_zero_set_monotone_and_contracting(seed, tau3, t_lo, t_hi):
    V = np.random.default_rng(seed).normal(size=(12, 4))
    t_lo, t_hi = sorted((t_lo, t_hi))
    lo, hi = prox_l21_l11(V, t_lo, tau3), prox_l21_l11(V, t_hi, tau3)
    z_lo, z_hi = ~lo.any(axis=1), ~hi.any(axis=1)
    assert not (z_lo & ~z_hi).any()
    U = np.sign(V) * np.maximum(np.abs(V) - tau3, 0)
    np.testing.assert_array_equal(z_hi, np.linalg.norm(U, axis=1) <= t_hi)
    assert (np.linalg.norm(hi, axis=1) <= np.linalg.norm(V, axis=1) + 1e-15).all()


def test_prox_rejects_negative_threshold():
    with pytest.raises(ValueError):
        prox_l21_l11(np.ones((1, 1)), -1, 0)


# -- train step ------------------------------------------------------------------


def _batch(rng, n=6, d_s=4, d_m=3, C=3):
    return rng.normal(size=(n, d_s)), rng.normal(size=(n, d_m)), np.eye(C)[rng.integers(C, size=n)]


def test_step_without_structure_is_plain_gradient_descent():
    rng = np.random.default_rng(7)
    net, batch = random_net(rng), _batch(rng)
    h = FusionHyper(lambda1=0.01, lambda2=0, lambda3=0, lr=0.3)
    grads = smooth_gradients(net, batch, h)
    expected = {n: getattr(net, n) - 0.3 * grads[n] for n in ARRAY_NAMES}
    fusion_train_step(net, batch, h)
    for n in ARRAY_NAMES:
        np.testing.assert_allclose(getattr(net, n), expected[n], rtol=0, atol=1e-15)


def test_huge_group_penalty_zeroes_fusion_weights():
    rng = np.random.default_rng(8)
    net, batch = random_net(rng), _batch(rng)
    fusion_train_step(net, batch, FusionHyper(lambda2=1e6, lr=0.1))
    assert not net.W_E.any()
    assert net.b_E.any()


def test_smooth_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    net = random_net(rng, d_s=5, d_m=5, C=2, widths=(4, 4), P=3)
    batch = _batch(rng, n=4, d_s=5, d_m=5, C=2)
    for loss in ("squared", "logistic"):
        h = FusionHyper(lambda1=0.05, loss=loss)
        grads = smooth_gradients(net, batch, h)
        p = lambda: smooth_part(net, batch, h)
        for n in ARRAY_NAMES:
            assert relative_error(grads[n], numeric_gradient(p, getattr(net, n))) < GRAD_TOL, (loss, n)


def test_non_finite_gradient_names_layer():
    rng = np.random.default_rng(10)
    net, batch = random_net(rng), _batch(rng)
    net.O[0, 0] = np.nan
    with pytest.raises(TrainingError, match="layer"):
        fusion_train_step(net, batch, FusionHyper())


def test_objective_monotone_with_step_halving():
    rng = np.random.default_rng(11)
    net, batch = random_net(rng, scale=0.5), _batch(rng, n=10)
    h = FusionHyper(lambda1=1e-3, lambda2=0.05, lambda3=0.01, lr=0.5)
    prev = fusion_objective(net, batch, h)
    for _ in range(20):
        while True:
            trial = fusion_train_step(net.copy(), batch, h)
            cur = fusion_objective(trial, batch, h)
            if cur <= prev:
                break
            h.lr /= 2
            assert h.lr > 1e-8
        net, prev = trial, cur


# -- training --------------------------------------------------------------------


def _correlated(seed=1):
    spec = SynthSpec(classes=3, train_per_class=40, test_per_class=30, t_min=3, t_max=5, d_s=6, d_m=6,
                     temporal=False, correlation=True, noise=0.3, nuisance=0.3, seed=seed)
    return synthesize(spec)


def test_zero_epochs_returns_init():
    train, _ = _correlated()
    h = FusionHyper(epochs=0, seed=3, abstract_width=5, fusion_width=4)
    net = train_fusion(train, h)
    ref = init_fusion(6, 6, 3, np.random.Generator(np.random.PCG64(3)), 5, 4)
    for a, b in zip(net.arrays(), ref.arrays()):
        np.testing.assert_array_equal(a, b)


def test_learns_correlated_task():
    train, test = _correlated()
    net = train_fusion(train, FusionHyper(lr=0.1, epochs=60, abstract_width=16, fusion_width=16, lambda2=0, lambda3=0))
    xs, xm, y = pooled_arrays(test)
    assert (fusion_predict(net, xs, xm).argmax(1) == y.argmax(1)).mean() >= 0.90


def test_group_penalty_sweep_zero_rows_and_joint_pattern():
    train, _ = _correlated()
    counts = {}
    for l2 in (0.0, 0.1, 0.5):
        net = train_fusion(train, FusionHyper(lr=0.1, epochs=30, abstract_width=16, fusion_width=16, lambda2=l2, lambda3=0))
        counts[l2] = zero_rows(net.W_E)
        np.testing.assert_array_equal(~net.W_E_s.any(axis=1), ~net.W_E_m.any(axis=1))
    assert counts[0.0] == 0 and counts[0.5] > 0


def test_train_deterministic_and_history():
    train, _ = _correlated()
    h = FusionHyper(lr=0.1, epochs=3, abstract_width=5, fusion_width=4)
    hist = []
    a, b = train_fusion(train, h, history=hist), train_fusion(train, h)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))
    assert [s.epoch for s in hist] == [1, 2, 3]
    assert "zero_rows=" in hist[-1].line()
    assert hist[-1].objective == pytest.approx(objective_terms(a, train, h)["objective"])


def test_train_rejects_empty():
    with pytest.raises(DataError):
        train_fusion([], FusionHyper())


def test_checkpoint_round_trip(tmp_path):
    net = random_net(np.random.default_rng(12))
    save_fusion(tmp_path / "f.hsfn", net)
    back = load_fusion(tmp_path / "f.hsfn")
    assert all(x.tobytes() == y.tobytes() for x, y in zip(net.arrays(), back.arrays()))
    raw = (tmp_path / "f.hsfn").read_bytes()
    (tmp_path / "bad.hsfn").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError, match="magic"):
        load_fusion(tmp_path / "bad.hsfn")
