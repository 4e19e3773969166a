import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nmsse import rng as rngmod
from nmsse.linalg import cholesky_psd
from nmsse.noise import (CorrelationPair, ExpDecay, TimeGrid, White, condition_continue,
                         covariance_matrix, delta_constraint_residual, kernel_from_json,
                         noise_statistics, ou_coefficients, sample_batch, sample_general_cholesky,
                         sample_ou_exact, sample_realization, sample_white_increments,
                         validate_pair)

REF_PAIR = CorrelationPair(x=White(0.5), y=ExpDecay(1.0, 1.0))


def gen(*idx):
    return rngmod.stream(2024, "test-noise", *idx)


def within(est, pred, se, n=5.0):
    return abs(est - pred) <= n * se


# kernel evaluation and the constraint residual

def test_kernel_eval_eq9():
    assert REF_PAIR.kernel_eval("alpha", 0.0) == (1.0, 0.5)
    assert REF_PAIR.kernel_eval("eta", 0.0) == (-1.0, 0.5)
    s, d = REF_PAIR.kernel_eval("alpha", 0.7)
    assert s == pytest.approx(math.exp(-0.7)) and d == 0.5


@given(st.floats(-5, 5))
def test_equal_white_kernels_cancel_in_eta(tau):
    p = CorrelationPair(x=White(0.5), y=White(0.5))
    assert p.kernel_eval("eta", tau) == (0.0, 0.0)


@given(st.floats(0.0, 3.0), st.floats(0.05, 20.0))
def test_residual_exp_x(c, a):
    res, kappa = delta_constraint_residual(CorrelationPair(x=ExpDecay(c, a), y=White(0.3)))
    assert res == pytest.approx(4 * c / a)
    assert kappa == 0.0


def test_residual_examples():
    assert delta_constraint_residual(REF_PAIR) == (0.0, 1.0)
    assert delta_constraint_residual(CorrelationPair(x=White(0.0), y=White(0.0))) == (0.0, 0.0)
    assert REF_PAIR.kappa == 1.0 and CorrelationPair(x=ExpDecay(1, 1)).kappa == 0.0


def test_kernel_json_roundtrip():
    assert CorrelationPair.from_json(REF_PAIR.to_json()) == REF_PAIR
    assert kernel_from_json({"type": "exp", "c": 2, "a": 3}) == ExpDecay(2.0, 3.0)
    with pytest.raises(ValueError):
        kernel_from_json({"type": "pink"})
    with pytest.raises(ValueError):
        ExpDecay(1.0, 0.0)


def test_closed_form_integrals():
    k = ExpDecay(1.0, 1.0)
    t = 1.7
    assert k.memory(t) == pytest.approx(1 - math.exp(-t))
    assert k.double_integral(t) == pytest.approx(t - 1 + math.exp(-t))
    assert White(0.5).memory(t) == 0.25
    assert White(0.5).double_integral(t) == pytest.approx(0.25 * t)
    p = CorrelationPair(x=ExpDecay(1, 1))
    assert p.double_integral("alpha+eta", t) == pytest.approx(2 * (t - (1 - math.exp(-t))))


# time grid

def test_grid_validation():
    g = TimeGrid(2.0, 1e-3)
    assert g.n_steps == 2000 and g.index(1.0) == 1000
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0.3)
    with pytest.raises(ValueError):
        g.index(2.5)


# samplers

def test_ou_forced_recursion():
    class Zeros:
        def standard_normal(self, n=None):
            return 0.0 if n is None else np.zeros(n)

    g = TimeGrid(math.log(2), math.log(2))
    r = sample_ou_exact(ExpDecay(1, 1), g, Zeros(), start=1.0)
    np.testing.assert_allclose(r, [1.0, 0.5])
    assert np.all(sample_ou_exact(ExpDecay(0.0, 1.0), g, gen(0)) == 0)
    phi, sigma = ou_coefficients(ExpDecay(2.0, 3.0), 0.1)
    assert phi == pytest.approx(math.exp(-0.3))
    assert sigma**2 == pytest.approx(2.0 * (1 - math.exp(-0.6)))


def test_ou_autocovariance_lag_one():
    g = TimeGrid(100.0, 0.01)
    lag = 100
    prods = []
    for i in range(100):
        r = sample_ou_exact(ExpDecay(1, 1), g, gen(1, i))
        prods.append(np.mean(r[lag:] * r[:-lag]))
    prods = np.array(prods)
    # within-path averages are correlated, so the SE comes from the 100 paths
    assert within(prods.mean(), math.exp(-1), prods.std(ddof=1) / 10)


def test_white_increments():
    g = TimeGrid(1e4, 0.01)
    assert np.all(sample_white_increments(0.0, g, gen(2)) == 0)
    dw = sample_white_increments(0.5, g, gen(3))
    assert len(dw) == 10**6
    v = dw**2
    assert within(v.mean(), 0.01, v.std(ddof=1) / 1e3)
    g1 = TimeGrid(1.0, 0.01)
    rz = sample_batch(CorrelationPair(x=White(0.5)), g1, [gen(4, i) for i in range(10**4)])
    w = rz.white_increments().sum(axis=-1).real ** 2
    assert within(w.mean(), 0.5, w.std(ddof=1) / 100)


def test_cholesky_two_point():
    g = TimeGrid(math.log(2), math.log(2))
    C = covariance_matrix(ExpDecay(1, 1), g.times)
    np.testing.assert_allclose(C, [[1, 0.5], [0.5, 1]])
    np.testing.assert_allclose(cholesky_psd(C), [[1, 0], [0.5, math.sqrt(0.75)]])
    assert np.all(sample_general_cholesky(ExpDecay(0.0, 1.0), g, gen(5)) == 0)


def test_cholesky_sampler_covariance():
    g = TimeGrid(2.55, 0.01)
    x = sample_general_cholesky(ExpDecay(1, 1), g, gen(6), size=10**4)
    C = covariance_matrix(ExpDecay(1, 1), g.times)
    sub = np.arange(0, 256, 15)
    xs = x[:, sub]
    prod = xs[:, :, None] * xs[:, None, :]
    est = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / 100
    z = np.abs(est - C[np.ix_(sub, sub)]) / se
    assert z.max() < 5


def test_exact_and_cholesky_agree():
    g = TimeGrid(1.0, 0.05)
    pair = CorrelationPair(y=ExpDecay(1.0, 2.0))
    a = sample_batch(pair, g, [gen(7, i) for i in range(4000)]).colored_y
    b = sample_batch(pair, g, [gen(8, i) for i in range(4000)], method="cholesky").colored_y
    for lag in (0, 4, 10):
        pa = a[:, lag] * a[:, 0]
        pb = b[:, lag] * b[:, 0]
        se = math.sqrt(pa.var(ddof=1) / len(pa) + pb.var(ddof=1) / len(pb))
        assert abs(pa.mean() - pb.mean()) < 5 * se


def test_draw_order_is_fixed():
    g = TimeGrid(1.0, 0.1)
    a = sample_realization(REF_PAIR, g, gen(9))
    b = sample_realization(REF_PAIR, g, gen(9))
    np.testing.assert_array_equal(a.dw_x, b.dw_x)
    np.testing.assert_array_equal(a.y_exp, b.y_exp)
    assert a.x_exp.shape == (0, 11) and a.y_exp.shape == (1, 11)


def test_coarsen_keeps_integral():
    g = TimeGrid(1.0, 0.01)
    rz = sample_realization(REF_PAIR, g, gen(10))
    c = rz.coarsen(5)
    assert c.grid.n_steps == 20
    assert c.dw_x.sum() == pytest.approx(rz.dw_x.sum())
    np.testing.assert_array_equal(c.y_exp[:, 1], rz.y_exp[:, 5])


# conditional continuation

def test_white_continuation_is_fresh_and_keeps_prefix():
    g = TimeGrid(1.0, 0.01)
    pair = CorrelationPair(x=White(0.5))
    prefix = sample_realization(pair, g, gen(11))
    cont = condition_continue(prefix, 50, pair, [gen(12, i) for i in range(4000)])
    np.testing.assert_array_equal(cont.dw_x[:, :50], np.broadcast_to(prefix.dw_x[:50], (4000, 50)))
    tail = cont.dw_x[:, 50:].sum(axis=-1)
    assert within(tail.mean(), 0.0, tail.std() / math.sqrt(4000))
    assert within((tail**2).mean(), 0.5, (tail**2).std() / math.sqrt(4000))


@pytest.mark.parametrize("method", ["markov", "schur"])
def test_ou_conditional_moments(method):
    g = TimeGrid(2.0, 0.05)
    pair = CorrelationPair(y=ExpDecay(1, 1))
    prefix = sample_realization(pair, g, gen(13))
    prefix.y_exp[0, 20] = 2.0
    n = 10**4 if method == "markov" else 3000
    cont = condition_continue(prefix, 20, pair, [gen(14, i) for i in range(n)], method=method)
    for k, tau in ((22, 0.1), (30, 0.5), (40, 1.0)):
        y = cont.y_exp[:, 0, k]
        assert within(y.mean(), 2 * math.exp(-tau), y.std() / math.sqrt(n))
        v = (y - 2 * math.exp(-tau)) ** 2
        assert within(v.mean(), 1 - math.exp(-2 * tau), v.std() / math.sqrt(n))


def test_continuation_marginalizes_to_zero_mean():
    g = TimeGrid(2.0, 0.05)
    pair = CorrelationPair(y=ExpDecay(1, 1))
    k_s = 20
    vals = []
    for p in range(400):
        prefix = sample_realization(pair, g, gen(15, p))
        cont = condition_continue(prefix, k_s, pair, gen(16, p))
        vals.append(cont.y_exp[0, 30])
    vals = np.array(vals)
    assert within(vals.mean(), 0.0, vals.std() / 20)
    assert within((vals**2).mean(), 1.0, (vals**2).std() / 20)


def test_condition_continue_errors():
    g = TimeGrid(1.0, 0.1)
    prefix = sample_realization(REF_PAIR, g, gen(17))
    with pytest.raises(IndexError):
        condition_continue(prefix, 11, REF_PAIR, gen(18))


# validation and statistics

def test_validate_pair_examples():
    rep = validate_pair(REF_PAIR)
    assert rep.accepted and rep.kappa == 1.0 and rep.residual == 0.0
    bad = validate_pair(CorrelationPair(x=White(0.5), y=ExpDecay(-1, 1)))
    assert not bad.accepted and "negative" in bad.reasons[0]
    assert validate_pair(CorrelationPair(x=White(0.0), y=White(0.0))).accepted
    assert not validate_pair(CorrelationPair(x=White(-0.1))).accepted


@given(st.floats(0, 3), st.floats(0.1, 10), st.floats(0, 3), st.floats(0, 2))
def test_validate_accepts_structural_pairs(c, a, w, c2):
    rep = validate_pair(CorrelationPair(x=(White(w), ExpDecay(c, a)), y=ExpDecay(c2, 2 * a)))
    assert rep.accepted
    assert rep.min_eigenvalue >= -1e-10 * max(1.0, c + c2 + w / 0.1)


def test_noise_statistics_eq9():
    g = TimeGrid(4.0, 0.02)
    lags = [0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0, 1.4, 2.0, 3.0]
    ns = noise_statistics(REF_PAIR, g, [gen(19, i) for i in range(2000)], lags)
    assert ns.passed(5)
    np.testing.assert_allclose(ns.alpha_pred, np.exp(-np.array(lags)))
    np.testing.assert_allclose(ns.eta_pred, -np.exp(-np.array(lags)))
