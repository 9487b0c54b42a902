import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from assocmem import closed_form as cf
from assocmem import model
from assocmem.analysis import two_token_problem
from assocmem.dynamics import DynamicsConfig, gd_run, gf_run
from assocmem.experiments import binary_instance

OMEGA = 0.5671432904097838  # W0(1)


def bisect_w0(x, lo=-1.0, hi=None, iters=200):
    """Oracle: solve w e^w = x on the principal branch by bisection."""
    hi = hi if hi is not None else max(1.0, math.log1p(x) + 1.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid * math.exp(mid) < x:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_lambert_omega_constant():
    assert cf.lambert_w0(1.0) == pytest.approx(OMEGA, abs=1e-15)
    assert cf.lambert_w0(1.0) == pytest.approx(bisect_w0(1.0), abs=1e-14)


@pytest.mark.parametrize("x", [-1 / math.e + 1e-6, -0.3, -0.1, 0.0, 1e-10, 0.5, 2.0, math.e, 10.0, 1e3, 1e100])
def test_lambert_against_bisection(x):
    assert cf.lambert_w0(x) == pytest.approx(bisect_w0(x), rel=1e-12, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=-1 / math.e, max_value=1e300, allow_nan=False))
def test_lambert_round_trip(x):
    w = cf.lambert_w0(x)
    assert w >= -1.0
    assert abs(w * math.exp(w) - x) <= 1e-11 * max(abs(x), 1e-300) + 1e-15


def test_lambert_branch_point_and_domain():
    # dW/dx ~ 1e7 at 1e-14 above the branch point, so only ~1e-9 agreement is meaningful
    x = -1 / math.e + 1e-14
    assert cf.lambert_w0(x) == pytest.approx(bisect_w0(x), abs=1e-8)
    assert cf.lambert_w0(-1 / math.e) == pytest.approx(-1.0, abs=1e-7)
    with pytest.raises(ValueError):
        cf.lambert_w0(-0.5)
    arr = cf.lambert_w0(np.array([0.0, 1.0, math.e]))
    np.testing.assert_allclose(arr, [0.0, OMEGA, 1.0], atol=1e-15)


@pytest.mark.parametrize("y", [-5.0, 0.0, 1.0, 50.0, 700.0, 1e4, 1e8])
def test_lambert_of_exponential(y):
    w = cf.lambert_w0_exp(y)
    assert w + math.log(w) == pytest.approx(y, rel=1e-14, abs=1e-13)


@pytest.mark.parametrize("c,m0", [(0.1, -2.0), (1.0, 0.0), (5.0, 2.0), (0.7, 1.3)])
def test_closed_form_matches_flow(c, m0):
    emb, task, W0 = binary_instance(c, m0)
    assert model.margins(W0, emb, task).gap[0] == pytest.approx(m0, abs=1e-15)
    times = tuple(np.linspace(0, 1000, 51))
    rec = gf_run(W0, emb, task, DynamicsConfig(kind="GF", t_end=1000, record_times=times, rtol=1e-10, atol=1e-10))
    inst = cf.BinaryOrthogonalInstance(c, m0)
    ref = [cf.binary_margin_closed(inst, t) for t in rec.times]
    np.testing.assert_allclose(rec.margins[:, 0], ref, atol=1e-6)


def test_closed_form_solves_its_equation():
    inst = cf.BinaryOrthogonalInstance(2.0, 0.5)
    for t in (0.0, 1.0, 1e3, 1e9):
        m = cf.binary_margin_closed(inst, t)
        assert m + math.exp(m) == pytest.approx(2.0 * t + math.exp(0.5) + 0.5, rel=1e-14)
    assert cf.binary_margin_closed(inst, 0.0) == pytest.approx(0.5, abs=1e-14)


def test_from_embeddings_constant():
    emb = model.orthonormal_embeddings(2, 2, input_scale=2.0)
    task = model.TaskSpec([0, 1], [0.25, 0.75])
    assert cf.BinaryOrthogonalInstance.from_embeddings(emb, task, 1).c == pytest.approx(0.75 * 4 * 2)


@pytest.mark.parametrize("c,m0", [(0.3, -1.0), (1.0, 0.0), (4.0, 2.0)])
def test_sandwich(c, m0):
    inst = cf.BinaryOrthogonalInstance(c, m0)
    for x in np.logspace(0, 6, 200):
        gap = math.log(x) - cf.binary_margin_closed(inst, inst.t0 + x / c)
        lo, hi = cf.h_bound(x)
        assert lo <= gap + 1e-13 and gap <= hi + 1e-13
    with pytest.raises(ValueError):
        cf.h_bound(0.5)


def test_multiclass_invariants_conserved():
    emb = model.orthonormal_embeddings(4, 4)
    task = model.TaskSpec([0, 1, 2, 3], [0.4, 0.3, 0.2, 0.1])
    W0 = 0.5 * np.random.default_rng(0).standard_normal((4, 4))
    rec = gf_run(W0, emb, task, DynamicsConfig(kind="GF", t_end=100, rtol=1e-10, atol=1e-10))
    S0, S1 = model.scores(W0, emb), model.scores(rec.W_final, emb)
    for x in range(4):
        np.testing.assert_allclose(cf.multiclass_invariants(S1[x], x), cf.multiclass_invariants(S0[x], x), atol=1e-6)
    assert cf.multiclass_invariants([1.0, 2.0, 3.0], 0).shape == (1,)


def test_asymptotic_direction():
    emb = model.orthonormal_embeddings(3, 3)
    task = model.TaskSpec([0, 1, 2], [1 / 3] * 3)
    a = cf.asymptotic_direction(emb, task)
    np.testing.assert_allclose(a.direction, np.eye(3) - 1 / 3)
    assert a.constant == 1.0
    with pytest.raises(ValueError):
        cf.asymptotic_direction(model.correlated_pair_embeddings(0.5), model.TaskSpec([0, 1], [0.5, 0.5]))


def test_gamma_rhs_is_the_flow_in_rescaled_time():
    """Reduced ODE integrated in tau = c t / 2 reproduces the full gradient flow."""
    p1, alpha = 0.75, 0.5
    emb, task = two_token_problem(alpha, p1)
    inst = cf.TwoTokenInstance(p1, 1 - p1, alpha)
    T = 20.0
    rec = gf_run(np.zeros((2, 2)), emb, task, DynamicsConfig(kind="GF", t_end=T, rtol=1e-11, atol=1e-11,
                                                             record_times=(T,), gamma="theory"))
    sol = solve_ivp(lambda t, y: cf.gamma_ode_rhs(inst, *y), (0, inst.c * T / 2), [0.0, 0.0], rtol=1e-11, atol=1e-12)
    np.testing.assert_allclose(rec.gamma[-1], sol.y[:, -1], atol=1e-8)


def test_sign_rule_and_limit():
    inst = cf.TwoTokenInstance(0.9, 0.1, 0.2)
    assert cf.gamma1_limit(inst) == pytest.approx(0.5 * math.log(9))
    for g1 in np.linspace(-2, 4, 31):
        for g2 in np.linspace(-1, 5, 31):
            d1, d2 = cf.gamma_ode_rhs(inst, g1, g2)
            assert d2 > 0
            s = math.sinh(g1 - inst.gamma_bar) - cf.sinh_threshold(inst, g2)
            if abs(s) > 1e-9:
                assert (d1 <= 0) == (s >= 0)


def test_gd_envelope_and_gf_upper_bound():
    inst = cf.TwoTokenInstance(0.75, 0.25, 0.5)
    emb, task = two_token_problem(0.5, 0.75)
    env = cf.gd_gamma_bounds(inst, 1.0)
    rec = gd_run(np.zeros((2, 2)), emb, task, DynamicsConfig(kind="GD", eta=1.0, t_end=2000, gamma="theory"))
    assert np.all(rec.gamma[:, 0] >= env.gamma_min) and np.all(rec.gamma[:, 0] <= env.gamma_max)
    assert all(math.exp(g2) >= env.gamma2_lower(t) for t, g2 in zip(rec.times, rec.gamma[:, 1]))
    flow = gf_run(np.zeros((2, 2)), emb, task, DynamicsConfig(kind="GF", t_end=100, record_every=5, gamma="theory"))
    # gamma2 upper envelope holds along the flow
    assert all(g2 <= cf.gf_gamma2_upper(inst, t) + 1e-9 for t, g2 in zip(flow.times, flow.gamma[:, 1]))


def test_spike_bound():
    assert not cf.spike_lower_bound(cf.TwoTokenInstance(0.6, 0.4, 0.5), 1.0).applicable
    inst = cf.TwoTokenInstance(0.75, 0.25, 0.95)
    b = cf.spike_lower_bound(inst, 10.0)
    assert b.applicable and b.value == pytest.approx(10 * (0.95 * 0.75 - 0.25) * 0.25)
    emb, task = two_token_problem(0.95, 0.75)
    W1 = -10.0 * model.grad(np.zeros((2, 2)), emb, task)
    assert model.loss(W1, emb, task) >= b.value


def test_two_token_validation():
    with pytest.raises(ValueError):
        cf.TwoTokenInstance(0.4, 0.6, 0.1)
    assert cf.TwoTokenInstance.normalized(0.4, 0.6, 0.1).p1 == 0.6
    with pytest.raises(ValueError):
        cf.BinaryOrthogonalInstance(0.0)
