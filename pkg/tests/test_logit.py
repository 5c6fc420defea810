import math
from fractions import Fraction

import numpy as np
import pytest

from chflow import framework as fw
from chflow.equilibrium import solve_sue
from chflow.logit import (
    LogitParams,
    PsiCoefficients,
    k2_region_functions,
    logit_choice,
    logit_jacobian,
    logit_map,
    logit_operator_jacobian,
    logit_predictions,
    logit_step,
    psi,
    sue_rho,
    sue_stability,
)
from chflow.network import build_network, cost_jacobian, route_costs

from conftest import random_interior_state
from oracles import central_difference, golden_min, softmax_oracle


def od(n, demand=1.0):
    return build_network([(i + 1, 1.0, 1.0) for i in range(n)], [(1, demand, [[i + 1] for i in range(n)])])


def test_choice_equal_costs():
    assert np.allclose(logit_choice(od(3, 268.0), [5.0, 5.0, 5.0], 0.7), [268 / 3] * 3)


def test_choice_concentrates():
    x = logit_choice(od(2), [0.0, 40.0], 1.0)
    assert x[0] > 1 - 1e-6


def test_choice_two_routes():
    x = logit_choice(od(2), [1.0, 2.0], 1.0)
    assert np.allclose(x, softmax_oracle([1.0, 2.0], 1.0, 1.0), atol=1e-15)
    assert x == pytest.approx([0.7310585786, 0.2689414214], abs=1e-10)


def test_choice_overflow_safe():
    x = logit_choice(od(3, 10.0), [1e6, 1e6 + 1, 1e6 + 2], 1000.0)
    assert np.all(np.isfinite(x)) and x.sum() == pytest.approx(10.0)


def test_choice_positive_and_feasible(planted, rng):
    net, _ = planted
    for _ in range(20):
        x = logit_choice(net, rng.uniform(0, 30, net.n_routes), rng.uniform(0.01, 1.0), 0.4)
        assert np.all(x > 0)
        for g, d in zip(net.od_groups, net.demand):
            assert abs(x[g].sum() - 0.4 * d) < 1e-12 * d


def test_operator_jacobian_equal_costs():
    u = logit_operator_jacobian(od(2), [3.0, 3.0], 0.8)
    assert np.allclose(u, -0.8 * np.array([[0.25, -0.25], [-0.25, 0.25]]))


def test_operator_jacobian_finite_differences(planted, rng):
    net, _ = planted
    for _ in range(10):
        c = rng.uniform(0, 20, net.n_routes)
        th, eta = rng.uniform(0.05, 0.5), rng.uniform(0.1, 1.0)
        fd = central_difference(lambda z: logit_choice(net, z, th, eta), c)
        u = logit_operator_jacobian(net, c, th, eta)
        assert np.abs(u - fd).max() < 1e-6
        assert np.linalg.eigvalsh(u).max() <= 1e-10
        assert np.abs(u.sum(axis=1)).max() < 1e-12


def test_params_defaults():
    p = LogitParams(0.4, 0.2)
    assert (p.alpha_hat, p.theta_hat) == (0.4, 0.2)


def test_predictions_at_sue(planted):
    net, _ = planted
    sue = solve_sue(net, 0.2).aggregate
    pred = logit_predictions(net, sue, fw.ClassProfile((0.2, 0.3, 0.5)), LogitParams(0.5, 0.2, 0.8))
    assert np.allclose(pred.flows, np.tile(sue, (3, 1)), atol=1e-9)


def test_predictions_with_tiny_inertia(planted, rng):
    net, _ = planted
    prof = fw.ClassProfile((0.2, 0.3, 0.5))
    x = random_interior_state(net, prof, rng).aggregate
    pred = logit_predictions(net, x, prof, LogitParams(0.5, 0.2, 1e-12))
    assert np.allclose(pred.flows, np.tile(x, (3, 1)), atol=1e-8)


def test_predictions_by_hand():
    net = od(2, 3.0)
    x = np.array([2.0, 1.0])
    prof = fw.ClassProfile((0.3, 0.2, 0.5))
    params = LogitParams(0.5, 1.0, 0.6, 0.8)
    pred = logit_predictions(net, x, prof, params)
    c0 = route_costs(net, x)
    pi1 = 0.6 * softmax_oracle(c0, 0.8, 3.0) + 0.4 * x
    c1 = route_costs(net, pi1)
    q0, q1 = 0.6, 0.4
    pi2 = 0.6 * (q0 * softmax_oracle(c0, 0.8, 3.0) + q1 * softmax_oracle(c1, 0.8, 3.0)) + 0.4 * x
    assert np.allclose(pred.flows[1], pi1, atol=1e-13)
    assert np.allclose(pred.flows[2], pi2, atol=1e-13)


def test_jacobian_finite_differences(planted, rng):
    net, _ = planted
    prof = fw.ClassProfile((0.3, 0.3, 0.4))
    for _ in range(5):
        params = LogitParams(rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.4), rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.4))
        state = random_interior_state(net, prof, rng)
        J = logit_jacobian(net, state, prof, params)
        fd = central_difference(logit_map(net, prof, params), state.flows.ravel())
        assert np.abs(J - fd).max() < 1e-5


def test_single_class_jacobian(planted, rng):
    net, _ = planted
    prof = fw.ClassProfile((1.0,))
    state = random_interior_state(net, prof, rng)
    a, th = 0.4, 0.3
    J = logit_jacobian(net, state, prof, LogitParams(a, th))
    x = state.aggregate
    ups = logit_operator_jacobian(net, route_costs(net, x), th)
    assert np.allclose(J, a * ups @ cost_jacobian(net, x) + (1 - a) * np.eye(net.n_routes), atol=1e-12)


def test_sue_fixed_point(planted):
    net, _ = planted
    sue = solve_sue(net, 0.3).aggregate
    prof = fw.ClassProfile((0.2, 0.3, 0.5))
    state = fw.ClassFlowState.proportional(prof, sue)
    nxt = logit_step(net, state, prof, LogitParams(0.6, 0.3, 0.9))
    assert np.abs(nxt.flows - state.flows).max() < 1e-10


def test_psi_anchor_points():
    for a, ah, p in [(0.3, 0.6, (0.2, 0.3, 0.5)), (0.9, 0.1, (0.5, 0.5, 0.0)), (0.5, 0.5, (1.0, 0.0, 0.0))]:
        c = PsiCoefficients(Fraction(a).limit_denominator(), Fraction(ah).limit_denominator(),
                            *[Fraction(v).limit_denominator() for v in p])
        assert psi(Fraction(0), c) == 1 - c.alpha
        assert psi(Fraction(1), c) == 1


def test_psi_single_class_is_linear():
    c = PsiCoefficients(0.4, 0.4, 1.0)
    for r in np.linspace(-5, 0, 11):
        assert psi(r, c) == pytest.approx(0.4 * r + 0.6, abs=1e-15)
    # stable iff rho > (alpha - 2) / alpha
    thr = (0.4 - 2) / 0.4
    assert abs(psi(thr, c) + 1) < 1e-12


def test_psi_reduction_chain():
    rho = np.linspace(-6, 0, 61)
    a, ah, p0 = 0.7, 0.4, 0.35
    cub = PsiCoefficients(a, ah, p0, 1 - p0, 0.0)
    quad = 1 - a + a * (1 - ah + ah * p0) * rho + a * ah * (1 - p0) * rho**2
    assert np.abs(psi(rho, cub) - quad).max() < 1e-12
    one = PsiCoefficients(a, a, 1.0, 0.0, 0.0)
    assert np.abs(psi(rho, one) - (a * rho + 1 - a)).max() < 1e-12


def test_psi_domain():
    with pytest.raises(ValueError):
        PsiCoefficients(0.5, 0.5, 0.5, 0.2, 0.2)
    with pytest.raises(ValueError):
        PsiCoefficients(0.5, 0.5, 0.0, 0.0, 1.0)


def test_rho_nonpositive(planted, rng):
    net, _ = planted
    for th in (0.05, 0.3, 1.0):
        sue = solve_sue(net, th).aggregate
        rho = sue_rho(net, sue, th)
        assert rho.max() <= 0
        ups = logit_operator_jacobian(net, route_costs(net, sue), th)
        ev = np.linalg.eigvals(ups @ cost_jacobian(net, sue))
        assert np.allclose(np.sort(ev.real), rho, atol=1e-9)


def test_sue_stability_mild_costs_always_stable(planted):
    net, _ = planted
    th = 0.01
    sue = solve_sue(net, th).aggregate
    assert sue_rho(net, sue, th).min() >= -1
    for a in (0.1, 0.5, 0.99):
        for p in ((1.0,), (0.3, 0.7), (0.2, 0.3, 0.5)):
            assert sue_stability(net, sue, fw.ClassProfile(p), LogitParams(a, th)).stable


def test_sue_stability_matches_jacobian(planted, rng):
    net, _ = planted
    for _ in range(15):
        th = rng.uniform(0.05, 2.0)
        a, ah = rng.uniform(0.1, 0.95, 2)
        prof = fw.ClassProfile(rng.dirichlet(np.ones(3)))
        sue = solve_sue(net, th).aggregate
        rep = sue_stability(net, sue, prof, LogitParams(a, th, ah))
        J = logit_jacobian(net, fw.ClassFlowState.proportional(prof, sue), prof, LogitParams(a, th, ah))
        mod = np.abs(np.linalg.eigvals(J)).max()
        if abs(mod - 1) > 1e-6:
            assert rep.stable == (mod < 1)
            assert rep.max_modulus == pytest.approx(mod, abs=1e-7)


def test_sue_stability_mismatched_theta_uses_jacobian(planted):
    net, _ = planted
    sue = solve_sue(net, 0.2).aggregate
    rep = sue_stability(net, sue, fw.ClassProfile((0.5, 0.5)), LogitParams(0.5, 0.2, 0.5, 0.3))
    assert rep.method == "jacobian"


def test_k2_f_min_against_minimiser():
    for a, ah, p0 in [(0.3, 0.5, 0.2), (0.9, 0.2, 0.7), (0.6, 0.95, 0.5)]:
        reg = k2_region_functions(a, ah, p0)
        c = PsiCoefficients(a, ah, p0, 1 - p0)
        _, fmin = golden_min(lambda r: psi(r, c), -50.0, 0.0)
        assert reg.f_min == pytest.approx(fmin, abs=1e-9)


def test_k2_boundary_roots():
    for a, ah, p0 in [(0.3, 0.5, 0.2), (0.9, 0.7, 0.9), (0.5, 0.1, 0.4)]:
        reg = k2_region_functions(a, ah, p0)
        c = PsiCoefficients(a, ah, p0, 1 - p0)
        assert abs(psi(reg.lower, c) - 1) < 1e-9
        assert abs(psi(1.0, c) - 1) < 1e-12
        if reg.split:
            assert abs(psi(reg.f0, c) + 1) < 1e-9
            assert abs(psi(reg.f1, c) + 1) < 1e-9


def test_k2_membership_matches_psi():
    for a, ah, p0 in [(0.9, 0.9, 0.95), (0.3, 0.5, 0.2), (0.95, 0.3, 0.9)]:
        reg = k2_region_functions(a, ah, p0)
        c = PsiCoefficients(a, ah, p0, 1 - p0)
        for r in np.linspace(reg.lower * 1.5, 0, 301):
            v = psi(r, c)
            if min(abs(v - 1), abs(v + 1)) > 1e-9:
                assert reg.contains(r) == (-1 < v < 1)


def test_k2_h_and_g():
    for a in np.arange(0.05, 1.0, 0.05):
        for ah in np.arange(a, 1.0, 0.05):
            assert k2_region_functions(a, ah, 0.5).h >= 2 * (math.sqrt(2) - 1) - 1e-12
    # g is where the two-class threshold meets the single-class one
    a, ah = 0.6, 0.8
    g = k2_region_functions(a, ah, 0.5).g
    assert 1 / ((g - 1) * ah) == pytest.approx((a - 2) / a, rel=1e-12)


def test_k2_domain():
    with pytest.raises(ValueError):
        k2_region_functions(1.0, 0.5, 0.5)
    with pytest.raises(ValueError):
        k2_region_functions(0.5, 0.5, 1.0)
