import math

import numpy as np
import pytest

from chflow import framework as fw
from chflow.equilibrium import (
    ConvergenceError,
    EquilibriumResult,
    beckmann,
    detect_fixed_point,
    mpe_residual,
    polish_fixed_point,
    solve_due,
    solve_sue,
    sue_residual,
)
from chflow.logit import LogitParams
from chflow.network import build_network, load_scenario, route_costs
from chflow.ntp import NtpParams, ntp_simulate

from conftest import random_interior_state
from oracles import bisect


def test_toy_due(toy):
    res = solve_due(toy, tol=1e-12)
    assert res.converged and res.kind == "DUE"
    assert np.allclose(res.aggregate, [2.0, 1.0], atol=1e-10)
    assert np.allclose(route_costs(toy, res.aggregate), [3.0, 3.0], atol=1e-10)


def test_boundary_due():
    # route 2 is never worth using: 10 > 1 + 3
    net = build_network([(1, 1.0, 1.0), (2, 10.0, 1.0)], [(1, 3.0, [[1], [2]])], bpr_coef=1.0, bpr_power=1.0)
    res = solve_due(net, tol=1e-12)
    assert np.allclose(res.aggregate, [3.0, 0.0], atol=1e-10)


def test_planted_due_recovered(planted):
    net, x = planted
    res = solve_due(net, tol=1e-10)
    assert np.abs(res.aggregate - x).max() < 1e-6 * x.max()


def test_due_minimises_beckmann(planted, rng):
    net, _ = planted
    x = solve_due(net, tol=1e-10).aggregate
    f = beckmann(net, x)
    for _ in range(100):
        w = np.concatenate([rng.dirichlet(np.ones(len(g))) * d for g, d in zip(net.od_groups, net.demand)])
        assert f <= beckmann(net, w) + 1e-9


def test_beckmann_gradient_is_cost(planted, rng):
    net, _ = planted
    x = rng.uniform(5, 30, net.n_routes)
    h = 1e-5
    grad = [(beckmann(net, x + h * e) - beckmann(net, x - h * e)) / (2 * h) for e in np.eye(net.n_routes)]
    assert np.allclose(grad, route_costs(net, x), rtol=1e-6)


def test_bundled_placeholder_dues():
    b = solve_due(load_scenario("braess"))
    assert np.allclose(b.aggregate, [268 / 3] * 3, atol=1e-6)
    z = solve_due(load_scenario("zhang"))
    assert np.allclose(z.aggregate, [20, 20, 25, 25, 25, 25, 20, 20], atol=1e-6)


def test_due_iteration_budget(planted):
    net, _ = planted
    with pytest.raises(ConvergenceError) as info:
        solve_due(net, tol=1e-14, max_iter=2)
    assert not info.value.result.converged


def test_toy_sue_against_bisection(toy):
    for theta in (0.1, 1.0, 5.0):
        res = solve_sue(toy, theta)
        # x1 solves x1 = 3 / (1 + exp(-theta (c2 - c1)))
        def g(x1):
            c1, c2 = 1 + x1, 2 + 3 - x1
            return x1 - 3 / (1 + math.exp(-theta * (c2 - c1)))

        x1 = bisect(g, 0.0, 3.0)
        assert res.aggregate[0] == pytest.approx(x1, abs=1e-9)
        assert res.aggregate.sum() == pytest.approx(3.0, abs=1e-12)


def test_sue_symmetric_network():
    net = build_network([(1, 2.0, 3.0), (2, 2.0, 3.0), (3, 2.0, 3.0)], [(1, 9.0, [[1], [2], [3]])])
    res = solve_sue(net, 0.4)
    assert np.allclose(res.aggregate, [3.0, 3.0, 3.0], atol=1e-10)


def test_sue_tends_to_due(planted):
    net, x = planted
    res = solve_sue(net, 200.0, tol=1e-9)
    assert np.abs(res.aggregate - x).max() < 0.05 * x.max()


def test_sue_residual_small(planted):
    net, _ = planted
    for th in (0.01, 0.2, 1.5):
        res = solve_sue(net, th)
        assert sue_residual(net, res.aggregate, th) < 1e-10
    with pytest.raises(ValueError):
        solve_sue(net, 0.0)


def test_due_is_ntp_fixed_point(planted):
    net, x = planted
    for p in ((1.0,), (0.5, 0.5), (0.2, 0.3, 0.5)):
        prof = fw.ClassProfile(p)
        state = fw.ClassFlowState.proportional(prof, x)
        assert mpe_residual(net, state, prof, NtpParams(0.7, 0.5, 0.9, 1.3)) < 1e-10


def test_sue_is_logit_fixed_point(planted):
    net, _ = planted
    sue = solve_sue(net, 0.25).aggregate
    prof = fw.ClassProfile((0.2, 0.3, 0.5))
    state = fw.ClassFlowState.proportional(prof, sue)
    assert mpe_residual(net, state, prof, LogitParams(0.4, 0.25, 0.8)) < 1e-10
    # with a mismatched prediction the SUE is generally not a fixed point
    assert mpe_residual(net, state, prof, LogitParams(0.4, 0.25, 0.8, 1.0)) > 1e-6


def test_non_due_state_has_residual(planted, rng):
    net, _ = planted
    prof = fw.ClassProfile((0.5, 0.5))
    state = random_interior_state(net, prof, rng)
    assert mpe_residual(net, state, prof, NtpParams(1.0, 0.3)) > 1e-3


def test_mpe_residual_rejects_bad_state(planted):
    net, x = planted
    prof = fw.ClassProfile((0.5, 0.5))
    with pytest.raises(ValueError):
        mpe_residual(net, fw.ClassFlowState(0, np.vstack([x, x])), prof, NtpParams(1.0, 0.1))


def test_non_due_mpe_on_braess():
    net = load_scenario("braess")
    due = solve_due(net).aggregate
    prof = fw.ClassProfile((0.5, 0.5))
    params = NtpParams(0.3, 1.4)
    traj = ntp_simulate(net, fw.ClassFlowState.proportional(prof, [150.0, 80.0, 38.0]), prof, params, 400)
    assert detect_fixed_point(traj, 1e-9) is not None
    state, res = polish_fixed_point(net, traj.state(traj.horizon), prof, params)
    assert res < 1e-10
    assert mpe_residual(net, state, prof, params) < 1e-10
    assert np.abs(state.aggregate - due).max() > 10


def test_detect_fixed_point_cases():
    const = np.ones((10, 3))
    assert detect_fixed_point(const, window=5) == 0
    ramp = np.concatenate([np.linspace(0, 1, 6)[:, None] * np.ones((1, 2)), np.ones((8, 2))])
    assert detect_fixed_point(ramp, window=5) == 5
    osc = np.array([[(-1) ** t, 0.0] for t in range(30)])
    assert detect_fixed_point(osc) is None
    assert detect_fixed_point(np.ones((1, 2))) == 0
    with pytest.raises(ValueError):
        detect_fixed_point(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        detect_fixed_point(const, window=0)


def test_result_json_round_trip(tmp_path, toy):
    res = solve_due(toy)
    res.write_json(tmp_path / "e.json")
    again = EquilibriumResult.read_json(tmp_path / "e.json")
    assert again.kind == "DUE" and np.array_equal(again.aggregate, res.aggregate)
    split = res.split(fw.ClassProfile((0.25, 0.75)))
    assert np.allclose(split.flows.sum(axis=0), res.aggregate)
