"""Reference equilibria (DUE, SUE), fixed-point residuals and fixed-point detection."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import framework as fw
from .feasible_set import FeasibleSet, project, vi_residual
from .logit import LOGIT, LogitParams, logit_choice, logit_operator_jacobian
from .network import Network, cost_jacobian, link_flows, route_costs
from .ntp import NTP, NtpParams

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, result: "EquilibriumResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True, eq=False)
class EquilibriumResult:
    kind: str  # DUE | SUE | MPE | MPSE
    aggregate: np.ndarray
    residual: float
    iterations: int
    converged: bool
    class_flows: np.ndarray | None = None

    def split(self, profile: fw.ClassProfile) -> fw.ClassFlowState:
        """Proportional per-class split of the aggregate."""
        return fw.ClassFlowState.proportional(profile, self.aggregate)

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "aggregate": self.aggregate.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "converged": self.converged,
        }
        if self.class_flows is not None:
            out["class_flows"] = self.class_flows.tolist()
        return out

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def read_json(cls, path) -> "EquilibriumResult":
        with open(path) as fh:
            d = json.load(fh)
        cf = d.get("class_flows")
        return cls(
            d["kind"],
            np.asarray(d["aggregate"]),
            d["residual"],
            d["iterations"],
            d["converged"],
            None if cf is None else np.asarray(cf),
        )


def beckmann(network: Network, x) -> float:
    """Sum over links of the integrated BPR travel time."""
    v = link_flows(network, x)
    p = network.bpr_power
    t0, cap = network.t0, network.capacity
    return float(np.sum(t0 * (v + network.bpr_coef * cap * (v / cap) ** (p + 1) / (p + 1))))


def solve_due(network: Network, tol: float = 1e-8, max_iter: int = 100_000, x0=None) -> EquilibriumResult:
    """Deterministic UE by projected gradient on the Beckmann objective.

    Each iteration takes ``x <- P[x - s c(x)]`` with a backtracking step
    ``s`` that is allowed to grow again after accepted steps.  A Newton step
    on the current set of used routes is tried first and kept when it stays
    feasible and halves the residual; the line search cannot resolve
    objective changes near roundoff, so this is what reaches tight
    tolerances.  Converged when ``||x - P[x - c(x)]|| < tol``.
    """
    fs = FeasibleSet.of(network)
    x = fs.check(x0) if x0 is not None else network.route_demand() / _od_sizes(network)
    d = cost_jacobian(network, x)
    s = 1.0 / max(float(np.abs(d).sum(axis=1).max()), 1e-12) if d.any() else 1.0
    s = max(s, 1e-6)
    f = beckmann(network, x)
    res = np.inf
    for it in range(1, max_iter + 1):
        c = route_costs(network, x)
        res = vi_residual(fs, x, c, 1.0)
        if res < tol:
            return EquilibriumResult("DUE", x, res, it - 1, True)
        y = _newton_on_support(network, x, c)
        if y is not None:
            ry = vi_residual(fs, y, route_costs(network, y), 1.0)
            if ry < 0.5 * res:
                x, f = y, beckmann(network, y)
                continue
        while True:
            y, _ = project(fs, x - s * c)
            fy = beckmann(network, y)
            step = y - x
            if fy <= f + c @ step + (step @ step) / (2 * s) + 1e-12 * abs(f):
                break
            s *= 0.5
        x, f = y, fy
        s *= 1.5
    result = EquilibriumResult("DUE", x, res, max_iter, False)
    raise ConvergenceError(f"DUE solver stopped after {max_iter} iterations (residual {res:.3g})", result)


def _newton_on_support(network: Network, x: np.ndarray, c: np.ndarray) -> np.ndarray | None:
    """Newton step equalising costs on the used routes of each OD, or None if it leaves the set.

    Solves ``c_E + D_EE dx - B mu = 0, B^T dx = 0`` in the least-squares sense
    since ``D_EE`` is singular whenever routes share all their links.
    """
    used = x > 1e-12 * float(network.demand.max())
    E = np.flatnonzero(used)
    B = network.od_route.T[E]  # (|E|, W)
    B = B[:, B.any(axis=0)]
    n, w = len(E), B.shape[1]
    kkt = np.zeros((n + w, n + w))
    kkt[:n, :n] = cost_jacobian(network, x)[np.ix_(E, E)]
    kkt[:n, n:] = -B
    kkt[n:, :n] = B.T
    rhs = np.concatenate([-c[E], np.zeros(w)])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    y = x.copy()
    y[E] += sol[:n]
    if np.any(y < 0):
        return None
    return y


def _od_sizes(network: Network) -> np.ndarray:
    sizes = np.empty(network.n_routes)
    for g in network.od_groups:
        sizes[g] = len(g)
    return sizes


def sue_residual(network: Network, x, theta: float) -> float:
    return float(np.linalg.norm(x - logit_choice(network, route_costs(network, x), theta)))


def solve_sue(network: Network, theta: float, tol: float = 1e-10, max_iter: int = 10_000, x0=None) -> EquilibriumResult:
    """Logit SUE ``x = Phi(c(x))`` by damped Newton steps on ``x - Phi(c(x))``.

    The Newton matrix ``I - Υ D`` has eigenvalues ``1 - rho >= 1`` so it
    is always invertible; steps are halved until the residual decreases and
    the iterate stays positive.
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    x = np.asarray(x0, dtype=float) if x0 is not None else network.route_demand() / _od_sizes(network)
    eye = np.eye(network.n_routes)

    def residual_vec(z):
        return z - logit_choice(network, route_costs(network, z), theta)

    F = residual_vec(x)
    res = float(np.linalg.norm(F))
    for it in range(1, max_iter + 1):
        if res < tol:
            return EquilibriumResult("SUE", x, res, it - 1, True)
        c = route_costs(network, x)
        M = eye - logit_operator_jacobian(network, c, theta) @ cost_jacobian(network, x)
        dx = np.linalg.solve(M, -F)
        lam = 1.0
        while lam > 1e-12:
            y = x + lam * dx
            if np.all(y > 0):
                Fy = residual_vec(y)
                ry = float(np.linalg.norm(Fy))
                if ry < res:
                    break
            lam *= 0.5
        else:
            # Newton direction failed; fall back to a plain fixed-point step
            y = x - F
            Fy = residual_vec(y)
            ry = float(np.linalg.norm(Fy))
        x, F, res = y, Fy, ry
    result = EquilibriumResult("SUE", x, res, max_iter, False)
    raise ConvergenceError(f"SUE solver stopped after {max_iter} iterations (residual {res:.3g})", result)


def dynamic_of(params):
    """The target operator matching a parameter record."""
    if isinstance(params, NtpParams):
        return NTP
    if isinstance(params, LogitParams):
        return LOGIT
    raise TypeError(f"unknown parameter type {type(params).__name__}")


def mpe_residual(network: Network, state: fw.ClassFlowState, profile: fw.ClassProfile, params) -> float:
    """``||x - step(x)||_inf`` for the NTP or Logit dynamic, chosen from ``params``."""
    state.check(network, profile)
    op = dynamic_of(params)
    nxt = fw.step(op, network, profile, state, params.acting, params.predicted)
    return float(np.abs(nxt.flows - state.flows).max())


def detect_fixed_point(trajectory, tol: float = 1e-8, window: int = 5) -> int | None:
    """First day from which the per-day change stays below ``tol`` for ``window`` days.

    Accepts a :class:`Trajectory` or any array with days on the first axis.
    """
    flows = trajectory.flows if isinstance(trajectory, fw.Trajectory) else np.asarray(trajectory)
    if len(flows) == 0:
        raise ValueError("empty trajectory")
    if window < 1:
        raise ValueError("window must be at least 1")
    T = len(flows) - 1
    if T == 0:
        return 0
    change = np.abs(np.diff(flows, axis=0)).reshape(T, -1).max(axis=1)
    quiet = change < tol
    w = min(window, T)
    for t in range(T - w + 1):
        if quiet[t : t + w].all():
            return t
    return None


def polish_fixed_point(
    network: Network,
    state: fw.ClassFlowState,
    profile: fw.ClassProfile,
    params,
    tol: float = 1e-12,
    max_iter: int = 200_000,
) -> tuple[fw.ClassFlowState, float]:
    """Keep iterating the day-to-day map until the residual drops below ``tol``."""
    op = dynamic_of(params)
    res = np.inf
    for _ in range(max_iter):
        nxt = fw.step(op, network, profile, state, params.acting, params.predicted)
        res = float(np.abs(nxt.flows - state.flows).max())
        state = fw.ClassFlowState(state.day, nxt.flows)
        if res < tol:
            break
    return state, res
