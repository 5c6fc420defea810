"""Projection onto the demand-scaled route-flow polytope and its Jacobian.

The feasible set for scale ``eta`` is the product over OD pairs of simplices
``{x_w >= 0, sum(x_w) = eta * d_w}``.  Projection is done OD by OD with the
sort-based water-filling rule ``x = max(z - tau, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network

ACTIVE_TOL = 1e-12


class InfeasibleFlowError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeasibleSet:
    groups: tuple[np.ndarray, ...]
    demand: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if np.any(np.asarray(self.demand) <= 0):
            raise ValueError("demands must be positive")

    @classmethod
    def of(cls, network: Network, scale: float = 1.0) -> "FeasibleSet":
        return cls(network.od_groups, network.demand, float(scale))

    @property
    def n(self) -> int:
        return int(sum(len(g) for g in self.groups))

    @property
    def totals(self) -> np.ndarray:
        return self.scale * np.asarray(self.demand, dtype=float)

    def scaled(self, scale: float) -> "FeasibleSet":
        return FeasibleSet(self.groups, self.demand, float(scale))

    def is_feasible(self, x, tol: float = 1e-8) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,) or np.any(x < -tol):
            return False
        sums = np.array([x[g].sum() for g in self.groups])
        return bool(np.all(np.abs(sums - self.totals) <= tol * np.maximum(1.0, self.totals)))

    def check(self, x, tol: float = 1e-8) -> np.ndarray:
        if not self.is_feasible(x, tol):
            raise InfeasibleFlowError("route flows are not in the scaled feasible set")
        return np.asarray(x, dtype=float)


@dataclass(frozen=True, eq=False)
class ActiveSet:
    """Per-OD route indices (global) carrying strictly positive projected flow."""

    members: tuple[np.ndarray, ...]

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        for idx in self.members:
            m[idx] = True
        return m


def _project_rows(z: np.ndarray, total: np.ndarray) -> np.ndarray:
    """Water-filling projection of each row of ``z`` onto ``{x>=0, sum x = total}``."""
    n = z.shape[1]
    u = -np.sort(-z, axis=1)
    css = np.cumsum(u, axis=1) - total[:, None]
    j = np.arange(1, n + 1)
    cond = u - css / j > 0
    rho = n - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(len(z)), rho - 1] / rho
    x = np.maximum(z - tau[:, None], 0.0)
    x[x <= ACTIVE_TOL] = 0.0
    active = x > 0
    # restore the exact total on the active coordinates
    gap = total - x.sum(axis=1)
    x += active * (gap / active.sum(axis=1))[:, None]
    return x


def project(fs: FeasibleSet, z) -> tuple[np.ndarray, ActiveSet]:
    """Euclidean projection of ``z`` onto the scaled feasible set."""
    z = np.asarray(z, dtype=float)
    if z.shape != (fs.n,):
        raise ValueError(f"expected vector of length {fs.n}")
    x = np.empty_like(z)
    members = []
    for g, total in zip(fs.groups, fs.totals):
        xg = _project_rows(z[g][None, :], np.array([total]))[0]
        x[g] = xg
        members.append(g[xg > ACTIVE_TOL])
    return x, ActiveSet(tuple(members))


def project_many(fs: FeasibleSet, z) -> np.ndarray:
    """Project every row of a ``(m, R)`` array; vectorised over rows."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    x = np.empty_like(z)
    for g, total in zip(fs.groups, fs.totals):
        x[:, g] = _project_rows(z[:, g], np.full(len(z), total))
    return x


def jacobian_from_active(n: int, active: ActiveSet) -> np.ndarray:
    """Block-diagonal ``Diag(1_E) - 1_E 1_Eᵀ/|E|`` for each OD pair."""
    q = np.zeros((n, n))
    for idx in active.members:
        q[idx, idx] = 1.0
        q[np.ix_(idx, idx)] -= 1.0 / len(idx)
    return q


def projection_jacobian(fs: FeasibleSet, z) -> np.ndarray:
    """Generalised Jacobian of :func:`project` at ``z`` (one-sided at kinks)."""
    _, active = project(fs, z)
    return jacobian_from_active(fs.n, active)


def interior_projection_jacobian(fs: FeasibleSet) -> np.ndarray:
    """The all-routes-active form, ``I - 11ᵀ/|R_w|`` per OD block."""
    return jacobian_from_active(fs.n, ActiveSet(tuple(fs.groups)))


def vi_residual(fs: FeasibleSet, x, c, gamma: float) -> float:
    """Natural-map residual ``||x - P[x - gamma c]||``; zero iff ``x`` solves the VI."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    x = fs.check(x)
    y, _ = project(fs, x - gamma * np.asarray(c, dtype=float))
    return float(np.linalg.norm(x - y))
