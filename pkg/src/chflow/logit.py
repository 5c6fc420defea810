"""The cognitive-hierarchy Logit dynamic and its stability analytics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import framework as fw
from .network import Network, cost_jacobian, route_costs


@dataclass(frozen=True)
class LogitParams:
    alpha: float
    theta: float
    alpha_hat: float | None = None
    theta_hat: float | None = None

    def __post_init__(self):
        if self.alpha_hat is None:
            object.__setattr__(self, "alpha_hat", self.alpha)
        if self.theta_hat is None:
            object.__setattr__(self, "theta_hat", self.theta)
        self.acting
        self.predicted

    @property
    def acting(self) -> fw.Rates:
        return fw.Rates(self.alpha, self.theta)

    @property
    def predicted(self) -> fw.Rates:
        return fw.Rates(self.alpha_hat, self.theta_hat)


def choice_probabilities(network: Network, costs, theta: float) -> np.ndarray:
    """Per-OD softmax of ``-theta c``, shifted by the OD minimum cost."""
    c = np.asarray(costs, dtype=float)
    phi = np.empty_like(c)
    for g in network.od_groups:
        u = -theta * (c[g] - c[g].min())
        e = np.exp(u)
        phi[g] = e / e.sum()
    return phi


def logit_choice(network: Network, costs, theta: float, scale: float = 1.0) -> np.ndarray:
    """``eta d_w softmax(-theta c_w)`` for every OD pair."""
    return scale * network.route_demand() * choice_probabilities(network, costs, theta)


def logit_operator_jacobian(network: Network, costs, theta: float, scale: float = 1.0) -> np.ndarray:
    """Derivative of :func:`logit_choice` with respect to the costs (block-diagonal, NSD)."""
    phi = choice_probabilities(network, costs, theta)
    R = phi.size
    out = np.zeros((R, R))
    for g, d in zip(network.od_groups, network.demand):
        f = phi[g]
        out[np.ix_(g, g)] = -theta * scale * d * (np.diag(f) - np.outer(f, f))
    return out


class LogitOperator:
    name = "logit"

    def target(self, network, x, costs, scale, sensitivity):
        return logit_choice(network, costs, sensitivity, scale)

    def partials(self, network, x, costs, scale, sensitivity):
        return None, logit_operator_jacobian(network, costs, sensitivity, scale)


LOGIT = LogitOperator()


def logit_predictions(network: Network, aggregate, profile: fw.ClassProfile, params: LogitParams) -> fw.Prediction:
    return fw.predict(LOGIT, network, profile, aggregate, params.predicted, check=True)


def logit_step(network: Network, state: fw.ClassFlowState, profile: fw.ClassProfile, params: LogitParams) -> fw.ClassFlowState:
    return fw.step(LOGIT, network, profile, state, params.acting, params.predicted)


def logit_simulate(network, initial, profile, params: LogitParams, horizon: int) -> fw.Trajectory:
    return fw.simulate(LOGIT, network, profile, initial, params.acting, params.predicted, horizon)


def logit_map(network, profile, params: LogitParams):
    return fw.one_day_map(LOGIT, network, profile, params.acting, params.predicted)


def logit_jacobian(network: Network, state: fw.ClassFlowState, profile: fw.ClassProfile, params: LogitParams) -> np.ndarray:
    return fw.jacobian(LOGIT, network, profile, state, params.acting, params.predicted).matrix


@dataclass(frozen=True)
class PsiCoefficients:
    alpha: float
    alpha_hat: float
    p0: float
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if min(self.p0, self.p1, self.p2) < 0 or abs(self.p0 + self.p1 + self.p2 - 1) > 1e-12:
            raise ValueError("p0, p1, p2 must lie in the simplex")
        if self.p0 + self.p1 == 0:
            raise ValueError("p0 + p1 must be positive")

    @classmethod
    def from_profile(cls, alpha, alpha_hat, profile: fw.ClassProfile) -> "PsiCoefficients":
        if profile.size > 3:
            raise ValueError("the cubic covers at most three classes")
        p = list(profile.proportions) + [0.0] * (3 - profile.size)
        return cls(alpha, alpha_hat, *p)

    def polynomial(self) -> tuple:
        """Coefficients ``(c3, c2, c1, c0)`` of the cubic in ``rho``."""
        a, ah, p0, p1, p2 = self.alpha, self.alpha_hat, self.p0, self.p1, self.p2
        q = p1 / (p0 + p1)
        c3 = a * ah * ah * p2 * q
        c2 = a * ah - a * ah * p0 - a * ah * ah * p2 * q
        c1 = a * ah * p0 - a * ah + a
        c0 = 1 - a
        return c3, c2, c1, c0


def psi(rho, coeffs: PsiCoefficients):
    """The cubic mapping an eigenvalue of ``Υ D`` at the SUE to an eigenvalue of ``JΦ``.

    Plain arithmetic, so exact types such as ``Fraction`` pass through.
    """
    c3, c2, c1, c0 = coeffs.polynomial()
    return ((c3 * rho + c2) * rho + c1) * rho + c0


def sue_rho(network: Network, sue_flow, theta: float) -> np.ndarray:
    """Real eigenvalues (all <= 0) of ``Υ D`` at the SUE.

    Computed as ``-eig(S D S)`` with ``S = (-Υ)^{1/2}``, which is similar
    to ``-Υ D`` and symmetric.
    """
    x = np.asarray(sue_flow, dtype=float)
    ups = logit_operator_jacobian(network, route_costs(network, x), theta)
    w, v = np.linalg.eigh(-ups)
    s = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    rho = -np.linalg.eigvalsh(s @ cost_jacobian(network, x) @ s)
    rho[np.abs(rho) < 1e-12] = 0.0
    return np.sort(rho)


@dataclass(frozen=True, eq=False)
class SueStabilityReport:
    stable: bool
    rho: np.ndarray
    psi_values: np.ndarray
    method: str
    max_modulus: float

    def to_dict(self) -> dict:
        return {
            "stable": self.stable,
            "method": self.method,
            "max_modulus": self.max_modulus,
            "rho": self.rho.tolist(),
            "psi": self.psi_values.tolist(),
        }


def sue_stability(network: Network, sue_flow, profile: fw.ClassProfile, params: LogitParams) -> SueStabilityReport:
    """Local asymptotic stability of the SUE.

    With ``theta_hat == theta`` and at most three classes the verdict is
    ``-1 < psi(rho_i) < 1`` for all ``rho_i``; otherwise the spectrum of
    the full Jacobian at the proportional split decides.
    """
    x = np.asarray(sue_flow, dtype=float)
    if params.theta_hat == params.theta and profile.size <= 3:
        rho = sue_rho(network, x, params.theta)
        vals = np.array([psi(r, PsiCoefficients.from_profile(params.alpha, params.alpha_hat, profile)) for r in rho])
        stable = bool(np.all((vals > -1) & (vals < 1)))
        mod = max(float(np.abs(vals).max()), 1 - params.alpha if profile.size > 1 else 0.0)
        return SueStabilityReport(stable, rho, vals, "psi", mod)
    state = fw.ClassFlowState.proportional(profile, x)
    ev = np.linalg.eigvals(logit_jacobian(network, state, profile, params))
    mod = float(np.abs(ev).max())
    return SueStabilityReport(mod < 1, np.array([]), np.array([]), "jacobian", mod)


@dataclass(frozen=True)
class K2Region:
    """Thresholds describing the stable ``rho`` set for two classes.

    ``lower`` is ``1/((p0-1) alpha_hat)``, the non-unit root of ``psi = 1``;
    ``f0``/``f1`` are the roots of ``psi = -1`` (``nan`` when absent) and
    ``f_min`` is the minimum of the quadratic over ``rho``.
    """

    alpha: float
    alpha_hat: float
    p0: float
    lower: float
    f0: float
    f1: float
    f_min: float
    h: float
    g: float

    @property
    def split(self) -> bool:
        return self.f_min < -1

    def contains(self, rho: float) -> bool:
        """Whether ``psi(rho)`` lies in (-1, 1) for ``rho <= 0``.

        Endpoints are excluded; ``rho = 0`` (``psi = 1 - alpha``) is inside.
        """
        if rho > 0:
            raise ValueError("rho must be nonpositive")
        if not rho > self.lower:
            return False
        if self.split:
            return rho < self.f0 or rho > self.f1
        return True


def k2_h(alpha: float, alpha_hat: float) -> float:
    return 2 * math.sqrt(2) * math.sqrt(-(alpha - 2) / (alpha**2 * alpha_hat**2)) + (
        alpha * alpha_hat + alpha - 4
    ) / (alpha * alpha_hat)


def k2_g(alpha: float, alpha_hat: float) -> float:
    return (alpha * alpha_hat + alpha - 2 * alpha_hat) / (alpha * alpha_hat - 2 * alpha_hat)


def k2_region_functions(alpha: float, alpha_hat: float, p0: float) -> K2Region:
    if not (0 < alpha < 1 and 0 < alpha_hat < 1):
        raise ValueError("alpha and alpha_hat must lie in (0, 1)")
    if not 0 < p0 < 1:
        raise ValueError("p0 must lie in (0, 1)")
    a, ah = alpha, alpha_hat
    lower = 1.0 / ((p0 - 1) * ah)
    f_min = 1 - a + a * (1 - ah + ah * p0) ** 2 / (4 * ah * (p0 - 1))
    disc = (a * (1 + ah - ah * p0) ** 2 + 8 * ah * (p0 - 1)) / (a * ah**2 * (p0 - 1) ** 2)
    if disc >= 0:
        r = math.sqrt(disc)
        f0 = 0.5 * (-r + lower + 1)
        f1 = 0.5 * (r + lower + 1)
    else:
        f0 = f1 = math.nan
    return K2Region(a, ah, p0, lower, f0, f1, f_min, k2_h(a, ah), k2_g(a, ah))
