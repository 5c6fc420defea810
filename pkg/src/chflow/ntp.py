"""The cognitive-hierarchy network tatonnement process (CH-NTP).

Each class moves toward ``P[x - gamma c(pi)]``, the projection of its own flow
stepped against the costs it predicts for tomorrow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import framework as fw
from .feasible_set import FeasibleSet, interior_projection_jacobian, project, projection_jacobian
from .network import Network, cost_jacobian

ZERO_EIG = 1e-10


class BoundaryEquilibriumError(ValueError):
    """The analytic criteria need every route to carry flow at the DUE."""


@dataclass(frozen=True)
class NtpParams:
    alpha: float
    gamma: float
    alpha_hat: float | None = None
    gamma_hat: float | None = None

    def __post_init__(self):
        if self.alpha_hat is None:
            object.__setattr__(self, "alpha_hat", self.alpha)
        if self.gamma_hat is None:
            object.__setattr__(self, "gamma_hat", self.gamma)
        # range checks live in Rates
        self.acting
        self.predicted

    @property
    def acting(self) -> fw.Rates:
        return fw.Rates(self.alpha, self.gamma)

    @property
    def predicted(self) -> fw.Rates:
        return fw.Rates(self.alpha_hat, self.gamma_hat)


class NtpOperator:
    name = "ntp"

    def target(self, network, x, costs, scale, sensitivity):
        return ntp_target(network, x, costs, sensitivity, scale)

    def partials(self, network, x, costs, scale, sensitivity):
        z = np.asarray(x) - sensitivity * np.asarray(costs)
        q = projection_jacobian(FeasibleSet.of(network, scale), z)
        return q, -sensitivity * q


NTP = NtpOperator()


def ntp_target(network: Network, x, costs, gamma: float, scale: float = 1.0, check: bool = False) -> np.ndarray:
    """``P_{Omega_eta}[x - gamma c]``."""
    fs = FeasibleSet.of(network, scale)
    x = fs.check(x) if check else np.asarray(x, dtype=float)
    y, _ = project(fs, x - gamma * np.asarray(costs, dtype=float))
    return y


def ntp_predictions(network: Network, aggregate, profile: fw.ClassProfile, params: NtpParams) -> fw.Prediction:
    return fw.predict(NTP, network, profile, aggregate, params.predicted, check=True)


def ntp_step(network: Network, state: fw.ClassFlowState, profile: fw.ClassProfile, params: NtpParams) -> fw.ClassFlowState:
    return fw.step(NTP, network, profile, state, params.acting, params.predicted)


def ntp_simulate(network, initial, profile, params: NtpParams, horizon: int) -> fw.Trajectory:
    return fw.simulate(NTP, network, profile, initial, params.acting, params.predicted, horizon)


def ntp_map(network, profile, params: NtpParams):
    return fw.one_day_map(NTP, network, profile, params.acting, params.predicted)


@dataclass(frozen=True, eq=False)
class NtpJacobianBlocks:
    """Projection Jacobians, cost Jacobians and the assembled ``JP``.

    ``Q[k]`` is the acting projection Jacobian of class ``k``,
    ``Q_hat[(k, h)]`` the one inside the ``h`` term of the class-``k``
    prediction, and ``D[k]`` the cost Jacobian at ``pi^k``.
    """

    Q: list
    Q_hat: dict
    D: list
    prediction_jacobians: list
    JP: np.ndarray
    n_routes: int

    def block(self, k: int, j: int) -> np.ndarray:
        R = self.n_routes
        return self.JP[k * R : (k + 1) * R, j * R : (j + 1) * R]


def ntp_jacobian(network: Network, state: fw.ClassFlowState, profile: fw.ClassProfile, params: NtpParams) -> NtpJacobianBlocks:
    parts = fw.jacobian(NTP, network, profile, state, params.acting, params.predicted)
    q_hat = {key: yx for key, (yx, _) in parts.prediction_partials.items()}
    return NtpJacobianBlocks(
        parts.target_x, q_hat, parts.cost_jacobians, parts.prediction_jacobians, parts.matrix, network.n_routes
    )


def assemble_ntp_jacobian(
    profile: fw.ClassProfile,
    params: NtpParams,
    Q,
    D,
    Q_hat: dict | None = None,
) -> NtpJacobianBlocks:
    """Assemble ``JP`` from given projection and cost Jacobians.

    ``Q`` and ``D`` are either single matrices shared by every class or
    per-class lists; ``Q_hat`` defaults to ``Q`` of the predicted class.
    Useful for studying ``JP`` at a hypothetical equilibrium where only
    ``Q`` and ``D`` matter.
    """
    K = profile.size
    Q = [np.asarray(Q)] * K if np.ndim(Q) == 2 else [np.asarray(m) for m in Q]
    D = [np.asarray(D)] * K if np.ndim(D) == 2 else [np.asarray(m) for m in D]
    if Q_hat is None:
        Q_hat = {}
        for k in range(1, K):
            for h, qh in enumerate(fw.belief_proportions(profile, k)):
                if qh > 0:
                    Q_hat[(k, h)] = Q[h]
    partials = {key: (m, -params.gamma_hat * m) for key, m in Q_hat.items()}
    tx = [None if pk == 0 else Q[k] for k, pk in enumerate(profile.proportions)]
    tc = [None if pk == 0 else -params.gamma * Q[k] for k, pk in enumerate(profile.proportions)]
    J, Pi = fw.assemble_jacobian(profile, params.alpha, params.alpha_hat, tx, tc, partials, D)
    return NtpJacobianBlocks(Q, dict(Q_hat), D, Pi, J, J.shape[0] // K)


def _require_interior(network: Network, due_flow, tol: float = 1e-9) -> np.ndarray:
    x = np.asarray(due_flow, dtype=float)
    FeasibleSet.of(network).check(x, tol=1e-6)
    scale = tol * max(1.0, float(network.demand.max()))
    if np.any(x <= scale):
        unused = [network.routes[i].id for i in np.flatnonzero(x <= scale)]
        raise BoundaryEquilibriumError(
            f"routes {unused} carry no flow at the DUE; use the full Jacobian (ntp_jacobian) instead"
        )
    return x


def qbar(network: Network) -> np.ndarray:
    return interior_projection_jacobian(FeasibleSet.of(network))


def matrix_A(network: Network, due_flow, gamma: float) -> np.ndarray:
    """``Q̄ (I - gamma D*)``."""
    q = qbar(network)
    d = cost_jacobian(network, due_flow)
    return q @ (np.eye(network.n_routes) - gamma * d)


def projected_cost_eigenvalues(Q: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Eigenvalues of ``Q D`` via the symmetric form ``Q D Q``.

    With ``Q`` an orthogonal projector, ``Q D`` and ``Q D Q`` share their
    spectrum, and the latter is symmetric PSD so the values come out real and
    sorted.  Values below ``ZERO_EIG`` in modulus are snapped to zero.
    """
    beta = np.linalg.eigvalsh(Q @ D @ Q)
    beta[np.abs(beta) < ZERO_EIG] = 0.0
    return beta


def qd_eigenvalues(network: Network, due_flow) -> np.ndarray:
    return projected_cost_eigenvalues(qbar(network), cost_jacobian(network, due_flow))


def gamma_bar(network: Network, due_flow) -> float:
    """Critical sensitivity ``2 / max beta`` over eigenvalues of ``Q̄ D*``."""
    beta = qd_eigenvalues(network, _require_interior(network, due_flow))
    if beta.max() <= 0:
        raise ValueError("Q̄D* has no positive eigenvalue; there is no finite threshold")
    return 2.0 / float(beta.max())


@dataclass(frozen=True, eq=False)
class AnalyticVerdict:
    """Outcome of an analytic stability criterion.

    ``values`` are the per-eigenvalue quantities whose moduli must stay below
    one (``1 - gamma beta`` or the quadratic in ``beta``), aligned with
    ``eigenvalues``; zero eigenvalues are reported but excluded.
    """

    stable: bool
    eigenvalues: np.ndarray
    values: np.ndarray
    max_modulus: float

    def to_dict(self) -> dict:
        return {
            "stable": self.stable,
            "eigenvalues": self.eigenvalues.tolist(),
            "values": self.values.tolist(),
            "max_modulus": self.max_modulus,
        }


def _verdict(beta: np.ndarray, values: np.ndarray) -> AnalyticVerdict:
    live = beta != 0
    mod = float(np.abs(values[live]).max()) if live.any() else 0.0
    return AnalyticVerdict(bool(mod < 1.0), beta, values, mod)


def eq_gamma_from_beta(beta, gamma: float) -> AnalyticVerdict:
    beta = np.asarray(beta, dtype=float)
    return _verdict(beta, 1.0 - gamma * beta)


def neq_gamma_from_beta(beta, gamma: float, gamma_hat: float) -> AnalyticVerdict:
    beta = np.asarray(beta, dtype=float)
    return _verdict(beta, gamma * gamma_hat * beta**2 - 2.0 * gamma * beta + 1.0)


def stability_eq_gamma(network: Network, due_flow, gamma: float) -> AnalyticVerdict:
    """Interior-DUE criterion when predictions use the true sensitivity.

    Stable iff every nonzero eigenvalue of ``Q̄(I - gamma D*)`` has modulus
    below one; the verdict does not depend on the class profile.
    """
    x = _require_interior(network, due_flow)
    return eq_gamma_from_beta(qd_eigenvalues(network, x), gamma)


def stability_neq_gamma(network: Network, due_flow, gamma: float, gamma_hat: float) -> AnalyticVerdict:
    """Two-class interior criterion with full inertia: ``|gamma gamma_hat beta^2 - 2 gamma beta + 1| < 1``."""
    x = _require_interior(network, due_flow)
    return neq_gamma_from_beta(qd_eigenvalues(network, x), gamma, gamma_hat)


def two_route_eigenvalue(a: float, b: float, c: float, gamma: float, gamma_hat: float) -> float:
    """The non-trivial ``JP`` eigenvalue for a single two-route OD with ``D* = [[a, b], [b, c]]``."""
    s = a - 2.0 * b + c
    return 0.25 * gamma * gamma_hat * s * s - gamma * s + 1.0
