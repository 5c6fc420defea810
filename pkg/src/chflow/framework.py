"""Cognitive-hierarchy day-to-day machinery shared by the NTP and Logit dynamics.

A concrete dynamic supplies a one-step *target* operator ``y(x, c; eta, zeta)``
mapping a class flow ``x`` in the ``eta``-scaled feasible set and the costs
``c`` that class expects into a target flow in the same set.  Everything else
(belief proportions, the k-step prediction recursion, the exponential moving
average update and the chain-rule Jacobian of the one-day map) lives here.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .feasible_set import FeasibleSet
from .network import Network, cost_jacobian, route_costs

log = logging.getLogger(__name__)

PROFILE_TOL = 1e-12


class DivergenceError(FloatingPointError):
    """A trajectory produced non-finite flows."""

    def __init__(self, day: int, message: str = ""):
        self.day = day
        super().__init__(message or f"trajectory diverged on day {day}")


@dataclass(frozen=True)
class Rates:
    """Inertia ``alpha`` and the dynamic's sensitivity (gamma or theta)."""

    alpha: float
    sensitivity: float

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.sensitivity > 0:
            raise ValueError(f"sensitivity must be positive, got {self.sensitivity}")


class TargetOperator(Protocol):
    name: str

    def target(self, network: Network, x: np.ndarray, costs: np.ndarray, scale: float, sensitivity: float) -> np.ndarray:
        ...

    def partials(
        self, network: Network, x: np.ndarray, costs: np.ndarray, scale: float, sensitivity: float
    ) -> tuple[np.ndarray | None, np.ndarray]:
        """Return ``(dy/dx, dy/dc)``; ``dy/dx`` is ``None`` when y ignores x."""
        ...


@dataclass(frozen=True)
class ClassProfile:
    proportions: tuple[float, ...]

    def __init__(self, proportions: Sequence[float]):
        p = tuple(float(v) for v in proportions)
        if not p:
            raise ValueError("profile needs at least one class")
        if any(v < 0 for v in p):
            raise ValueError("class proportions must be nonnegative")
        if abs(sum(p) - 1.0) > PROFILE_TOL:
            raise ValueError(f"class proportions must sum to 1, got {sum(p)!r}")
        if p[0] <= 0:
            raise ValueError("the 0-step share must be positive")
        object.__setattr__(self, "proportions", p)

    @classmethod
    def from_levels(cls, k: int, p0: float = 1.0, p1: float | None = None) -> "ClassProfile":
        """Profile for ``k`` classes from the leading shares (the last absorbs the rest)."""
        if k == 1:
            return cls((1.0,))
        if k == 2:
            return cls((p0, _remainder(1.0 - p0)))
        if k == 3:
            if p1 is None:
                raise ValueError("p1 is required for three classes")
            return cls((p0, p1, _remainder(1.0 - p0 - p1)))
        raise ValueError("from_levels supports k in {1, 2, 3}")

    @property
    def size(self) -> int:
        return len(self.proportions)

    def __len__(self) -> int:
        return len(self.proportions)

    def __getitem__(self, k: int) -> float:
        return self.proportions[k]


def _remainder(v: float) -> float:
    # 1 - 0.7 - 0.3 is 5.6e-17, not an empty class
    return 0.0 if abs(v) <= PROFILE_TOL else v


def belief_proportions(profile: ClassProfile, k: int) -> np.ndarray:
    """Normalised shares ``q_k^h = p^h / sum_{i<k} p^i`` that a k-step traveler assigns to h < k."""
    if k == 0:
        raise ValueError("0-step travelers hold no beliefs")
    if not 0 < k < profile.size:
        raise ValueError(f"class index {k} out of range for {profile.size} classes")
    p = np.asarray(profile.proportions[:k])
    return p / p.sum()


@dataclass(frozen=True, eq=False)
class ClassFlowState:
    day: int
    flows: np.ndarray  # (K, R)

    @property
    def aggregate(self) -> np.ndarray:
        return self.flows.sum(axis=0)

    @classmethod
    def proportional(cls, profile: ClassProfile, aggregate, day: int = 0) -> "ClassFlowState":
        x = np.asarray(aggregate, dtype=float)
        return cls(day, np.outer(profile.proportions, x))

    def check(self, network: Network, profile: ClassProfile, tol: float = 1e-8) -> None:
        if self.flows.shape != (profile.size, network.n_routes):
            raise ValueError(f"state has shape {self.flows.shape}, expected {(profile.size, network.n_routes)}")
        fs = FeasibleSet.of(network)
        for k, pk in enumerate(profile.proportions):
            xk = self.flows[k]
            if pk == 0:
                if np.any(np.abs(xk) > tol):
                    raise ValueError(f"class {k} has zero share but nonzero flow")
                continue
            fs.scaled(pk).check(xk, tol)


@dataclass(frozen=True, eq=False)
class Prediction:
    flows: np.ndarray  # (K, R): predicted aggregate pattern of each class
    costs: np.ndarray  # (K, R)


def predict(
    op: TargetOperator,
    network: Network,
    profile: ClassProfile,
    aggregate,
    predicted: Rates,
    check: bool = False,
) -> Prediction:
    """Predicted next-day aggregate flow of every class.

    ``pi^0`` is the observed aggregate; for ``k >= 1``
    ``pi^k = a * sum_h y(q_k^h x, c(pi^h); q_k^h) + (1 - a) x`` with the
    predicted inertia ``a`` and sensitivity.  Lower-step predictions are
    computed once and shared.
    """
    x = np.asarray(aggregate, dtype=float)
    if check:
        FeasibleSet.of(network).check(x)
    K = profile.size
    pis = np.empty((K, x.size))
    costs = np.empty((K, x.size))
    pis[0] = x
    costs[0] = route_costs(network, x)
    a = predicted.alpha
    for k in range(1, K):
        q = belief_proportions(profile, k)
        acc = np.zeros_like(x)
        for h, qh in enumerate(q):
            if qh > 0:
                acc += op.target(network, qh * x, costs[h], qh, predicted.sensitivity)
        pis[k] = a * acc + (1.0 - a) * x
        costs[k] = route_costs(network, pis[k])
    return Prediction(pis, costs)


def step(
    op: TargetOperator,
    network: Network,
    profile: ClassProfile,
    state: ClassFlowState,
    params: Rates,
    predicted: Rates,
) -> ClassFlowState:
    """One day of the CH dynamic: ``x^k <- alpha y(x^k, c(pi^k); p^k) + (1-alpha) x^k``."""
    pred = predict(op, network, profile, state.aggregate, predicted)
    new = np.zeros_like(state.flows)
    a = params.alpha
    for k, pk in enumerate(profile.proportions):
        if pk == 0:
            continue
        y = op.target(network, state.flows[k], pred.costs[k], pk, params.sensitivity)
        new[k] = a * y + (1.0 - a) * state.flows[k]
    return ClassFlowState(state.day + 1, new)


def one_day_map(op: TargetOperator, network: Network, profile: ClassProfile, params: Rates, predicted: Rates):
    """The day-to-day map on stacked class flows (length K*R), for differentiation."""
    K, R = profile.size, network.n_routes

    def phi(flat: np.ndarray) -> np.ndarray:
        state = ClassFlowState(0, np.asarray(flat, dtype=float).reshape(K, R))
        return step(op, network, profile, state, params, predicted).flows.ravel()

    return phi


@dataclass(frozen=True, eq=False)
class JacobianParts:
    """Pieces of the chain-rule Jacobian of the one-day map.

    ``prediction_jacobians[k]`` is ``d pi^k / d x~``; ``cost_jacobians[k]``
    is ``D`` at ``pi^k``; ``target_x``/``target_c`` are the acting target's
    partial derivatives for each class; ``prediction_partials[k][h]`` are the
    predicted target's partials for the ``(k, h)`` term of the recursion.
    """

    prediction: Prediction
    cost_jacobians: list
    prediction_jacobians: list
    target_x: list
    target_c: list
    prediction_partials: dict = field(default_factory=dict)
    matrix: np.ndarray | None = None


def assemble_jacobian(
    profile: ClassProfile,
    alpha: float,
    alpha_hat: float,
    target_x: list,
    target_c: list,
    prediction_partials: dict,
    cost_jacobians: list,
) -> tuple[np.ndarray, list]:
    """Chain-rule assembly of the one-day Jacobian from its partial derivatives.

    Block ``(k, j)`` is ``alpha (Yx_k [k=j] + Yc_k D_k Pi_k) + (1-alpha) I [k=j]``
    where ``Pi_k = d pi^k / d x~`` follows the prediction recursion::

        Pi_0 = I
        Pi_k = a * sum_h (Yx_kh q_k^h + Yc_kh D_h Pi_h) + (1 - a) I

    ``target_x[k]``/``target_c[k]`` are the acting target's partials for class
    ``k`` (``None`` for an empty class, or ``target_x[k] = None`` when the
    target ignores x); ``prediction_partials[(k, h)]`` holds the pair for the
    ``h`` term of the class-``k`` prediction.  Returns ``(J, [Pi_k])``.
    """
    K = profile.size
    R = cost_jacobians[0].shape[0]
    eye = np.eye(R)
    D = cost_jacobians
    Pi = [eye]
    for k in range(1, K):
        q = belief_proportions(profile, k)
        acc = np.zeros((R, R))
        for h, qh in enumerate(q):
            if qh == 0:
                continue
            yx, yc = prediction_partials[(k, h)]
            acc += yc @ D[h] @ Pi[h]
            if yx is not None:
                acc += qh * yx
        Pi.append(alpha_hat * acc + (1.0 - alpha_hat) * eye)

    J = np.zeros((K * R, K * R))
    for k, pk in enumerate(profile.proportions):
        if pk == 0:
            continue  # an empty class is pinned at zero by the step
        rows = slice(k * R, (k + 1) * R)
        J[rows, rows] = (1.0 - alpha) * eye
        coupled = alpha * (target_c[k] @ D[k] @ Pi[k])
        for j in range(K):
            J[rows, j * R : (j + 1) * R] += coupled
        if target_x[k] is not None:
            J[rows, rows] += alpha * target_x[k]
    return J, Pi


def jacobian(
    op: TargetOperator,
    network: Network,
    profile: ClassProfile,
    state: ClassFlowState,
    params: Rates,
    predicted: Rates,
) -> JacobianParts:
    """Analytic Jacobian of the one-day map at ``state`` (size K*R square)."""
    K = profile.size
    x = state.aggregate
    pred = predict(op, network, profile, x, predicted)
    D = [cost_jacobian(network, pred.flows[k]) for k in range(K)]
    partials = {}
    for k in range(1, K):
        for h, qh in enumerate(belief_proportions(profile, k)):
            if qh > 0:
                partials[(k, h)] = op.partials(network, qh * x, pred.costs[h], qh, predicted.sensitivity)
    tx, tc = [], []
    for k, pk in enumerate(profile.proportions):
        if pk == 0:
            tx.append(None)
            tc.append(None)
            continue
        yx, yc = op.partials(network, state.flows[k], pred.costs[k], pk, params.sensitivity)
        tx.append(yx)
        tc.append(yc)
    J, Pi = assemble_jacobian(profile, params.alpha, predicted.alpha, tx, tc, partials, D)
    return JacobianParts(pred, D, Pi, tx, tc, partials, J)


def finite_difference_jacobian(fn, x, h: float = 1e-6) -> np.ndarray:
    """Central differences of a vector map; used for cross-checks."""
    x = np.asarray(x, dtype=float)
    f0 = fn(x)
    J = np.empty((f0.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        J[:, i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return J


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Per-class flows for days ``0..T`` plus aggregate flows and costs."""

    flows: np.ndarray  # (T+1, K, R)
    costs: np.ndarray  # (T+1, R) experienced costs of the aggregate
    profile: ClassProfile

    @property
    def horizon(self) -> int:
        return self.flows.shape[0] - 1

    @property
    def aggregate(self) -> np.ndarray:
        return self.flows.sum(axis=1)

    def state(self, day: int) -> ClassFlowState:
        return ClassFlowState(day, self.flows[day])

    @property
    def final(self) -> ClassFlowState:
        return self.state(self.horizon)

    def write_class_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["day", "class", "route", "flow"])
            T, K, R = self.flows.shape
            for t in range(T):
                for k in range(K):
                    for r in range(R):
                        w.writerow([t, k, r + 1, repr(float(self.flows[t, k, r]))])

    def write_aggregate_csv(self, path, header: str | None = None, first_day: int = 0) -> None:
        """One row per day from ``first_day`` to ``T``: ``day, flow_1..flow_R, cost_1..cost_R``."""
        agg = self.aggregate
        R = agg.shape[1]
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["day"] + [f"flow_{r + 1}" for r in range(R)] + [f"cost_{r + 1}" for r in range(R)])
            for t in range(first_day, agg.shape[0]):
                w.writerow([t] + [repr(float(v)) for v in agg[t]] + [repr(float(v)) for v in self.costs[t]])


def read_class_csv(path) -> np.ndarray:
    """Load a per-class trajectory CSV back into a ``(T+1, K, R)`` array."""
    rows = []
    with open(path, newline="") as fh:
        lines = (line for line in fh if not line.startswith("#"))
        for rec in csv.DictReader(lines):
            rows.append((int(rec["day"]), int(rec["class"]), int(rec["route"]), float(rec["flow"])))
    T = max(r[0] for r in rows) + 1
    K = max(r[1] for r in rows) + 1
    R = max(r[2] for r in rows)
    out = np.zeros((T, K, R))
    for t, k, r, v in rows:
        out[t, k, r - 1] = v
    return out


def read_aggregate_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Load an aggregate trajectory CSV into ``(days, flows, costs)``."""
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    head, *body = list(csv.reader(lines))
    R = (len(head) - 1) // 2
    table = np.array([[float(v) for v in rec] for rec in body])
    return table[:, 0].astype(int), table[:, 1 : R + 1], table[:, R + 1 :]


def simulate(
    op: TargetOperator,
    network: Network,
    profile: ClassProfile,
    initial: ClassFlowState,
    params: Rates,
    predicted: Rates,
    horizon: int,
) -> Trajectory:
    """Iterate :func:`step` for ``horizon`` days starting from ``initial``."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    initial.check(network, profile)
    K, R = profile.size, network.n_routes
    flows = np.empty((horizon + 1, K, R))
    costs = np.empty((horizon + 1, R))
    flows[0] = initial.flows
    costs[0] = route_costs(network, initial.aggregate)
    state = initial
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, horizon + 1):
            state = step(op, network, profile, state, params, predicted)
            if not np.all(np.isfinite(state.flows)):
                raise DivergenceError(t)
            flows[t] = state.flows
            costs[t] = route_costs(network, state.aggregate)
            if not np.all(np.isfinite(costs[t])):
                raise DivergenceError(t)
    log.debug("simulated %d days with %s", horizon, op.name)
    return Trajectory(flows, costs, profile)
