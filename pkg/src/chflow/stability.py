"""Eigenvalue-based local stability, empirical perturbation tests and region sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import framework as fw
from .equilibrium import detect_fixed_point, dynamic_of, solve_due, solve_sue
from .feasible_set import FeasibleSet, project
from .logit import LogitParams, PsiCoefficients, logit_jacobian, psi, sue_rho, sue_stability
from .network import Network
from .ntp import NtpParams, ntp_jacobian, qd_eigenvalues, eq_gamma_from_beta, neq_gamma_from_beta

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6
EXCURSION_BOUND = 10.0  # class-state excursion allowed for a return, in units of eps
RANK_TOL = 1e-8
CLUSTER_TOL = 1e-6

STABLE_VERDICTS = frozenset({"asymptotically_stable", "stable", "returned_to_equilibrium"})


class EigenvalueError(ArithmeticError):
    pass


def eigenvalues(matrix, check: bool = True) -> np.ndarray:
    """All eigenvalues of a dense square matrix.

    Wraps LAPACK's Hessenberg/QR driver and verifies ``||Jv - lv|| <= 1e-8 ||J||``
    for every returned pair.
    """
    J = np.asarray(matrix, dtype=float)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise ValueError("matrix must be square")
    if not np.all(np.isfinite(J)):
        raise ValueError("matrix has non-finite entries")
    try:
        w, v = np.linalg.eig(J)
    except np.linalg.LinAlgError as exc:
        raise EigenvalueError(str(exc)) from exc
    if check and J.size:
        scale = max(np.linalg.norm(J, 2), 1e-300)
        res = np.linalg.norm(J @ v - v * w, axis=0)
        if res.max() > 1e-8 * scale:
            raise EigenvalueError(f"eigenpair residual {res.max():.3g} exceeds tolerance")
    return w


def numerical_rank(M: np.ndarray, tol: float) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > tol))


@dataclass(frozen=True)
class UnitEigenvalue:
    value: complex
    multiplicity: int
    rank: int
    required_rank: int

    @property
    def passed(self) -> bool:
        return self.rank == self.required_rank

    def to_dict(self) -> dict:
        return {
            "value": [self.value.real, self.value.imag],
            "multiplicity": self.multiplicity,
            "rank": self.rank,
            "required_rank": self.required_rank,
            "semisimple": self.passed,
        }


@dataclass(frozen=True, eq=False)
class StabilityReport:
    eigenvalues: np.ndarray
    max_modulus: float
    classification: str
    unit_eigenvalues: tuple = ()

    @property
    def stable(self) -> bool:
        return self.classification != "unstable"

    def to_dict(self) -> dict:
        return {
            "classification": self.classification,
            "max_modulus": self.max_modulus,
            "eigenvalues": [[z.real, z.imag] for z in self.eigenvalues],
            "unit_eigenvalues": [u.to_dict() for u in self.unit_eigenvalues],
        }

    def write_json(self, path, extra: dict | None = None) -> None:
        d = self.to_dict()
        if extra:
            d.update(extra)
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2)

    @classmethod
    def read_json(cls, path) -> "StabilityReport":
        with open(path) as fh:
            d = json.load(fh)
        units = tuple(
            UnitEigenvalue(complex(*u["value"]), u["multiplicity"], u["rank"], u["required_rank"])
            for u in d["unit_eigenvalues"]
        )
        ev = np.array([complex(a, b) for a, b in d["eigenvalues"]])
        return cls(ev, d["max_modulus"], d["classification"], units)


def _clusters(values: np.ndarray, tol: float) -> list[np.ndarray]:
    left = list(range(len(values)))
    out = []
    while left:
        i = left.pop(0)
        members = [i] + [j for j in left if abs(values[j] - values[i]) <= tol]
        left = [j for j in left if j not in members]
        out.append(values[members])
    return out


def classify(
    matrix,
    tol: float = UNIT_TOL,
    rank_tol: float = RANK_TOL,
    cluster_tol: float = CLUSTER_TOL,
) -> StabilityReport:
    """Local stability of a fixed point from the Jacobian of the map.

    Asymptotically stable when every eigenvalue is strictly inside the unit
    circle.  Stable when none is outside and every eigenvalue on the circle
    is semisimple, i.e. ``rank(J - lI) = n - q`` for its multiplicity ``q``,
    with numerical rank counting singular values above ``rank_tol * ||J||``.
    """
    J = np.asarray(matrix, dtype=float)
    n = J.shape[0]
    w = eigenvalues(J)
    mod = np.abs(w)
    max_mod = float(mod.max()) if n else 0.0
    if max_mod < 1 - tol:
        return StabilityReport(w, max_mod, "asymptotically_stable")
    if max_mod > 1 + tol:
        return StabilityReport(w, max_mod, "unstable")
    sigma = max(np.linalg.norm(J, 2), 1.0)
    units = []
    for cl in _clusters(w[np.abs(mod - 1) <= tol], cluster_tol):
        lam = complex(cl.mean())
        if abs(lam.imag) <= tol:
            lam = complex(math.copysign(1.0, lam.real), 0.0)
        rank = numerical_rank(J - lam * np.eye(n), rank_tol * sigma)
        units.append(UnitEigenvalue(lam, len(cl), rank, n - len(cl)))
    verdict = "stable" if all(u.passed for u in units) else "unstable"
    return StabilityReport(w, max_mod, verdict, tuple(units))


# --- empirical checks ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmpiricalResult:
    verdict: str  # returned_to_equilibrium | settled_elsewhere | oscillating | undetermined
    distance: float
    fixed_day: int | None
    crossings: int
    excursion: float
    trajectory: fw.Trajectory

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "final_distance": self.distance,
            "fixed_day": self.fixed_day,
            "crossings": self.crossings,
            "excursion": self.excursion,
        }


def perturbation(network: Network, rng: np.random.Generator) -> np.ndarray:
    """Random unit direction that keeps every OD total unchanged."""
    u = rng.standard_normal(network.n_routes)
    for g in network.od_groups:
        u[g] -= u[g].mean()
    norm = np.linalg.norm(u)
    return u / norm if norm > 0 else u


def sign_crossings(series: np.ndarray, center: np.ndarray, tol: float = 1e-9) -> int:
    """Largest number of sign changes of ``series[:, r] - center[r]`` over routes ``r``."""
    dev = np.asarray(series) - np.asarray(center)
    best = 0
    for r in range(dev.shape[1]):
        s = np.sign(dev[np.abs(dev[:, r]) > tol, r])
        best = max(best, int(np.sum(s[1:] != s[:-1])))
    return best


def perturb_and_simulate(
    network: Network,
    equilibrium,
    profile: fw.ClassProfile,
    params,
    eps: float = 0.1,
    horizon: int = 2000,
    seed: int = 0,
    direction=None,
    fixed_tol: float = 1e-9,
    window: int = 5,
) -> EmpiricalResult:
    """Nudge the aggregate equilibrium by ``eps`` and classify where the dynamic goes.

    The perturbed aggregate is projected back onto the feasible set and split
    proportionally across classes.  Every split of an equilibrium aggregate
    is itself a fixed point, so the aggregate can come back while the class
    flows drift to a different split; a return therefore also needs the
    class state to stay within ``EXCURSION_BOUND * eps`` of the proportional
    split of ``equilibrium`` (``excursion`` is that largest distance over
    ``eps``).
    """
    x_star = np.asarray(equilibrium, dtype=float)
    u = perturbation(network, np.random.default_rng(seed)) if direction is None else np.asarray(direction, float)
    start, _ = project(FeasibleSet.of(network), x_star + eps * u)
    init = fw.ClassFlowState.proportional(profile, start)
    op = dynamic_of(params)
    traj = fw.simulate(op, network, profile, init, params.acting, params.predicted, horizon)
    agg = traj.aggregate
    dist = float(np.linalg.norm(agg[-1] - x_star))
    day = detect_fixed_point(traj, fixed_tol, window)
    crossings = sign_crossings(agg, x_star)
    home = np.outer(profile.proportions, x_star)
    excursion = float(np.sqrt(((traj.flows - home) ** 2).sum(axis=(1, 2))).max() / eps)
    if dist < eps / 10 and excursion <= EXCURSION_BOUND:
        verdict = "returned_to_equilibrium"
    elif day is not None:
        verdict = "settled_elsewhere"
    elif crossings >= 3:
        verdict = "oscillating"
    else:
        verdict = "undetermined"
    return EmpiricalResult(verdict, dist, day, crossings, excursion, traj)


# --- sweeps ------------------------------------------------------------------

PARAM_NAMES = ("alpha", "alpha_hat", "gamma", "gamma_hat", "theta", "theta_hat", "p0", "p1")


@dataclass(frozen=True)
class Axis:
    name: str
    start: float
    stop: float
    step: float

    def __post_init__(self):
        if self.name not in PARAM_NAMES:
            raise ValueError(f"unknown sweep parameter {self.name!r}")
        if not self.step > 0 or self.stop < self.start:
            raise ValueError(f"bad axis range for {self.name}")

    @classmethod
    def parse(cls, text: str) -> "Axis":
        """``name:start:stop:step``."""
        try:
            name, a, b, s = text.split(":")
            return cls(name, float(a), float(b), float(s))
        except ValueError as exc:
            raise ValueError(f"axis must look like name:start:stop:step, got {text!r}") from exc

    @property
    def values(self) -> np.ndarray:
        n = int(math.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return np.round(self.start + self.step * np.arange(n), 12)


@dataclass(frozen=True)
class SweepSetup:
    """Everything a sweep point needs besides its two coordinates.

    ``base`` holds defaults for every parameter in ``PARAM_NAMES`` that the
    dynamic uses; ``k`` is the number of classes.  ``rho`` short-circuits
    the Logit analytic path with given eigenvalues of ``Υ D`` (no network
    needed).
    """

    kind: str  # ntp | logit
    mode: str  # analytic | jacobian | empirical
    k: int
    base: dict
    network: Network | None = None
    rho: tuple | None = None
    eps: float = 0.1
    horizon: int = 2000
    seed: int = 0
    tol: float = UNIT_TOL

    def __post_init__(self):
        if self.kind not in ("ntp", "logit"):
            raise ValueError("kind must be ntp or logit")
        if self.mode not in ("analytic", "jacobian", "empirical"):
            raise ValueError("mode must be analytic, jacobian or empirical")
        if self.network is None and self.rho is None:
            raise ValueError("a network is required")


def profile_for(k: int, values: dict) -> fw.ClassProfile:
    return fw.ClassProfile.from_levels(k, values.get("p0", 1.0), values.get("p1"))


def params_for(kind: str, values: dict):
    if kind == "ntp":
        return NtpParams(values.get("alpha", 1.0), values["gamma"], values.get("alpha_hat"), values.get("gamma_hat"))
    return LogitParams(values["alpha"], values["theta"], values.get("alpha_hat"), values.get("theta_hat"))


def _equilibrium(setup: SweepSetup, params) -> np.ndarray:
    if setup.kind == "ntp":
        return solve_due(setup.network).aggregate
    return solve_sue(setup.network, params.theta).aggregate


def evaluate_point(setup: SweepSetup, values: dict) -> tuple[str, float]:
    """Verdict and max modulus (``nan`` for empirical mode) at one parameter point."""
    profile = profile_for(setup.k, values)
    params = params_for(setup.kind, values)
    if setup.mode == "analytic":
        return _analytic(setup, profile, params)
    x = _equilibrium(setup, params)
    if setup.mode == "jacobian":
        state = fw.ClassFlowState.proportional(profile, x)
        if setup.kind == "ntp":
            J = ntp_jacobian(setup.network, state, profile, params).JP
        else:
            J = logit_jacobian(setup.network, state, profile, params)
        rep = classify(J, setup.tol)
        return rep.classification, rep.max_modulus
    emp = perturb_and_simulate(setup.network, x, profile, params, setup.eps, setup.horizon, setup.seed)
    return emp.verdict, math.nan


def _analytic(setup: SweepSetup, profile: fw.ClassProfile, params) -> tuple[str, float]:
    if setup.kind == "logit":
        if setup.rho is not None:
            coeffs = PsiCoefficients.from_profile(params.alpha, params.alpha_hat, profile)
            vals = np.array([psi(r, coeffs) for r in setup.rho])
            ok = bool(np.all((vals > -1) & (vals < 1)))
            mod = float(np.abs(vals).max())
        else:
            if params.theta_hat != params.theta:
                raise ValueError("the analytic Logit criterion needs theta_hat == theta")
            sue = solve_sue(setup.network, params.theta).aggregate
            rep = sue_stability(setup.network, sue, profile, params)
            ok, mod = rep.stable, rep.max_modulus
        return ("stable" if ok else "unstable"), mod
    if params.alpha != 1 or params.alpha_hat != 1:
        raise ValueError("the analytic NTP criteria assume alpha = alpha_hat = 1")
    beta = qd_eigenvalues(setup.network, solve_due(setup.network).aggregate)
    if params.gamma_hat == params.gamma:
        verdict = eq_gamma_from_beta(beta, params.gamma)
    elif profile.size == 2:
        verdict = neq_gamma_from_beta(beta, params.gamma, params.gamma_hat)
    else:
        raise ValueError("no analytic NTP criterion for this class count with gamma_hat != gamma")
    return ("stable" if verdict.stable else "unstable"), verdict.max_modulus


def _point_task(args):
    setup, i, j, values = args
    try:
        verdict, mod = evaluate_point(setup, values)
        return i, j, verdict, mod, None
    except Exception as exc:  # recorded per point; the sweep carries on
        return i, j, "error", math.nan, f"{type(exc).__name__}: {exc}"


@dataclass(eq=False)
class RegionMap:
    axes: tuple[Axis, Axis]
    verdicts: np.ndarray  # object array (n1, n2)
    max_modulus: np.ndarray
    errors: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, axes) -> "RegionMap":
        shape = (len(axes[0].values), len(axes[1].values))
        return cls(tuple(axes), np.full(shape, "", dtype=object), np.full(shape, math.nan))

    @property
    def shape(self) -> tuple[int, int]:
        return self.verdicts.shape

    def stable_mask(self) -> np.ndarray:
        return np.vectorize(lambda v: v in STABLE_VERDICTS, otypes=[bool])(self.verdicts)

    def rows(self):
        a, b = self.axes
        for i, u in enumerate(a.values):
            for j, v in enumerate(b.values):
                if self.verdicts[i, j]:
                    yield float(u), float(v), self.verdicts[i, j], float(self.max_modulus[i, j])

    def write_csv(self, path, header: str | None = None) -> None:
        a, b = self.axes
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow([a.name, b.name, "verdict", "max_modulus"])
            for u, v, verdict, mod in self.rows():
                w.writerow([repr(u), repr(v), verdict, repr(mod)])

    @staticmethod
    def read_csv(path) -> list[dict]:
        with open(path, newline="") as fh:
            lines = (line for line in fh if not line.startswith("#"))
            return list(csv.DictReader(lines))


class SweepInterrupted(KeyboardInterrupt):
    def __init__(self, partial: RegionMap):
        super().__init__("sweep interrupted")
        self.partial = partial


def sweep(setup: SweepSetup, axes: tuple[Axis, Axis], jobs: int = 1) -> RegionMap:
    """Evaluate ``setup`` over a two-parameter grid.

    Points run on a process pool when ``jobs > 1``; the grid is filled by
    index so the output does not depend on completion order.
    """
    if axes[0].name == axes[1].name:
        raise ValueError("sweep axes must differ")
    region = RegionMap.empty(axes)
    tasks = []
    for i, u in enumerate(axes[0].values):
        for j, v in enumerate(axes[1].values):
            values = dict(setup.base)
            values[axes[0].name] = float(u)
            values[axes[1].name] = float(v)
            tasks.append((setup, i, j, values))

    def record(out):
        i, j, verdict, mod, err = out
        region.verdicts[i, j] = verdict
        region.max_modulus[i, j] = mod
        if err:
            region.errors[(i, j)] = err

    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for out in pool.map(_point_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))):
                    record(out)
        else:
            for t in tasks:
                record(_point_task(t))
    except KeyboardInterrupt:
        raise SweepInterrupted(region) from None
    if region.errors:
        log.warning("%d sweep points failed", len(region.errors))
    return region


# --- determinant identities for block matrices ------------------------------


def block_det_commuting(S11, S12, S21, S22) -> float:
    """``det [[S11, S12], [S21, S22]] = det(S11 S22 - S21 S12)`` when ``S11`` commutes with ``S21``."""
    return float(np.linalg.det(S11 @ S22 - S21 @ S12))


def block_det_triangular(diagonal_blocks) -> float:
    """Determinant of a block upper-triangular matrix from its diagonal blocks."""
    return float(np.prod([np.linalg.det(b) for b in diagonal_blocks]))
