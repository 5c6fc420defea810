"""Fitting CH-NTP parameters to observed day-to-day route counts."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import framework as fw
from .feasible_set import FeasibleSet, project_many
from .network import Network, route_costs
from .ntp import NTP, NtpParams

log = logging.getLogger(__name__)

SUM_TOL = 1e-6


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ExperimentData:
    """Observed aggregate route counts for days ``0..M``."""

    counts: np.ndarray  # (M+1, R)
    demand: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=float)
        if c.ndim != 2 or len(c) < 1:
            raise DataError("counts must be a (days, routes) table")
        if np.any(c < 0):
            t, r = np.argwhere(c < 0)[0]
            raise DataError(f"day {t}: negative count on route {r + 1}")
        bad = np.flatnonzero(np.abs(c.sum(axis=1) - self.demand) > SUM_TOL * max(1.0, self.demand))
        if bad.size:
            t = int(bad[0])
            raise DataError(f"day {t}: counts sum to {c[t].sum():g}, expected {self.demand:g}")
        object.__setattr__(self, "counts", c)

    @property
    def n_days(self) -> int:
        """``M``, the index of the last observed day."""
        return len(self.counts) - 1

    @property
    def n_routes(self) -> int:
        return self.counts.shape[1]

    def truncate(self, m: int) -> "ExperimentData":
        if not 0 <= m <= self.n_days:
            raise DataError(f"cannot keep {m} days out of {self.n_days}")
        return ExperimentData(self.counts[: m + 1], self.demand, dict(self.meta))

    def write_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                for line in header.splitlines():
                    fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["day"] + [f"route_{r + 1}" for r in range(self.n_routes)])
            for t, row in enumerate(self.counts):
                w.writerow([t] + [_fmt(v) for v in row])


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def load_experiment(path, demand: float | None = None) -> ExperimentData:
    """Read ``day,route_1,...,route_R`` rows; ``#`` lines are comments.

    Days must run 0, 1, 2, ... without gaps.  Without an explicit ``demand``
    the day-0 total is used as the participant count.  A bare name such as
    ``"synthetic_braess"`` resolves to the bundled dataset.
    """
    path = Path(path)
    if not path.exists() and path.suffix == "" and not path.parent.parts:
        path = Path(__file__).with_name("data") / f"{path.name}.csv"
    comments, body = [], []
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise DataError(f"experiment file not found: {path}") from exc
    for line in text.splitlines():
        if line.startswith("#"):
            comments.append(line[1:].strip())
        elif line.strip():
            body.append(line)
    rows = list(csv.reader(body))
    if not rows:
        raise DataError(f"{path}: no data")
    head = [h.strip() for h in rows[0]]
    if head[0] != "day" or len(head) < 2 or head[1:] != [f"route_{r}" for r in range(1, len(head))]:
        raise DataError(f"{path}: header must be day,route_1,...,route_R")
    days, counts = [], []
    for rec in rows[1:]:
        if len(rec) != len(head):
            raise DataError(f"{path}: row {rec!r} has {len(rec)} fields, expected {len(head)}")
        try:
            days.append(int(rec[0]))
            counts.append([float(v) for v in rec[1:]])
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
    if days != list(range(len(days))):
        missing = sorted(set(range(max(days) + 1)) - set(days))
        raise DataError(f"{path}: days must run 0..M in order (missing {missing[:5]})")
    counts = np.array(counts)
    d = float(demand) if demand is not None else float(counts[0].sum())
    return ExperimentData(counts, d, {"source": str(path), "comments": comments})


def largest_remainder_round(x: np.ndarray, total: int) -> np.ndarray:
    """Round a nonnegative vector to integers summing to ``total``."""
    base = np.floor(x)
    short = int(round(total - base.sum()))
    order = np.argsort(-(x - base), kind="stable")
    base[order[:short]] += 1
    return base


def synthesize_experiment(
    network: Network,
    initial: fw.ClassFlowState,
    profile: fw.ClassProfile,
    params: NtpParams,
    m: int,
    rounded: bool = False,
) -> ExperimentData:
    """Counts generated by simulating the CH-NTP dynamic (single OD pair)."""
    if len(network.od_pairs) != 1:
        raise ValueError("synthetic experiments use a single OD pair")
    traj = fw.simulate(NTP, network, profile, initial, params.acting, params.predicted, m)
    agg = traj.aggregate
    d = float(network.demand[0])
    if rounded:
        agg = np.array([largest_remainder_round(row, int(round(d))) for row in agg])
    return ExperimentData(agg, d, {"synthetic": True})


def rmse(predicted, data: ExperimentData, m: int | None = None) -> float:
    """Root mean square error over days ``1..M`` and all routes.

    ``predicted`` holds days ``0..M`` (day 0 is ignored) or exactly ``1..M``.
    """
    m = data.n_days if m is None else m
    p = np.asarray(predicted, dtype=float)
    if p.shape[0] == m + 1:
        p = p[1:]
    if p.shape != (m, data.n_routes):
        raise ValueError(f"prediction covers {p.shape[0]} days, need days 1..{m}")
    diff = p - data.counts[1 : m + 1]
    return float(math.sqrt(np.sum(diff * diff) / (data.n_routes * m)))


def log_likelihood(probabilities, data: ExperimentData, m: int | None = None) -> float:
    """``sum_t sum_j xbar_j(t) ln G_t(j)`` over days ``1..M``.

    ``probabilities`` are the per-day route-choice probabilities (days
    ``0..M`` or ``1..M``), each row summing to one.
    """
    m = data.n_days if m is None else m
    g = np.asarray(probabilities, dtype=float)
    if g.shape[0] == m + 1:
        g = g[1:]
    if g.shape != (m, data.n_routes):
        raise ValueError(f"probabilities cover {g.shape[0]} days, need days 1..{m}")
    if np.any(np.abs(g.sum(axis=1) - 1) > 1e-9) or np.any(g < 0):
        raise ValueError("each day's probabilities must be nonnegative and sum to 1")
    obs = data.counts[1 : m + 1]
    if np.any((g == 0) & (obs > 0)):
        t, r = np.argwhere((g == 0) & (obs > 0))[0]
        raise ValueError(f"day {t + 1}: route {r + 1} was chosen but has zero predicted probability")
    used = obs > 0
    return float(np.sum(obs[used] * np.log(g[used])))


def max_log_likelihood(data: ExperimentData, m: int | None = None) -> float:
    """Log-likelihood of the empirical daily frequencies (the saturated bound)."""
    m = data.n_days if m is None else m
    return log_likelihood(data.counts[1 : m + 1] / data.demand, data, m)


def _gamma_series(a: float, x: float) -> float:
    # P(a, x) by its power series
    term = 1.0 / a
    total = term
    n = 0
    while abs(term) > abs(total) * 1e-17 and n < 10_000:
        n += 1
        term *= x / (a + n)
        total += term
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cfrac(a: float, x: float) -> float:
    # Q(a, x) by the Legendre continued fraction, modified Lentz
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gamma_q(a: float, x: float) -> float:
    """Regularised upper incomplete gamma ``Q(a, x)``."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cfrac(a, x)


def chi2_sf(x: float, df: int) -> float:
    """Chi-square survival function."""
    if df < 1:
        raise ValueError("df must be at least 1")
    return gamma_q(df / 2.0, x / 2.0) if x > 0 else 1.0


@dataclass(frozen=True)
class LrTest:
    statistic: float
    df: int
    p_value: float

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "p_value": self.p_value}


def lr_test(ll_restricted: float, ll_full: float, df: int) -> LrTest:
    stat = 2.0 * (ll_full - ll_restricted)
    if stat < 0:
        raise ValueError("the full model's log-likelihood is below the restricted one")
    return LrTest(stat, df, chi2_sf(stat, df))


def lr_test_statistic(statistic: float, df: int) -> LrTest:
    if statistic < 0:
        raise ValueError("negative likelihood-ratio statistic")
    return LrTest(statistic, df, chi2_sf(statistic, df))


# --- initial state and grid search --------------------------------------


def initial_candidates(network: Network, profile: fw.ClassProfile, aggregate, share_step: float = 0.05) -> np.ndarray:
    """Feasible per-class splits of a day-0 aggregate, shape ``(n, K, R)``.

    For every class but the last, each route except the last of its OD pair
    takes a share of the observed count from a ``share_step`` grid; the last
    route absorbs that class's remaining demand and the last class takes
    whatever is left.  The proportional split is always included first.
    """
    x = np.asarray(aggregate, dtype=float)
    K, R = profile.size, network.n_routes
    prop = np.outer(profile.proportions, x)[None]
    if K == 1:
        return prop
    free = np.concatenate([g[:-1] for g in network.od_groups])
    n_levels = int(round(1 / share_step)) + 1
    levels = np.linspace(0.0, 1.0, n_levels)
    # per free route, share combinations over classes 0..K-2 summing to <= 1
    combos = np.array([c for c in itertools.product(levels, repeat=K - 1) if sum(c) <= 1 + 1e-12])
    grids = np.stack(np.meshgrid(*([np.arange(len(combos))] * len(free)), indexing="ij"), -1).reshape(-1, len(free))
    shares = combos[grids]  # (n, F, K-1)
    n = len(shares)
    out = np.zeros((n, K, R))
    out[:, : K - 1, free] = np.transpose(shares, (0, 2, 1)) * x[free]
    for w, g in enumerate(network.od_groups):
        for k in range(K - 1):
            out[:, k, g[-1]] = profile[k] * network.demand[w] - out[:, k, g[:-1]].sum(axis=1)
    out[:, K - 1] = x - out[:, : K - 1].sum(axis=1)
    tol = 1e-9 * max(1.0, float(network.demand.max()))
    ok = np.all(out >= -tol, axis=(1, 2))
    out = np.clip(out[ok], 0.0, None)
    return np.concatenate([prop, out])


def one_step_aggregates(network: Network, profile: fw.ClassProfile, params: NtpParams, candidates: np.ndarray) -> np.ndarray:
    """Next-day aggregate for each candidate class split sharing one day-0 aggregate."""
    agg0 = candidates[0].sum(axis=0)
    pred = fw.predict(NTP, network, profile, agg0, params.predicted)
    a = params.alpha
    nxt = np.zeros((len(candidates), network.n_routes))
    for k, pk in enumerate(profile.proportions):
        xk = candidates[:, k]
        if pk == 0:
            continue
        y = project_many(FeasibleSet.of(network, pk), xk - params.gamma * pred.costs[k])
        nxt += a * y + (1 - a) * xk
    return nxt


TIE_TOL = 1e-9


def select_initial_state(
    network: Network,
    profile: fw.ClassProfile,
    params: NtpParams,
    data: ExperimentData,
    share_step: float = 0.05,
) -> tuple[fw.ClassFlowState, float]:
    """Day-0 class split whose one-day prediction is closest to observed day 1 (RMSE).

    Splits with every class interior give the same day-1 aggregate, so exact
    ties are common; within ``TIE_TOL`` (relative to demand) the earliest
    candidate wins, which makes the proportional split the default.
    """
    if data.n_days < 1:
        raise DataError("need observations for days 0 and 1")
    cands = initial_candidates(network, profile, data.counts[0], share_step)
    nxt = one_step_aggregates(network, profile, params, cands)
    err = np.sqrt(np.mean((nxt - data.counts[1]) ** 2, axis=1))
    i = int(np.flatnonzero(err <= err.min() + TIE_TOL * max(1.0, data.demand))[0])
    return fw.ClassFlowState(0, cands[i]), float(err[i])


@dataclass(frozen=True)
class GridSpec:
    gamma: tuple = (0.01, 1.0, 0.002)
    p0: tuple = (0.01, 1.0, 0.01)
    p1: tuple = (0.01, 1.0, 0.01)
    share_step: float = 0.05

    @staticmethod
    def _values(rng) -> np.ndarray:
        lo, hi, step = rng
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return np.round(lo + step * np.arange(n), 12)

    def points(self, k: int) -> list[tuple[float, float, float]]:
        """``(p0, p1, p2)`` profiles on the grid, filtered to the simplex."""
        if k == 1:
            return [(1.0, 0.0, 0.0)]
        out = []
        for p0 in self._values(self.p0):
            if k == 2:
                if p0 < 1:
                    out.append((float(p0), float(1 - p0), 0.0))
                continue
            for p1 in self._values(self.p1):
                if p0 + p1 < 1 - 1e-12:
                    out.append((float(p0), float(p1), float(1 - p0 - p1)))
        if not out:
            raise ValueError("no feasible class profile on the grid")
        return out

    def gammas(self) -> np.ndarray:
        return self._values(self.gamma)

    def to_dict(self) -> dict:
        return {"gamma": list(self.gamma), "p0": list(self.p0), "p1": list(self.p1), "share_step": self.share_step}


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    k_levels: int
    gamma: float
    proportions: tuple
    rmse: float
    log_likelihood: float
    initial_state: np.ndarray
    trajectory: np.ndarray  # aggregate, days 0..M
    m: int
    grid: dict

    @property
    def p0(self) -> float:
        return self.proportions[0]

    @property
    def p1(self) -> float:
        return self.proportions[1] if len(self.proportions) > 1 else 0.0

    def to_dict(self) -> dict:
        return {
            "k_levels": self.k_levels,
            "days": self.m,
            "params": {
                "gamma": self.gamma,
                "p0": self.p0,
                "p1": self.p1,
                "alpha": 1.0,
                "alpha_hat": 1.0,
                "gamma_hat": self.gamma,
            },
            "rmse": self.rmse,
            "ll": self.log_likelihood,
            "initial_state": self.initial_state.tolist(),
            "grid": self.grid,
        }


def evaluate(
    network: Network, data: ExperimentData, m: int, gamma: float, proportions, share_step: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """RMSE, chosen day-0 state and simulated aggregate at one parameter point."""
    profile = fw.ClassProfile(proportions)
    params = NtpParams(1.0, gamma)
    init, _ = select_initial_state(network, profile, params, data, share_step)
    traj = fw.simulate(NTP, network, profile, init, params.acting, params.predicted, m)
    agg = traj.aggregate
    return rmse(agg, data, m), init.flows, agg


def _gamma_row(args):
    network, data, m, gamma, profiles, share_step = args
    return [evaluate(network, data, m, gamma, p, share_step)[0] for p in profiles]


def grid_search(
    network: Network,
    data: ExperimentData,
    m: int | None = None,
    k_levels: int = 1,
    grid: GridSpec | None = None,
    jobs: int = 1,
) -> CalibrationResult:
    """Lowest-RMSE ``(gamma, p)`` with ``alpha = alpha_hat = 1`` and ``gamma_hat = gamma``.

    Ties (within 1e-12 relative) go to the smaller gamma, then smaller p0,
    then smaller p1.  Rows of the grid (one gamma each) may run in parallel.
    """
    grid = grid or GridSpec()
    m = data.n_days if m is None else m
    if not 1 <= m <= data.n_days:
        raise DataError(f"need 1 <= M <= {data.n_days}")
    if data.n_routes != network.n_routes:
        raise DataError("dataset and network route counts differ")
    data_m = data.truncate(m)
    profiles = [p[:k_levels] for p in grid.points(k_levels)]
    gammas = grid.gammas()
    tasks = [(network, data_m, m, float(g), profiles, grid.share_step) for g in gammas]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            table = list(pool.map(_gamma_row, tasks))
    else:
        table = [_gamma_row(t) for t in tasks]

    best = (math.inf, -1, -1)
    for i, row in enumerate(table):
        for j, val in enumerate(row):
            margin = 1e-12 * max(1.0, abs(best[0])) if math.isfinite(best[0]) else 0.0
            if val < best[0] - margin:
                best = (val, i, j)
    _, i, j = best
    gamma, props = float(gammas[i]), profiles[j]
    err, init, agg = evaluate(network, data_m, m, gamma, props, grid.share_step)
    ll = log_likelihood(agg / data.demand, data_m, m)
    log.info("K=%d M=%d: gamma=%.4f p=%s rmse=%.4f", k_levels, m, gamma, props, err)
    return CalibrationResult(k_levels, gamma, tuple(props), err, ll, init, agg, m, grid.to_dict())


def calibration_report(results: list[CalibrationResult], data: ExperimentData) -> dict:
    """Report with likelihood-ratio tests of each richer model against ``K = 1``."""
    by_k = {r.k_levels: r for r in results}
    tests = []
    if 1 in by_k:
        base = by_k[1]
        for k in sorted(by_k):
            if k == 1:
                continue
            try:
                t = lr_test(base.log_likelihood, by_k[k].log_likelihood, k - 1)
                tests.append({"restricted": 1, "full": k, **t.to_dict()})
            except ValueError as exc:
                tests.append({"restricted": 1, "full": k, "error": str(exc)})
    m = results[0].m if results else data.n_days
    return {
        "k_levels": sorted(by_k),
        "results": [r.to_dict() for r in results],
        "max_ll": max_log_likelihood(data, m),
        "lr_tests": tests,
    }


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)


# --- net-flow diagnostic ------------------------------------------------


@dataclass(frozen=True)
class NetFlowRow:
    day: int
    route: int
    prev_rank: int
    net_flow: float


def net_flow_diagnostic(data: ExperimentData, network: Network) -> list[NetFlowRow]:
    """Per day ``t >= 1``: each route's cost rank on day ``t-1`` (1 = cheapest) and its net flow."""
    if data.n_routes != network.n_routes:
        raise DataError("dataset and network route counts differ")
    rows = []
    for t in range(1, data.n_days + 1):
        cost = route_costs(network, data.counts[t - 1])
        order = np.argsort(cost, kind="stable")
        rank = np.empty(len(cost), dtype=int)
        rank[order] = np.arange(1, len(cost) + 1)
        net = data.counts[t] - data.counts[t - 1]
        rows.extend(NetFlowRow(t, r + 1, int(rank[r]), float(net[r])) for r in range(len(cost)))
    return rows


def write_diagnostic_csv(rows: list[NetFlowRow], path, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["day", "route", "prev_rank", "net_flow"])
        for r in rows:
            w.writerow([r.day, r.route, r.prev_rank, _fmt(r.net_flow)])


def read_diagnostic_csv(path) -> list[NetFlowRow]:
    with open(path, newline="") as fh:
        lines = (line for line in fh if not line.startswith("#"))
        return [
            NetFlowRow(int(r["day"]), int(r["route"]), int(r["prev_rank"]), float(r["net_flow"]))
            for r in csv.DictReader(lines)
        ]
