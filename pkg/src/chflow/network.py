"""Network representation, BPR route costs and the route-cost Jacobian."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

BPR_COEF = 0.15
BPR_POWER = 4.0


class ScenarioError(ValueError):
    """Raised for malformed scenario data."""


@dataclass(frozen=True)
class Link:
    id: int
    free_flow_time: float
    capacity: float

    def __post_init__(self):
        if not self.free_flow_time > 0:
            raise ScenarioError(f"link {self.id}: free_flow_time must be positive")
        if not self.capacity > 0:
            raise ScenarioError(f"link {self.id}: capacity must be positive")


@dataclass(frozen=True)
class Route:
    id: int
    od_id: int
    links: tuple[int, ...]


@dataclass(frozen=True)
class OdPair:
    id: int
    demand: float
    route_ids: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class Network:
    """Links, OD pairs and explicitly enumerated routes.

    Routes are indexed ``0..R-1`` in the order they appear; the derived
    incidence matrices are ``link_route`` (|L| x R) and ``od_route`` (|W| x R).
    """

    links: tuple[Link, ...]
    od_pairs: tuple[OdPair, ...]
    routes: tuple[Route, ...]
    bpr_coef: float = BPR_COEF
    bpr_power: float = BPR_POWER
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        link_pos = {link.id: i for i, link in enumerate(self.links)}
        if len(link_pos) != len(self.links):
            raise ScenarioError("duplicate link ids")
        route_pos = {route.id: i for i, route in enumerate(self.routes)}
        if len(route_pos) != len(self.routes):
            raise ScenarioError("duplicate route ids")

        delta = np.zeros((len(self.links), len(self.routes)))
        for j, route in enumerate(self.routes):
            if not route.links:
                raise ScenarioError(f"route {route.id} has no links")
            for lid in route.links:
                if lid not in link_pos:
                    raise ScenarioError(f"route {route.id} uses unknown link {lid}")
                delta[link_pos[lid], j] = 1.0

        gamma = np.zeros((len(self.od_pairs), len(self.routes)))
        seen: set[int] = set()
        groups = []
        for w, od in enumerate(self.od_pairs):
            if not od.demand > 0:
                raise ScenarioError(f"OD {od.id}: demand must be positive")
            if not od.route_ids:
                raise ScenarioError(f"OD {od.id} has no routes")
            idx = []
            for rid in od.route_ids:
                if rid not in route_pos or rid in seen:
                    raise ScenarioError(f"OD {od.id}: bad or shared route {rid}")
                seen.add(rid)
                idx.append(route_pos[rid])
                gamma[w, route_pos[rid]] = 1.0
            groups.append(np.array(idx, dtype=int))
        if not np.all(gamma.sum(axis=0) == 1):
            raise ScenarioError("every route must belong to exactly one OD pair")

        for name, value in (
            ("link_route", delta),
            ("od_route", gamma),
            ("od_groups", tuple(groups)),
            ("t0", np.array([l.free_flow_time for l in self.links])),
            ("capacity", np.array([l.capacity for l in self.links])),
            ("demand", np.array([od.demand for od in self.od_pairs])),
        ):
            object.__setattr__(self, name, value)
        for arr in (delta, gamma, self.t0, self.capacity, self.demand):
            arr.setflags(write=False)

    @property
    def n_routes(self) -> int:
        return len(self.routes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    def route_demand(self) -> np.ndarray:
        """OD demand broadcast onto each route (d_w for r in R_w)."""
        return self.od_route.T @ self.demand

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_routes,):
            raise ValueError(f"expected route vector of length {self.n_routes}, got shape {x.shape}")
        return x

    def link_times(self, v: np.ndarray) -> np.ndarray:
        return self.t0 * (1.0 + self.bpr_coef * (v / self.capacity) ** self.bpr_power)

    def link_time_derivatives(self, v: np.ndarray) -> np.ndarray:
        p = self.bpr_power
        return self.t0 * self.bpr_coef * p * v ** (p - 1.0) / self.capacity**p


def link_flows(network: Network, route_flow) -> np.ndarray:
    """Link flows ``v = Δ x`` for an aggregate route-flow vector."""
    return network.link_route @ network._check(route_flow)


def route_costs(network: Network, route_flow) -> np.ndarray:
    """BPR route travel times, additive over the links of each route."""
    v = link_flows(network, route_flow)
    return network.link_route.T @ network.link_times(v)


def cost_jacobian(network: Network, route_flow) -> np.ndarray:
    """Route-cost Jacobian ``D = Δᵀ diag(t'(v)) Δ``; symmetric PSD."""
    v = link_flows(network, route_flow)
    delta = network.link_route
    return delta.T @ (network.link_time_derivatives(v)[:, None] * delta)


def build_network(links, od_pairs, bpr_coef=BPR_COEF, bpr_power=BPR_POWER, meta=None) -> Network:
    """Build a network from plain records.

    ``links`` is a sequence of ``(id, t0, capacity)``; ``od_pairs`` is a
    sequence of ``(id, demand, [[link ids], ...])``.  Route ids are assigned
    consecutively from 1 in listing order.
    """
    link_objs = tuple(Link(int(i), float(t0), float(cap)) for i, t0, cap in links)
    routes = []
    ods = []
    for od_id, demand, route_links in od_pairs:
        ids = []
        for seq in route_links:
            rid = len(routes) + 1
            routes.append(Route(rid, int(od_id), tuple(int(a) for a in seq)))
            ids.append(rid)
        ods.append(OdPair(int(od_id), float(demand), tuple(ids)))
    return Network(link_objs, tuple(ods), tuple(routes), float(bpr_coef), float(bpr_power), dict(meta or {}))


def network_from_dict(data: dict) -> Network:
    try:
        links = [(l["id"], l["t0"], l["capacity"]) for l in data["links"]]
        ods = [(od["id"], od["demand"], od["routes"]) for od in data["od_pairs"]]
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from exc
    bpr = data.get("bpr", {})
    meta = {k: v for k, v in data.items() if k not in ("links", "od_pairs", "bpr")}
    return build_network(links, ods, bpr.get("coef", BPR_COEF), bpr.get("power", BPR_POWER), meta)


def network_to_dict(network: Network) -> dict:
    out = dict(network.meta)
    out["bpr"] = {"coef": network.bpr_coef, "power": network.bpr_power}
    out["links"] = [{"id": l.id, "t0": l.free_flow_time, "capacity": l.capacity} for l in network.links]
    out["od_pairs"] = [
        {
            "id": od.id,
            "demand": od.demand,
            "routes": [list(network.routes[i].links) for i in network.od_groups[w]],
        }
        for w, od in enumerate(network.od_pairs)
    ]
    return out


def load_scenario(path) -> Network:
    """Load a JSON scenario file (or a bundled scenario name like ``"braess"``)."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and not p.parent.parts:
        p = Path(__file__).with_name("scenarios") / f"{p.name}.json"
    try:
        data = json.loads(p.read_text())
    except FileNotFoundError as exc:
        raise ScenarioError(f"scenario not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    return network_from_dict(data)


def planted_due_network(
    rng: np.random.Generator,
    routes_per_od: Sequence[int] = (3, 3),
    shared_links: int = 3,
    demand_range=(20.0, 60.0),
) -> tuple[Network, np.ndarray]:
    """Random network whose interior DUE is known by construction.

    Every route gets a private link plus a random subset of shared links.  A
    strictly positive route-flow pattern is drawn first and the private
    links' free-flow times are then set so that all routes of an OD pair have
    equal cost at that pattern.  Private links make route costs strictly
    monotone, so the planted pattern is the unique DUE.
    """
    n_routes = int(sum(routes_per_od))
    demand = rng.uniform(*demand_range, size=len(routes_per_od))
    flows = []
    for d, n in zip(demand, routes_per_od):
        share = rng.uniform(0.5, 1.5, size=n)
        flows.append(d * share / share.sum())
    x = np.concatenate(flows)

    shared = [(i + 1, rng.uniform(1.0, 5.0), rng.uniform(20.0, 60.0)) for i in range(shared_links)]
    route_links = []
    for r in range(n_routes):
        use = [s[0] for s in shared if rng.random() < 0.5]
        route_links.append(use + [shared_links + r + 1])

    private_cap = rng.uniform(0.5, 1.5, size=n_routes) * x
    shared_t0 = np.array([s[1] for s in shared])
    shared_cap = np.array([s[2] for s in shared])
    v_shared = np.zeros(shared_links)
    for r, seq in enumerate(route_links):
        for lid in seq[:-1]:
            v_shared[lid - 1] += x[r]
    t_shared = shared_t0 * (1 + BPR_COEF * (v_shared / shared_cap) ** BPR_POWER)
    rest = np.array([sum(t_shared[lid - 1] for lid in seq[:-1]) for seq in route_links])
    bpr_factor = 1 + BPR_COEF * (x / private_cap) ** BPR_POWER

    private_t0 = np.empty(n_routes)
    start = 0
    for n in routes_per_od:
        sl = slice(start, start + n)
        target = rest[sl].max() + rng.uniform(2.0, 6.0)
        private_t0[sl] = (target - rest[sl]) / bpr_factor[sl]
        start += n

    links = list(shared) + [
        (shared_links + r + 1, private_t0[r], private_cap[r]) for r in range(n_routes)
    ]
    ods = []
    start = 0
    for w, n in enumerate(routes_per_od):
        ods.append((w + 1, demand[w], route_links[start : start + n]))
        start += n
    return build_network(links, ods), x
