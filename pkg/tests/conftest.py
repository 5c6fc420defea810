import numpy as np
import pytest

from chflow import framework as fw
from chflow.network import build_network, planted_due_network

ACCEPTANCE = []


def record_acceptance(number, title, passed, detail=""):
    ACCEPTANCE.append((number, title, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE, key=lambda r: (r[0], r[1])):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        line = f"[{status}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def toy():
    """One OD, two single-link routes with costs 1 + x1 and 2 + x2, demand 3."""
    return build_network([(1, 1.0, 1.0), (2, 2.0, 2.0)], [(1, 3.0, [[1], [2]])], bpr_coef=1.0, bpr_power=1.0)


@pytest.fixture
def planted(rng):
    return planted_due_network(rng)


def random_interior_state(network, profile, rng, spread=0.3):
    flows = np.zeros((profile.size, network.n_routes))
    for k, pk in enumerate(profile.proportions):
        for g, d in zip(network.od_groups, network.demand):
            w = rng.uniform(1 - spread, 1 + spread, size=len(g))
            flows[k, g] = pk * d * w / w.sum()
    return fw.ClassFlowState(0, flows)
