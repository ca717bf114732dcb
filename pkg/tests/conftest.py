import numpy as np
import pytest

from parid.baseparams import random_states
from parid.closure import load_robot


@pytest.fixture(scope="session")
def prs():
    return load_robot("3prs")


@pytest.fixture(scope="session")
def rps():
    return load_robot("3rps")


@pytest.fixture(scope="session")
def prs_states(prs):
    return random_states(prs, 1000, np.random.default_rng(11))


@pytest.fixture(scope="session")
def rps_states(rps):
    return random_states(rps, 1000, np.random.default_rng(12))


def random_chain_rows(rng, n):
    rows = []
    for _ in range(n):
        kind = "R" if rng.random() < 0.6 else "P"
        rows.append((rng.uniform(-0.5, 0.5), rng.uniform(-np.pi, np.pi), rng.uniform(-0.5, 0.5),
                     rng.uniform(-np.pi, np.pi), kind))
    return rows


def random_params(rng, nb):
    return rng.standard_normal(10 * nb)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    rows = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call" and not (key == "error" or rep.failed):
                continue
            name = rep.nodeid.split("::")[-1]
            if not name.startswith("test_criterion_"):
                continue
            detail = dict(getattr(rep, "user_properties", ())).get("detail", "")
            rows.append((name, "PASS" if rep.passed else "FAIL", rep.duration, detail))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, dt, detail in sorted(rows):
        num = int(name.split("_")[2])
        terminalreporter.write_line(f"{status} criterion {num:2d} ({dt:6.1f} s): {detail}")
