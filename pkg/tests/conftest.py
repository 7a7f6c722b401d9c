import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from subradiance.coupling import build_lattice, coupling_matrices
from subradiance.lindblad import SystemModel

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")
    config.addinivalue_line("markers", "property: invariant checks that make up the standalone property suite")


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_sessionstart(session):
    session.config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_report(request):
    """Callable ``(number, title, checks)``; records one PASS/FAIL line and fails on any failed check."""

    def report(number, title, checks):
        ok = all(c[1] for c in checks)
        detail = "; ".join(f"{name} {'ok' if good else 'FAILED'} ({info})" for name, good, info in checks)
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} | {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)
        failed = [c for c in checks if not c[1]]
        assert not failed, "; ".join(f"{name}: {info}" for name, _, info in failed)

    return report


def chain_model(n, a=0.15, **kw):
    return SystemModel(coupling_matrices(build_lattice(1, n, a)), **kw)


def random_density(n, seed, rank=None):
    rng = np.random.default_rng(seed)
    d = 2**n
    a = rng.normal(size=(d, rank or d)) + 1j * rng.normal(size=(d, rank or d))
    rho = a @ a.conj().T
    return rho / np.trace(rho)


@pytest.fixture
def chain4():
    return chain_model(4)
