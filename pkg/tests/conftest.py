import numpy as np
import pytest

from softquant import datagen


def rows_from(rng, n, K):
    """Random prediction rows on the simplex."""
    P = rng.dirichlet(np.ones(K), size=n)
    return P


def binomial_sigma(p, n):
    return np.sqrt(p * (1 - p) / n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_class_separable():
    """Feature 1 decides the label; the others are noise."""
    spec = datagen.GeneratorSpec(
        2, [0.5, 0.5],
        (((1.0, [0.5, 1.0, 0.5]),), ((1.0, [0.5, 0.0, 0.5]),)),
    )
    return spec


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance" not in rep.nodeid:
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL", props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"{verdict}  {name}  ({detail})")
