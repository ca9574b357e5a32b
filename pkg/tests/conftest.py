import re

import numpy as np
import pytest

from tginee.link_fn import LinkFunction
from tginee.tensor_core import FactorPair, SparseMultiLayerGraph

ALL_LINKS = [
    LinkFunction("identity"),
    LinkFunction("logit"),
    LinkFunction("probit"),
    LinkFunction("sparse_logit", s=0.3),
]


def random_factors(rng, n, M, R, scale=0.5):
    return FactorPair(rng.normal(0, scale, size=(n, R)), rng.normal(0, scale, size=(M, R)))


def identity_safe_factors(rng, n, M, R):
    """Factors whose identity-link probabilities stay well inside (0, 1)."""
    alpha = rng.uniform(0.3, 0.8, size=(n, R))
    beta = rng.uniform(0.05, 0.4, size=(M, R)) / R
    return FactorPair(alpha, beta)


def random_graph(rng, n, M, density=0.4, diagonal=False):
    g = SparseMultiLayerGraph(n, M)
    for m in range(M):
        for i in range(n):
            for j in range(i if diagonal else i + 1, n):
                if rng.random() < density:
                    g.add_edge(i, j, m)
    return g


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    grad = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        grad.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(grad, axis=-1)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            match = re.search(r"test_acceptance\.py::.*test_criterion_(\d+)", rep.nodeid)
            if not match:
                continue
            detail = dict(getattr(rep, "user_properties", [])).get("detail", "")
            lines.append((int(match.group(1)), "PASS" if outcome == "passed" else "FAIL", detail))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
