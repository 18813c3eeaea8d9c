import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("lmkan", deadline=None, max_examples=60)
settings.load_profile("lmkan")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def heavy_tailed(rng, n):
    """Normal samples mixed with Cauchy tails and a few huge magnitudes."""
    x = rng.standard_normal(n)
    k = n // 10
    x[:k] = rng.standard_cauchy(k)
    x[k:k + 8] = np.array([-1e3, 1e3, -250.0, 250.0, -40.0, 40.0, -1e6, 1e6])[: min(8, n - k)]
    return rng.permutation(x)


ACCEPTANCE = {
    1: "oracle equivalence",
    2: "partition of unity and continuity",
    3: "gradients vs central differences",
    4: "Hessian penalty exactness",
    5: "fusion preserves outputs",
    6: "cost accounting",
    7: "linearization under heavy regularization",
    8: "desk-scale distillation",
    9: "throughput flat in G",
    10: "serialization",
}
_outcomes = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n = mark.args[0]
    ok = rep.passed if rep.when == "call" else False
    _outcomes[n] = _outcomes.get(n, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in ACCEPTANCE.items():
        # a criterion whose tests never ran counts as failed
        status = "PASS" if _outcomes.get(n, False) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}  {name}")
