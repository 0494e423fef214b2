import numpy as np
import pytest

from tdt.lattice import DurationSet, JointProblem


def random_problem(rng, T=None, U=None, V=None, durations=None, max_T=6, max_U=3, max_V=5, pool=4):
    """Random instance with N(0, 1) logits; unspecified sizes are drawn too."""
    T = int(rng.integers(1, max_T + 1)) if T is None else T
    U = int(rng.integers(0, max_U + 1)) if U is None else U
    V = int(rng.integers(1, max_V + 1)) if V is None else V
    if durations is None:
        while True:
            k = int(rng.integers(1, pool + 1))
            ds = sorted(rng.choice(pool, size=k, replace=False).tolist())
            if ds[-1] >= 1:
                break
        durations = ds
    durations = DurationSet(durations)
    logits = rng.standard_normal((T, U + 1, V + 1 + len(durations)))
    targets = rng.integers(0, V, size=U)
    return JointProblem(logits, targets, V, durations)


def uniform_problem(T, U, V, durations, targets=None):
    durations = DurationSet(durations)
    targets = [0] * U if targets is None else targets
    return JointProblem(np.zeros((T, U + 1, V + 1 + len(durations))), targets, V, durations)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


# criterion number -> (title, passed, measured figures)
_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    n, title = marker
    detail = dict(report.user_properties).get("detail", "")
    _CRITERIA[n] = (title, report.passed, detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report._criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[n]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {n}: {title}" + (f" ({detail})" if detail else ""))
