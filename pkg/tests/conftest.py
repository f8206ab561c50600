import numpy as np
import pytest

from caspnet.tensor import precision


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def straight_agent(agent_id, kind, x0, y0, vx, vy, steps=15, dt=0.5):
    """Constant-velocity agent with track points t = 0 .. steps-1."""
    import math

    from caspnet.scene import Agent, TrackPoint

    heading = math.atan2(vy, vx) if (vx or vy) else 0.0
    track = [TrackPoint(t, x0 + vx * dt * t, y0 + vy * dt * t, vx, vy, heading) for t in range(steps)]
    return Agent(agent_id, kind, track)


# ---------------------------------------------------------------- acceptance summary

_criteria: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    n, text = mark.args
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    measured = dict(item.user_properties).get("measured", "")
    prev = _criteria.get(n)
    if prev is None or prev[1] == "PASS":
        _criteria[n] = (text, status, measured)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        text, status, measured = _criteria[n]
        line = f"criterion {n}: {status}  {text}"
        if measured:
            line += f"  [{measured}]"
        terminalreporter.write_line(line)
