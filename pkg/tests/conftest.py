import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from rig_annotate.geom import RigidTransform, quat_from_axis_angle

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_transform(rng, from_frame="A", to_frame="B", max_t=1.0):
    q = rng.normal(size=4)
    return RigidTransform(q / np.linalg.norm(q), rng.uniform(-max_t, max_t, 3), from_frame, to_frame)


def rot_z(deg, t=(0.0, 0.0, 0.0), from_frame="A", to_frame="B"):
    return RigidTransform(quat_from_axis_angle([0, 0, 1], math.radians(deg)), t, from_frame, to_frame)


finite = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite)
quat = st.tuples(finite, finite, finite, finite).filter(lambda q: np.linalg.norm(q) > 1e-3)


@st.composite
def transforms(draw, from_frame="A", to_frame="B"):
    return RigidTransform(np.array(draw(quat)), np.array(draw(vec3)), from_frame, to_frame)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance summary ----------------------------------------------------------

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and report.passed:
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "seconds": 0.0})
    if report.when == "call":
        entry["seconds"] += report.duration
    if report.failed or report.skipped:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"{status} criterion {number}: {e['title']} ({e['seconds']:.1f} s)")
