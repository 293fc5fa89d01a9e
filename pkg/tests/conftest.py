"""Shared fixtures and the acceptance summary printed after the run."""

from __future__ import annotations

import numpy as np
import pytest

from calibkit.camera import CameraIntrinsics
from calibkit.geometry import default_instrument_model, look_at

_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one of the numbered acceptance criteria")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when != "call":
        return
    number, title = mark.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "detail": ""})
    entry["passed"] = rep.passed
    entry["detail"] = getattr(item, "_acceptance_detail", entry["detail"])


@pytest.fixture
def acceptance_detail(request):
    """Call with a short measurement string; it is echoed in the summary."""

    def record(text: str) -> None:
        request.node._acceptance_detail = text
        print(text)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[number]
        status = "PASS" if e.get("passed") else "FAIL"
        terminalreporter.write_line(f"[{status}] {number}. {e['title']}: {e['detail']}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def model():
    return default_instrument_model()


@pytest.fixture
def intrinsics():
    return CameraIntrinsics(800.0, 820.0, 320.0, 240.0)


@pytest.fixture
def camera_pose():
    return look_at([0.3, 0.2, 0.25], [0.0, 0.0, 0.0])
