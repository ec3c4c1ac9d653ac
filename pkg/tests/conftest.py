import numpy as np
import pytest

from gaborsplat.geometry import Camera
from gaborsplat.scene import ParamLayout, Scene


def random_scene(n_prims, n_waves=4, rng=None, mode="gabor", spread=0.6, scale=(0.05, 0.3)):
    """Unconditioned random scene around the origin (any orientation, any opacity)."""
    rng = np.random.default_rng(0) if rng is None else rng
    scene = Scene(np.zeros((n_prims, ParamLayout(n_waves).width)), n_waves, mode)
    scene.set("q", rng.uniform(-spread, spread, (n_prims, 3)))
    scene.set("quat", rng.normal(size=(n_prims, 4)))
    scene.set("scale", np.log(rng.uniform(*scale, (n_prims, 2))))
    scene.set("alpha", rng.normal(0.0, 1.5, (n_prims, 1)))
    scene.set("color_a", rng.normal(size=(n_prims, 3)))
    scene.set("color_b", rng.normal(size=(n_prims, 3)))
    scene.set("w", rng.normal(0.5, 0.5, (n_prims, n_waves)))
    scene.set("f", rng.uniform(0.0, 3.0, (n_prims, n_waves)))
    scene.set("phi", rng.uniform(0.0, 2 * np.pi, (n_prims, n_waves)))
    return scene


def front_camera(width=64, height=64, fx=70.0):
    return Camera.look_at([0.3, -0.2, 2.5], [0, 0, 0], [0, -1, 0], width, height, fx)


@pytest.fixture
def camera():
    return front_camera()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ----------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if report.failed:
        msg = str(report.longrepr).strip().splitlines()[-1] if report.longrepr else ""
        _CRITERIA[number] = (title, "FAIL", detail or msg)
    elif report.when == "call":
        _CRITERIA[number] = (title, "PASS" if report.passed else "SKIP", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} [{status}] {title}" + (f": {detail}" if detail else ""))
