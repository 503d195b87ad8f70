import numpy as np
import pytest

from prt_relight.geometry import quad_mesh, uv_sphere
from prt_relight.scene import Camera


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_unit(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


@pytest.fixture
def sphere_mesh():
    return uv_sphere(1.0, 32, 16)


@pytest.fixture
def sphere_camera():
    return Camera.look_at("cam", [0.4, 0.5, 3.0], [0, 0, 0], [0, 1, 0], 45.0, 32, 32)


@pytest.fixture
def quad():
    return quad_mesh(2.0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
