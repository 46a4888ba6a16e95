import numpy as np
import pytest

from specface.mesh import Mesh, icosphere


def cube_mesh(center=(0.0, 0.0, 0.0), half=1.0) -> Mesh:
    c = np.array(center, dtype=np.float64)
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64) * half + c
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, cc, d in quads:
        faces += [(a, b, d), (b, cc, d)]  # diagonals avoid corners 0 and 7
    return Mesh(v, np.array(faces))


def grid_mesh(n=5, z=None) -> Mesh:
    """Flat (n x n)-vertex triangulated square in the plane z = 0 (or a height field)."""
    xs, ys = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
    zs = np.zeros_like(xs) if z is None else z(xs, ys)
    v = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1
            faces += [(a, b, c), (a, c, d)]
    return Mesh(v, np.array(faces))


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def ico2():
    return icosphere(2)


@pytest.fixture
def ico3():
    return icosphere(3)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
