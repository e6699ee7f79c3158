import numpy as np
import pytest

from garmentdyn import assign_material, grid_cloth, material_preset


def central_difference(f, x, eps=1e-6):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, float)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        fp = f(x)
        flat[k] = old - eps
        fm = f(x)
        flat[k] = old
        gf[k] = (fp - fm) / (2 * eps)
    return g


def fd_relative_error(analytic, numeric, floor=1e-8):
    """Componentwise relative error on components larger than ``floor``."""
    a = np.asarray(analytic, float).reshape(-1)
    n = np.asarray(numeric, float).reshape(-1)
    big = np.maximum(np.abs(a), np.abs(n)) > floor
    if not big.any():
        return 0.0
    return float(np.max(np.abs(a[big] - n[big]) / np.maximum(np.abs(a[big]), np.abs(n[big]))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cotton():
    return material_preset("cotton")


@pytest.fixture
def small_cloth(cotton):
    return assign_material(grid_cloth(5, 5, 0.2), cotton)


def right_triangle_obj(tmp_path, name="tri.obj"):
    p = tmp_path / name
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    return p
