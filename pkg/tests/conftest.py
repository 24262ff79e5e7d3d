import numpy as np
import pytest

from nontrap import geometry


@pytest.fixture(scope="session")
def free_1d():
    return geometry.preset_model("zero")


@pytest.fixture(scope="session")
def longrange_1d():
    return geometry.preset_model("longrange_pow")


@pytest.fixture(scope="session")
def double_bump_1d():
    return geometry.preset_model("double_bump")


@pytest.fixture(scope="session")
def well_1d():
    return geometry.preset_model("well")


@pytest.fixture(scope="session")
def free_2d():
    return geometry.preset_model("zero", dimension=2)


def shell_sample_1d(model, n, rmin=1.5, rmax=30.0, rng_seed=0):
    """Deterministic sample of the energy-window shell, both ends/branches."""
    rng = np.random.default_rng(rng_seed)
    r = rng.uniform(rmin, rmax, size=n)
    sign = rng.choice([-1.0, 1.0], size=n)
    z = (r * sign)[:, None]
    lo, hi = model.energy_window
    p = rng.uniform(lo, hi, size=n)
    v = model.potential.value(z)
    keep = p - v > 0
    zeta = (rng.choice([-1.0, 1.0], size=n) * np.sqrt(np.clip(p - v, 0, None)))[:, None]
    return z[keep], zeta[keep]
