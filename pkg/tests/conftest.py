import numpy as np
import pytest

from fibrefield.field import constant_field
from fibrefield.geometry import PointPattern, WindowRect
from fibrefield.model import Hyperparams
from fibrefield.sampler import init_state


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_window():
    return WindowRect(0.0, 0.0, 40.0, 30.0)


@pytest.fixture
def small_hyper():
    # cheap-to-mix settings for unit tests: short fibres, tight displacement
    return Hyperparams(kappa=1.5, lam=8.0, sigma_disp=1.0, eta=0.3)


@pytest.fixture
def small_pattern(small_window):
    pts = np.array(
        [
            [8.0, 15.2],
            [12.0, 14.6],
            [16.0, 15.5],
            [20.0, 14.9],
            [30.0, 5.0],
            [5.0, 25.0],
        ]
    )
    return PointPattern(pts, small_window)


def make_state(pattern, h, seed=0, constant_likelihood=False, theta0=0.0):
    """Chain state on an analytic constant field (no field re-estimation)."""
    fld = constant_field(pattern.window, theta0)
    return init_state(
        pattern,
        h,
        seed=seed,
        step_len=1.0,
        spacing=1.0,
        fld=fld,
        constant_likelihood=constant_likelihood,
    )


@pytest.fixture
def small_state(small_pattern, small_hyper):
    return make_state(small_pattern, small_hyper, seed=7)
