"""Shared small problem instances for the construction tests."""

import numpy as np
import pytest

from icuda.datagen import (
    ShiftGaussConfig,
    TwoMoonConfig,
    gen_shifted_gaussians,
    gen_two_moon,
)


@pytest.fixture(scope="session")
def small_shift_pair():
    cfg = ShiftGaussConfig(d=1, n_source=20, n_target=12, n_eval=40,
                           mu_target=0.5, boundary=0.5, seed=3)
    return gen_shifted_gaussians(cfg)


@pytest.fixture(scope="session")
def small_moon_pair():
    cfg = TwoMoonConfig(n_source=12, n_target=12, n_eval=24, seed=3)
    return gen_two_moon(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
