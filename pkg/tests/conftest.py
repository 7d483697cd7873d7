"""Shared fixtures: the two worked examples and small helpers."""

from __future__ import annotations

import numpy as np
import pytest

from splitavf import LangevinModel, State, builtin_potential


@pytest.fixture(scope="session")
def example1() -> LangevinModel:
    # scalar quartic F = q^4, unit friction and noise, X0 = (1, 1)
    return LangevinModel(
        m=1, d=1, v=1.0, sigma=np.array([[1.0]]),
        potential=builtin_potential("quartic1d"),
        x0=State(p=[1.0], q=[1.0]),
    )


@pytest.fixture(scope="session")
def example2() -> LangevinModel:
    # planar F = q1^8 + q2^2 + 2 q1 q2, all-ones diffusion, X0 = (1, 1, 1, 1)
    return LangevinModel(
        m=2, d=2, v=1.0, sigma=np.ones((2, 2)),
        potential=builtin_potential("coupled2d"),
        x0=State(p=[1.0, 1.0], q=[1.0, 1.0]),
    )


@pytest.fixture(scope="session")
def harmonic1() -> LangevinModel:
    # F = q^2 / 2: linear dynamics, the exactness control case
    return LangevinModel(
        m=1, d=1, v=1.0, sigma=np.array([[1.0]]),
        potential=builtin_potential("harmonic"),
        x0=State(p=[1.0], q=[1.0]),
    )
