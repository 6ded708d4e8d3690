from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rk4_trajectory(v0, i0, t_end, tau_m, tau_s, h=1e-7):
    """Classic RK4 on tau_m dV/dt = I - V, tau_s dI/dt = -I."""
    n = max(1, int(round(t_end / h)))
    h = t_end / n
    y = np.array([v0, i0], float)

    def f(y):
        return np.array([(y[1] - y[0]) / tau_m, -y[1] / tau_s])

    for _ in range(n):
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y
