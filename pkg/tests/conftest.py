from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from synthpanel.dgp import DgpSpec, simulate

FIXTURES = Path(__file__).parent / "fixtures"

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def convex_sim():
    return simulate(DgpSpec(mode="convex_combination", seed=11, noise_sd=0.0))


@pytest.fixture
def factor_sim():
    return simulate(DgpSpec(seed=5))


def slsqp_weights(x1, x0, v=None):
    """Reference simplex least squares via scipy's SLSQP (independent of the package solver)."""
    from scipy.optimize import minimize

    k, J = x0.shape
    v = np.full(k, 1.0 / k) if v is None else np.asarray(v, float) / np.sum(v)

    def f(w):
        r = x1 - x0 @ w
        return float(r @ (v * r))

    def g(w):
        r = x1 - x0 @ w
        return -2.0 * x0.T @ (v * r)

    best = None
    for start in [np.full(J, 1.0 / J), *np.eye(J)]:
        res = minimize(
            f, start, jac=g, method="SLSQP", bounds=[(0, 1)] * J,
            constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1, "jac": lambda w: np.ones(J)}],
            options={"ftol": 1e-15, "maxiter": 1000},
        )
        w = np.clip(res.x, 0, None)
        w /= w.sum()
        if best is None or f(w) < f(best):
            best = w
    return best, f(best)
