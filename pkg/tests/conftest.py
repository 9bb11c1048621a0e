from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mixercseg.autodiff import Tensor, check_gradients, max_rel_err

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def assert_grads(loss_fn, params, tol=1e-6, samples=10):
    results = check_gradients(loss_fn, params, samples_per_param=samples)
    err = max_rel_err(results)
    worst = max(results, key=lambda r: r.rel_err)
    assert err < tol, f"worst {worst.name}{worst.index}: analytic {worst.analytic} vs numeric {worst.numeric}"
    return results


def weighted_sum(t: Tensor, seed: int = 7) -> Tensor:
    """Scalar probe ``sum(t * r)`` with fixed random weights, so every output entry matters."""
    from mixercseg.autodiff import ops

    r = np.random.default_rng(seed).standard_normal(t.shape)
    return ops.sum(t * Tensor(r.astype(t.dtype)))
