"""Finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .decisions import record_decisions
from .tensor import EXTENDED, Tensor

# Central differences are taken at shrinking steps and the estimate whose
# change from the previous step is smallest is kept. In extended precision
# roundoff stays far below the 1e-6 tolerance even at the smallest step.
STEP = 1e-2
SHRINK = 4.0
TRIES = 6


@dataclass
class GradCheckResult:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_err(self) -> float:
        return abs(self.analytic - self.numeric) / (abs(self.numeric) + 1e-8)


def central_difference(f: Callable[[], float], arr: np.ndarray, index: tuple, h: float) -> float:
    """Sixth-order central difference of ``f`` along one entry of ``arr``.

    Differences are formed pairwise before weighting, so a loss that does not
    move gives exactly zero. ``arr`` is restored before returning.
    """
    orig = arr[index]
    values = {}
    try:
        for k in (1, 2, 3):
            for sign in (1, -1):
                arr[index] = orig + sign * k * h
                values[sign * k] = f()
    finally:
        arr[index] = orig
    d1, d2, d3 = (values[k] - values[-k] for k in (1, 2, 3))
    return (45.0 * d1 - 9.0 * d2 + d3) / (60.0 * h)


def numeric_derivative(f: Callable[[], float], arr: np.ndarray, index: tuple, h: float = STEP) -> float:
    """Central differences at steps ``h, h/4, ...``; keeps the most stable estimate."""
    prev = central_difference(f, arr, index, h)
    best, best_change = prev, np.inf
    for _ in range(TRIES - 1):
        h /= SHRINK
        cur = central_difference(f, arr, index, h)
        change = abs(cur - prev)
        if change < best_change:
            best, best_change = cur, change
        if change <= 1e-13 * (abs(cur) + 1e-8):
            break
        prev = cur
    return float(best)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    samples_per_param: int = 10,
    h: float = STEP,
    extended: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> List[GradCheckResult]:
    """Compare analytic gradients with finite differences at sampled entries.

    Discrete choices made during the reference forward pass (ReLU masks,
    argmax, channel ranking, histograms) are replayed during the perturbed
    evaluations.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    with record_decisions() as tape:
        loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    def evaluate() -> float:
        with tape.replay():
            return loss_fn().data[()]

    saved = {name: p.data for name, p in params.items()}
    if extended:
        for p in params.values():
            p.data = p.data.astype(EXTENDED)
    results = []
    try:
        results = _sample(params, analytic, evaluate, samples_per_param, h, rng)
    finally:
        for name, p in params.items():
            p.data = saved[name]
    return results


def _sample(params, analytic, evaluate, samples_per_param, h, rng) -> List[GradCheckResult]:
    results = []
    for name, p in params.items():
        flat_count = p.size
        picks = rng.choice(flat_count, size=min(samples_per_param, flat_count), replace=False)
        for flat in np.sort(picks):
            index = np.unravel_index(flat, p.shape)
            num = numeric_derivative(evaluate, p.data, index, h)
            results.append(GradCheckResult(name, tuple(int(i) for i in index), float(analytic[name][index]), num))
    return results


def max_rel_err(results: Sequence[GradCheckResult]) -> float:
    return max((r.rel_err for r in results), default=0.0)
