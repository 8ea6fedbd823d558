"""Randomized lower bounds for weighted operator p-norms.

Every value reported here is the ratio ||T f|| / ||f|| of a vector that was
actually evaluated, so it is a lower bound on the true norm. Sample k of a
stream with seed s comes from default_rng([s, k]); the refinement stage only
depends on the seed, so estimates never decrease as the sample count grows.
"""
import logging
import math
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel

from .space import weighted_lp_norm

logger = logging.getLogger(__name__)

ASCENT_STARTS = 3
POWER_ITERATIONS = 30
PROFILES = ("gaussian", "rademacher", "point", "bump")
# stream id reserved for the hill climb; sample ids start at 0
ASCENT_STREAM = 2 ** 32 - 1


class NormEstimate(BaseModel):
    value: float
    argmax: int  # sample index, or -1 when the refinement stage won
    samples: int
    sampled_value: float
    refined_value: float
    method: str = "estimate"


def random_field(n: int, seed: int, k: int, real: bool = True) -> np.ndarray:
    """Sample k of the stream: cycles through Gaussian, sign, point-mass and bump profiles."""
    rng = np.random.default_rng([seed, k])
    profile = PROFILES[k % len(PROFILES)]
    if profile == "gaussian":
        v = rng.standard_normal(n)
    elif profile == "rademacher":
        v = rng.choice([-1.0, 1.0], size=n)
    elif profile == "point":
        v = np.zeros(n)
        v[rng.integers(n)] = 1.0
        v += 0.01 * rng.standard_normal(n)
    else:
        center = rng.integers(n)
        width = rng.uniform(1.0, max(1.0, n / 4))
        v = np.exp(-0.5 * ((np.arange(n) - center) / width) ** 2)
    if not real:
        v = v * np.exp(2j * np.pi * rng.uniform(size=n))
    return v


def random_fields(n: int, count: int, seed: int, real: bool = True, start: int = 0) -> np.ndarray:
    return np.stack([random_field(n, seed, k, real) for k in range(start, start + count)], axis=1)


def _ratios(apply: Callable, X: np.ndarray, p: float, mu_in: np.ndarray, mu_out: np.ndarray) -> np.ndarray:
    num = weighted_lp_norm(apply(X), p, mu_out)
    den = weighted_lp_norm(X, p, mu_in)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def _phase_power(y: np.ndarray, power: float) -> np.ndarray:
    a = np.abs(y)
    phase = np.where(a > 0, y / np.where(a > 0, a, 1.0), 0.0)
    return a ** power * phase


def _dual(y: np.ndarray, p: float, mu: np.ndarray) -> np.ndarray:
    # gradient direction of ||y||_{p,mu} in the unweighted pairing
    return mu * _phase_power(y, p - 1)


def linear_pnorm(matrix: np.ndarray, mu_in: np.ndarray, mu_out: np.ndarray, p: float,
                 samples: int = 200, seed: int = 0, project: Optional[np.ndarray] = None,
                 real: bool = True) -> NormEstimate:
    """Lower bound on ||T||_{L^p(mu_in) -> L^p(mu_out)} for an explicit matrix T."""
    n = matrix.shape[1]
    prep = (lambda X: project @ X) if project is not None else (lambda X: X)
    X = prep(random_fields(n, samples, seed, real))
    ratios = _ratios(lambda Y: matrix @ Y, X, p, mu_in, mu_out)
    best_idx = int(np.argmax(ratios))
    sampled = float(ratios[best_idx])

    refined = 0.0
    if 1 < p < math.inf:
        # dual power iteration from fixed starts
        q = p / (p - 1)
        starts = prep(random_fields(n, ASCENT_STARTS, seed + 1, real))
        adjoint = matrix.conj().T
        for s in range(starts.shape[1]):
            x = starts[:, s]
            for _ in range(POWER_ITERATIONS):
                nx = weighted_lp_norm(x, p, mu_in)
                if nx == 0:
                    break
                y = matrix @ x
                ratio = float(weighted_lp_norm(y, p, mu_out) / nx)
                refined = max(refined, ratio)
                z = adjoint @ _dual(y, p, mu_out)
                z = z / mu_in
                x_new = prep(_phase_power(z, q - 1))
                if real:
                    x_new = np.real(x_new)
                if np.allclose(x_new / max(weighted_lp_norm(x_new, p, mu_in), 1e-300), x / nx, atol=1e-12):
                    break
                x = x_new
    value = max(sampled, refined)
    return NormEstimate(
        value=value, argmax=best_idx if sampled >= refined else -1, samples=samples,
        sampled_value=sampled, refined_value=refined,
    )


def sublinear_pnorm(fn: Callable[[np.ndarray], np.ndarray], n: int, mu_in: np.ndarray, mu_out: np.ndarray,
                    p: float, samples: int = 200, seed: int = 0, ascent_steps: int = 100,
                    project: Optional[np.ndarray] = None, real: bool = True) -> NormEstimate:
    """Lower bound on sup ||fn(f)|| / ||f|| for a (column-batched) positively homogeneous map."""
    prep = (lambda X: project @ X) if project is not None else (lambda X: X)
    X = prep(random_fields(n, samples, seed, real))
    ratios = _ratios(fn, X, p, mu_in, mu_out)
    best_idx = int(np.argmax(ratios))
    sampled = float(ratios[best_idx])

    refined = 0.0
    if ascent_steps > 0:
        rng = np.random.default_rng([seed, ASCENT_STREAM])
        starts = prep(random_fields(n, ASCENT_STARTS, seed + 1, real))
        start_ratios = _ratios(fn, starts, p, mu_in, mu_out)
        x = starts[:, int(np.argmax(start_ratios))]
        current = float(start_ratios.max())
        step = 0.5
        for _ in range(ascent_steps):
            scale = weighted_lp_norm(x, 2, np.ones(n)) / math.sqrt(n)
            trial = prep(x + step * scale * rng.standard_normal(n))
            value = float(_ratios(fn, trial[:, None], p, mu_in, mu_out)[0])
            if value > current:
                x, current = trial, value
            else:
                step *= 0.95
        refined = current
    value = max(sampled, refined)
    return NormEstimate(
        value=value, argmax=best_idx if sampled >= refined else -1, samples=samples,
        sampled_value=sampled, refined_value=refined,
    )
