"""Empirical checks of heat kernel bounds, square functions and tent norms.

Constants fitted here are lower bounds obtained from finitely many samples;
reports say so through their `method` field.
"""
import logging
import math
from typing import Optional, Sequence

import numpy as np
from pydantic import model_validator
from scipy.special import gammaln
from scipy.stats import linregress

from .calculus import (
    SpectralCalculus, apply_family, apply_function, frac_power, heat_kernel, operator_matrix, phi,
    sum_family,
)
from .errors import DegenerateSampleError, InsufficientDataError, ParameterError, UnsupportedOperatorError
from .models import EstimateReport, LabModel, NDArray
from .normest import linear_pnorm, sublinear_pnorm
from .operators import Generator, gamma, gamma_len
from .paraproducts import QuadratureGrid, build_grid
from .space import MetricMeasureSpace, ball, lp_norm, volume

logger = logging.getLogger(__name__)

UE_C_MAX = 1e6
UE_BISECTIONS = 60
WINDOW_SLACK = 1e-9
SERIES_RTOL = 1e-20
# square-function integrals run this many decades below the grid before the closed-form tail
TAIL_DECADES = 6


class TimeField(LabModel):
    """F(t_k, x) sampled on the nodes of a quadrature grid."""

    values: NDArray
    grid: QuadratureGrid

    @model_validator(mode="after")
    def check_values(self):
        # (K, n) for one field, (K, n, m) for a batch of m fields
        if self.values.ndim not in (2, 3) or self.values.shape[0] != self.grid.size:
            raise ParameterError("time field must have one row per quadrature node")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("time field entries must be finite")
        return self


# ---------------------------------------------------------------- (UE)


def _ue_threshold(log_c_lo, log_c_hi, a, b):
    """Smallest log C with log C - b / C >= a, entrywise, by bisection."""
    lo = np.full(a.shape, log_c_lo)
    hi = np.full(a.shape, log_c_hi)
    for _ in range(UE_BISECTIONS):
        mid = (lo + hi) / 2
        ok = mid - b * np.exp(-mid) >= a
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    return hi


def fit_ue(calc: SpectralCalculus, space: MetricMeasureSpace, t_window: Optional[tuple[float, float]] = None,
           times: int = 12) -> EstimateReport:
    """Smallest C >= 1 with |p_t(x,y)| <= C exp(-d^2/(C t)) / V(x, sqrt t) on the sampled window."""
    lo_allowed, hi_allowed = space.scale_h ** 2, space.diameter ** 2
    if t_window is None:
        t_window = (lo_allowed, hi_allowed)
    t0, t1 = t_window
    if t0 < lo_allowed * (1 - WINDOW_SLACK) or t1 > hi_allowed * (1 + WINDOW_SLACK) or not t0 <= t1:
        raise ParameterError(f"time window [{t0:.3g}, {t1:.3g}] must lie in [{lo_allowed:.3g}, {hi_allowed:.3g}]")

    t_values = np.geomspace(t0, t1, times) if t1 > t0 else np.array([t0])
    d2 = space.dist ** 2
    points = np.arange(space.n)
    worst = 0.0
    failed = 0
    for t in t_values:
        kernel = np.abs(heat_kernel(calc, t))
        V = volume(space, points, math.sqrt(t))
        with np.errstate(divide="ignore"):
            a = np.log(kernel) + np.log(V)[:, None]
        b = d2 / t
        live = np.isfinite(a)
        # entries that fail even at C_max
        too_big = live & (math.log(UE_C_MAX) - b / UE_C_MAX < a)
        failed += int(too_big.sum())
        fit = live & ~too_big
        if np.any(fit):
            log_c = _ue_threshold(0.0, math.log(UE_C_MAX), a[fit], b[fit])
            worst = max(worst, float(log_c.max()))
        logger.debug("UE at t=%.3g: running log C %.3g", t, worst)

    samples = int(t_values.size * space.n ** 2)
    window = {"t_min": float(t0), "t_max": float(t1), "times": int(t_values.size)}
    if failed:
        logger.warning("no C <= %.0e satisfies the Gaussian bound at %d entries", UE_C_MAX, failed)
        return EstimateReport(
            name="ue", fitted_constants={"C": None}, violations=failed, window=window,
            samples=samples, method="fit", notes=f"fit failed: no C <= {UE_C_MAX:.0e}",
        )
    C = math.exp(worst)
    violations = _ue_violations(calc, space, t_values, C)
    return EstimateReport(
        name="ue", fitted_constants={"C": C}, violations=violations, window=window,
        samples=samples, method="fit",
    )


def _ue_violations(calc: SpectralCalculus, space: MetricMeasureSpace, t_values, C: float) -> int:
    count = 0
    points = np.arange(space.n)
    for t in t_values:
        kernel = np.abs(heat_kernel(calc, t))
        V = volume(space, points, math.sqrt(t))
        bound = C * np.exp(-space.dist ** 2 / (C * t)) / V[:, None]
        count += int(np.sum(kernel > bound * (1 + 1e-12)))
    return count


# ---------------------------------------------------------------- (DG)


def _is_metzler(gen: Generator) -> bool:
    L = gen.matrix
    if np.iscomplexobj(L):
        return False
    off = L - np.diag(np.diag(L))
    return bool(np.all(off <= 0))


def semigroup_columns(calc: SpectralCalculus, t: float, cols: np.ndarray) -> np.ndarray:
    """Columns of e^{-tL}; entrywise accurate for generators with nonpositive off-diagonal."""
    gen = calc.generator
    cols = np.asarray(cols)
    if not _is_metzler(gen):
        return operator_matrix(calc, lambda x: np.exp(-t * x))[:, cols]
    # uniformization: a series of nonnegative terms, no cancellation
    L = gen.matrix
    c = float(np.diag(L).max())
    jump = c * np.eye(gen.n) - L
    term = np.eye(gen.n)[:, cols]
    total = term.copy()
    k = 0
    while True:
        k += 1
        term = (t / k) * (jump @ term)
        total += term
        # entrywise, so entries far from the columns are summed until they converge too
        if k > t * c and np.all(term <= SERIES_RTOL * total):
            break
    return math.exp(-t * c) * total


def centered_pairs(space: MetricMeasureSpace, separations: Sequence[float]) -> list[tuple[int, int]]:
    """Center pairs at (approximately) the requested distances, anchored at a most central point."""
    x1 = int(np.argmin(space.dist.max(axis=1)))
    row = space.dist[x1]
    return [(x1, int(np.argmin(np.abs(row - s)))) for s in separations]


def _block_norm(mu: np.ndarray, E: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> float:
    block = np.sqrt(mu[rows])[:, None] * E[rows] / np.sqrt(mu[cols])[None, :]
    return float(np.linalg.norm(block, ord=2))


def restricted_norm(calc: SpectralCalculus, t: float, rows: np.ndarray, cols: np.ndarray,
                    kernel_free: bool = False) -> float:
    """||1_rows e^{-tL} 1_cols||_{L^2(mu) -> L^2(mu)}, optionally on the kernel complement."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if kernel_free:
        E = operator_matrix(calc, lambda x: np.exp(-t * x)) @ (np.eye(calc.n) - calc.kernel_projector)
        E = E[:, cols]
    else:
        E = semigroup_columns(calc, t, cols)
    return _block_norm(calc.generator.space.mu, E, rows, cols)


def davies_gaffney(calc: SpectralCalculus, gen: Generator, r_list: Sequence[float],
                   ball_pairs: Sequence[tuple[int, int]], samples: int = 200, seed: int = 0) -> EstimateReport:
    space = gen.space
    mu = space.mu
    rows = []
    for r in r_list:
        t = r * r
        for x1, x2 in ball_pairs:
            B1 = ball(space, x1, r)
            B2 = ball(space, x2, r)
            separation = float(space.dist[np.ix_(B1, B2)].min())
            E = semigroup_columns(calc, t, B1)
            semi = _block_norm(mu, E, B2, B1)
            grad = None
            if gen.has_gamma:
                fn = lambda X, E=E, B2=B2, r=r: r * gamma_len(gen, E @ X)[B2]
                grad = sublinear_pnorm(fn, len(B1), mu[B1], mu[B2], 2.0, samples=samples, seed=seed).value
            rows.append({
                "r": float(r), "x1": x1, "x2": x2, "distance": separation,
                "scaled_distance": separation ** 2 / t, "semigroup_norm": semi, "gradient_norm": grad,
            })

    constants = {}
    for family in ("semigroup_norm", "gradient_norm"):
        usable = [row for row in rows if row[family] is not None and row[family] > 0]
        if family == "gradient_norm" and not gen.has_gamma:
            continue
        if len(usable) < 3:
            raise InsufficientDataError(f"{family}: {len(usable)} usable ball pairs, need 3")
        if len({row["scaled_distance"] for row in usable}) < 2:
            raise InsufficientDataError(f"{family}: all ball pairs sit at the same distance")
        fit = linregress([row["scaled_distance"] for row in usable], [math.log(row[family]) for row in usable])
        prefix = "semigroup" if family == "semigroup_norm" else "gradient"
        constants[f"{prefix}_slope"] = float(fit.slope)
        constants[f"{prefix}_intercept"] = float(fit.intercept)
        constants[f"{prefix}_r2"] = float(fit.rvalue ** 2)

    violations = sum(1 for key, value in constants.items() if key.endswith("_slope") and value >= 0)
    return EstimateReport(
        name="dg", fitted_constants=constants, violations=violations,
        window={"radii": [float(r) for r in r_list], "pairs": len(ball_pairs)},
        samples=samples, seed=seed, rows=rows,
    )


# ---------------------------------------------------------------- (G_p)


def gradient_bound(calc: SpectralCalculus, gen: Generator, p: float, t_grid=None, samples: int = 1000,
                   seed: int = 0, ascent_steps: int = 100) -> EstimateReport:
    if not gen.has_gamma:
        raise UnsupportedOperatorError(f"{gen.kind} generator has no carré du champ")
    if not p > 1:
        raise ParameterError(f"p must exceed 1, got {p}")
    if t_grid is None:
        t_grid = np.geomspace(1 / calc.lambda_max, 1 / calc.lambda_min, 8)
    mu = gen.space.mu
    exact_available = gen.self_adjoint and gen.conservative and p == 2
    lam = np.abs(calc.eigenvalues[~calc.kernel_mask])

    rows = []
    for t in np.asarray(t_grid, dtype=float):
        fn = lambda X, t=t: math.sqrt(t) * gamma_len(gen, apply_function(calc, lambda x: np.exp(-t * x), X))
        estimate = sublinear_pnorm(fn, gen.n, mu, mu, p, samples=samples, seed=seed, ascent_steps=ascent_steps)
        exact = float(np.max(np.sqrt(t * lam) * np.exp(-t * lam))) if exact_available else None
        rows.append({"t": float(t), "estimate": estimate.value, "exact": exact, "argmax": estimate.argmax})

    best = max(rows, key=lambda row: row["estimate"])
    constants = {"sup": best["estimate"], "t_argmax": best["t"]}
    violations = 0
    if exact_available:
        constants["exact_sup"] = max(row["exact"] for row in rows)
        violations = sum(1 for row in rows if row["estimate"] > row["exact"] * (1 + 1e-6))
    return EstimateReport(
        name=f"gradient_p{p:g}", fitted_constants=constants, violations=violations,
        window={"t": [row["t"] for row in rows], "p": p}, samples=samples, seed=seed, rows=rows,
    )


# ---------------------------------------------------------------- square functions


def square_function_constant(alpha: float, N: int) -> float:
    """int_0^inf s^{2 alpha} phi_N(s)^2 ds/s in closed form."""
    total = 0.0
    for j in range(N):
        for k in range(N):
            e = 2 * alpha + j + k
            total += math.exp(gammaln(e) - gammaln(j + 1) - gammaln(k + 1) - e * math.log(2))
    return total


def _normalized(space: MetricMeasureSpace, profile: np.ndarray, f, p: float, normalize: bool) -> float:
    value = lp_norm(space, profile, p)
    if not normalize:
        return value
    base = lp_norm(space, f, p)
    if base == 0:
        raise DegenerateSampleError("||f||_p vanishes")
    return value / base


def _extended(grid: QuadratureGrid) -> QuadratureGrid:
    return build_grid(grid.t_min * 10.0 ** -TAIL_DECADES, grid.t_max, grid.nodes_per_decade)


def vertical_square_profile(calc: SpectralCalculus, f, alpha: float, N: int, grid: QuadratureGrid) -> np.ndarray:
    """x -> (int_0^inf |(tL)^alpha P_t^(N) f(x)|^2 dt/t)^{1/2}."""
    if not alpha > 0 or N < 1:
        raise ParameterError("need alpha > 0 and N >= 1")
    f = np.asarray(f)
    grid = _extended(grid)
    F = apply_family(calc, lambda x: np.power(x, alpha) * phi(N, x), grid.nodes, f, deflate=True)
    squared = np.abs(F) ** 2 @ grid.weights
    # below the extended window P_t is the identity to leading order
    squared = squared + grid.t_min ** (2 * alpha) / (2 * alpha) * np.abs(frac_power(calc, alpha, f)) ** 2
    return np.sqrt(squared)


def vertical_square_function(calc: SpectralCalculus, f, alpha: float, N: int, p: float,
                             grid: QuadratureGrid, normalize: bool = True) -> float:
    """L^p norm of the vertical square function, over ||f||_p unless normalize is off."""
    profile = vertical_square_profile(calc, f, alpha, N, grid)
    return _normalized(calc.generator.space, profile, f, p, normalize)


def vertical_square_function_exact(calc: SpectralCalculus, f, alpha: float, N: int) -> float:
    if calc.path != "hermitian":
        raise UnsupportedOperatorError("the exact L^2 value needs a self-adjoint generator")
    space = calc.generator.space
    f = np.asarray(f)
    base = lp_norm(space, f, 2)
    if base == 0:
        raise DegenerateSampleError("||f||_2 vanishes")
    orthogonal = f - calc.kernel_projector @ f
    return math.sqrt(square_function_constant(alpha, N)) * lp_norm(space, orthogonal, 2) / base


def gamma_square_profile(calc: SpectralCalculus, gen: Generator, f, alpha: float, N: int,
                         grid: QuadratureGrid) -> np.ndarray:
    """x -> (int_0^inf |sqrt(t) Gamma((tL)^{-alpha/2} P_t^(N) f)(x)|^2 dt/t)^{1/2}."""
    if not gen.has_gamma:
        raise UnsupportedOperatorError(f"{gen.kind} generator has no carré du champ")
    if not 0 < alpha < 1 or N < 1:
        raise ParameterError("need alpha in (0, 1) and N >= 1")
    f = np.asarray(f)
    grid = _extended(grid)
    H = apply_family(calc, lambda x: np.power(x, -alpha / 2) * phi(N, x), grid.nodes, f, deflate=True)
    squared = (np.abs(gamma(gen, H, H)) * grid.nodes[None, :]) @ grid.weights
    root = frac_power(calc, -alpha / 2, f)
    squared = squared + grid.t_min ** (1 - alpha) / (1 - alpha) * np.abs(gamma(gen, root, root))
    return np.sqrt(squared)


def gamma_square_function(calc: SpectralCalculus, gen: Generator, f, alpha: float, N: int, p: float,
                          grid: QuadratureGrid, normalize: bool = True) -> float:
    profile = gamma_square_profile(calc, gen, f, alpha, N, grid)
    return _normalized(gen.space, profile, f, p, normalize)


def gradient_time_field(calc: SpectralCalculus, gen: Generator, f, D: int, grid: QuadratureGrid) -> TimeField:
    """sqrt(t) Gamma(P_t f) on the grid nodes."""
    P = apply_family(calc, lambda x: phi(D, x), grid.nodes, np.asarray(f))
    values = np.sqrt(grid.nodes[None, :]) * gamma_len(gen, P)
    return TimeField(values=values.T, grid=grid)


def stack_fields(fields: Sequence[TimeField]) -> TimeField:
    """Batch single fields on a common grid into one (K, n, m) field."""
    grid = fields[0].grid
    return TimeField(values=np.stack([F.values for F in fields], axis=-1), grid=grid)


def orthogonality_ratio(calc: SpectralCalculus, F: TimeField, alpha: float, N: int, p: float) -> float:
    """||int (tL)^alpha P_t^(N) F_t dt/t||_p over ||(int |F_t|^2 dt/t)^{1/2}||_p."""
    space = calc.generator.space
    grid = F.grid
    lhs = sum_family(calc, lambda x: np.power(x, alpha) * phi(N, x), grid.nodes, grid.weights,
                     F.values.T, deflate=True)
    rhs = lp_norm(space, np.sqrt(np.abs(F.values.T) ** 2 @ grid.weights), p)
    if rhs == 0:
        raise DegenerateSampleError("time field vanishes")
    return lp_norm(space, lhs, p) / rhs


# ---------------------------------------------------------------- tent spaces


def tent_profile(F: TimeField, space: MetricMeasureSpace, angle: float = 1.0) -> np.ndarray:
    """x -> (sum_k w_k avg_{B(x, angle sqrt(t_k))} |F_k|^2)^{1/2}, per field of a batch."""
    if angle < 1:
        raise ParameterError(f"aperture must be >= 1, got {angle}")
    grid = F.grid
    mu = space.mu
    weighted = np.abs(F.values) ** 2 * (mu if F.values.ndim == 2 else mu[:, None])
    total = np.zeros(F.values.shape[1:])
    for k, t in enumerate(grid.nodes):
        # open balls always contain their center
        inside = (space.dist < angle * math.sqrt(t)).astype(float)
        mass = inside @ mu
        avg = inside @ weighted[k]
        total += grid.weights[k] * (avg / (mass if avg.ndim == 1 else mass[:, None]))
    return np.sqrt(total)


def tent_norm(F: TimeField, space: MetricMeasureSpace, p: float, angle: float = 1.0):
    """T^{p,2} norm with cones of aperture `angle`; one value per field of a batch."""
    return lp_norm(space, tent_profile(F, space, angle), p)


def change_of_angle_ratio(F: TimeField, space: MetricMeasureSpace, p: float, j: int, nu: float):
    if j < 0:
        raise ParameterError("aperture exponent must be nonnegative")
    base = np.asarray(tent_norm(F, space, p, 1.0))
    if np.any(base == 0):
        raise DegenerateSampleError("tent norm of F vanishes")
    if j == 0:
        return 1.0 if base.ndim == 0 else np.ones(base.shape)
    return tent_norm(F, space, p, 2.0 ** j) / (2 ** (j * nu / 2) * base)


# ---------------------------------------------------------------- imaginary powers


def imaginary_power_growth(calc: SpectralCalculus, p: float, eta_grid: Sequence[float], samples: int = 200,
                           seed: int = 0) -> EstimateReport:
    mu = calc.generator.space.mu
    project = np.eye(calc.n) - calc.kernel_projector
    rows = []
    for eta in eta_grid:
        M = operator_matrix(calc, lambda x, eta=eta: np.power(x.astype(complex), 1j * eta), deflate=True)
        estimate = linear_pnorm(M, mu, mu, p, samples=samples, seed=seed, project=project, real=False)
        rows.append({"eta": float(eta), "norm": estimate.value, "argmax": estimate.argmax})

    constants: dict[str, Optional[float]] = {"max_norm": max(row["norm"] for row in rows)}
    usable = [row for row in rows if row["eta"] != 0 and row["norm"] > 0]
    x = [math.log1p(abs(row["eta"])) for row in usable]
    if len(set(x)) >= 2:
        fit = linregress(x, [math.log(row["norm"]) for row in usable])
        constants["s"] = float(fit.slope)
        constants["r2"] = float(fit.rvalue ** 2) if np.isfinite(fit.rvalue) else None
    else:
        constants["s"] = None
        constants["r2"] = None
    return EstimateReport(
        name=f"imaginary_p{p:g}", fitted_constants=constants,
        window={"eta": [float(e) for e in eta_grid], "p": p}, samples=samples, seed=seed, rows=rows,
    )
