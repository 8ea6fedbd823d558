"""Paraproducts, the resonant term and their carré du champ splitting.

All integrals over (0, inf) against dt/t are evaluated with the trapezoid
rule in u = log t on a grid adapted to the spectrum of the generator, and
all time families are applied through the spectral calculus in one pass.
"""
import logging
import math
from typing import Literal, Optional

import numpy as np
from pydantic import model_validator

from .calculus import SpectralCalculus, apply_family, frac_power, phi, psi, psi_tilde, sum_family
from .errors import DegenerateSampleError, ParameterError, UnsupportedOperatorError
from .models import DecompositionReport, LabModel, NDArray
from .operators import Generator, gamma
from .space import lp_norm

logger = logging.getLogger(__name__)

LOWER_FACTOR = 1e-2
UPPER_FACTOR = 1e2
MIN_NODES_PER_DECADE = 8
DEGENERATE_NORM = 1e-14
# residuals below this (relative) are at roundoff and carry no order information
ROUNDOFF_FLOOR = 1e-11


class QuadratureGrid(LabModel):
    t_min: float
    t_max: float
    nodes_per_decade: int
    rule: Literal["trapezoid_log"] = "trapezoid_log"
    nodes: NDArray
    weights: NDArray

    @model_validator(mode="after")
    def check_window(self):
        if not 0 < self.t_min < self.t_max:
            raise ParameterError(f"need 0 < t_min < t_max, got [{self.t_min}, {self.t_max}]")
        if self.nodes_per_decade < MIN_NODES_PER_DECADE:
            raise ParameterError(f"nodes_per_decade must be >= {MIN_NODES_PER_DECADE}")
        if self.nodes.shape != self.weights.shape:
            raise ParameterError("nodes and weights differ in length")
        return self

    @property
    def size(self) -> int:
        return int(self.nodes.size)

    @property
    def step(self) -> float:
        """Spacing in log t."""
        return float(np.log(self.nodes[1] / self.nodes[0])) if self.size > 1 else 0.0

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Trapezoid sum over the last axis."""
        return np.asarray(values) @ self.weights


def _trapezoid(t_min: float, t_max: float, count: int, nodes_per_decade: int) -> QuadratureGrid:
    u = np.linspace(math.log(t_min), math.log(t_max), count)
    step = u[1] - u[0]
    weights = np.full(count, step)
    weights[[0, -1]] = step / 2
    return QuadratureGrid(
        t_min=t_min, t_max=t_max, nodes_per_decade=nodes_per_decade,
        nodes=np.exp(u), weights=weights,
    )


def build_grid(t_min: float, t_max: float, nodes_per_decade: int = 40) -> QuadratureGrid:
    if not 0 < t_min < t_max:
        raise ParameterError(f"need 0 < t_min < t_max, got [{t_min}, {t_max}]")
    if nodes_per_decade < MIN_NODES_PER_DECADE:
        raise ParameterError(f"nodes_per_decade must be >= {MIN_NODES_PER_DECADE}")
    decades = math.log10(t_max / t_min)
    count = max(int(round(decades * nodes_per_decade)), 1) + 1
    return _trapezoid(t_min, t_max, count, nodes_per_decade)


def refine_grid(grid: QuadratureGrid) -> QuadratureGrid:
    """Same window with every interval halved; the old nodes are kept."""
    return _trapezoid(grid.t_min, grid.t_max, 2 * (grid.size - 1) + 1, 2 * grid.nodes_per_decade)


def adapted_grid(calc: SpectralCalculus, nodes_per_decade: int = 40,
                 lower_factor: float = LOWER_FACTOR, upper_factor: float = UPPER_FACTOR) -> QuadratureGrid:
    if calc.lambda_max <= 0:
        raise ParameterError("generator has no nonzero spectrum to adapt to")
    return build_grid(lower_factor / calc.lambda_max, upper_factor / calc.lambda_min, nodes_per_decade)


def is_adapted(grid: QuadratureGrid, calc: SpectralCalculus,
               lower_factor: float = LOWER_FACTOR, upper_factor: float = UPPER_FACTOR) -> bool:
    if calc.lambda_max <= 0:
        return False
    slack = 1 + 1e-12
    return (grid.t_min <= slack * lower_factor / calc.lambda_max
            and grid.t_max * slack >= upper_factor / calc.lambda_min)


def _check_grid(calc: SpectralCalculus, grid: QuadratureGrid) -> None:
    if not is_adapted(grid, calc):
        logger.warning(
            "quadrature window [%.3g, %.3g] does not cover [%.3g, %.3g]; tails are truncated",
            grid.t_min, grid.t_max, LOWER_FACTOR / max(calc.lambda_max, 1e-300),
            UPPER_FACTOR / max(calc.lambda_min, 1e-300),
        )


def _family(calc: SpectralCalculus, fn, grid: QuadratureGrid, f) -> np.ndarray:
    return apply_family(calc, fn, grid.nodes, np.asarray(f))


def paraproduct_pi_g(calc: SpectralCalculus, f, g, D: int, grid: QuadratureGrid) -> np.ndarray:
    """Pi_g(f) = int P_t(Q_t f . P_t g) dt/t."""
    _check_grid(calc, grid)
    smooth = lambda x: phi(D, x)
    G = _family(calc, lambda x: psi(D, x), grid, f) * _family(calc, smooth, grid, g)
    return sum_family(calc, smooth, grid.nodes, grid.weights, G)


def resonant_pi(calc: SpectralCalculus, f, g, D: int, grid: QuadratureGrid) -> np.ndarray:
    """Pi(f, g) = int Q_t(P_t f . P_t g) dt/t."""
    _check_grid(calc, grid)
    smooth = lambda x: phi(D, x)
    G = _family(calc, smooth, grid, f) * _family(calc, smooth, grid, g)
    return sum_family(calc, lambda x: psi(D, x), grid.nodes, grid.weights, G)


def _require_gamma(gen: Generator) -> None:
    if not gen.has_gamma:
        raise UnsupportedOperatorError(f"{gen.kind} generator has no carré du champ")


def pi_gamma(calc: SpectralCalculus, gen: Generator, f, g, D: int, grid: QuadratureGrid) -> np.ndarray:
    """Pi_Gamma(f, g) = int ~Q_t Gamma(sqrt(t) P_t f, sqrt(t) P_t g) dt/t."""
    _require_gamma(gen)
    _check_grid(calc, grid)
    smooth = lambda x: phi(D, x)
    G = gamma(gen, _family(calc, smooth, grid, f), _family(calc, smooth, grid, g)) * grid.nodes[None, :]
    return sum_family(calc, lambda x: psi_tilde(D, x), grid.nodes, grid.weights, G)


def lifted_paraproduct(calc: SpectralCalculus, f, g, D: int, grid: QuadratureGrid) -> np.ndarray:
    """int ~Q_t(tL P_t f . P_t g) dt/t."""
    _check_grid(calc, grid)
    G = _family(calc, lambda x: x * phi(D, x), grid, f) * _family(calc, lambda x: phi(D, x), grid, g)
    return sum_family(calc, lambda x: psi_tilde(D, x), grid.nodes, grid.weights, G)


def carre_split_terms(calc: SpectralCalculus, gen: Generator, f, g, D: int,
                      grid: QuadratureGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The three integrals whose combination A + B - 2 Pi_Gamma reproduces Pi(f, g)."""
    _require_gamma(gen)
    A = lifted_paraproduct(calc, f, g, D, grid)
    B = lifted_paraproduct(calc, g, f, D, grid)
    return A, B, pi_gamma(calc, gen, f, g, D, grid)


def _product_norm(calc: SpectralCalculus, f, g, p: float) -> float:
    norm = lp_norm(calc.generator.space, np.asarray(f) * np.asarray(g), p)
    if norm < DEGENERATE_NORM:
        raise DegenerateSampleError(f"||fg||_{p} = {norm:.3g} is degenerate")
    return norm


def carre_split_check(calc: SpectralCalculus, gen: Generator, f, g, D: int,
                      grid: QuadratureGrid, p: float = 2.0) -> float:
    scale = _product_norm(calc, f, g, p)
    A, B, C = carre_split_terms(calc, gen, f, g, D, grid)
    resonant = resonant_pi(calc, f, g, D, grid)
    return lp_norm(calc.generator.space, resonant - (A + B - 2 * C), p) / scale


def quadrature_order(res_coarse: float, res_fine: float, floor: float = ROUNDOFF_FLOOR) -> Optional[float]:
    """log2 of the residual ratio under node doubling, or None once both sit at roundoff."""
    if res_coarse <= floor and res_fine <= floor:
        return None
    if res_fine <= 0:
        return None
    return math.log2(res_coarse / res_fine)


def _decomposition_terms(calc, f, g, D, grid):
    return (
        resonant_pi(calc, f, g, D, grid),
        paraproduct_pi_g(calc, f, g, D, grid),
        paraproduct_pi_g(calc, g, f, D, grid),
    )


def decomposition_residual(calc: SpectralCalculus, f, g, D: int, grid: QuadratureGrid,
                           p: float = 2.0) -> DecompositionReport:
    space = calc.generator.space
    f = np.asarray(f)
    g = np.asarray(g)
    scale = _product_norm(calc, f, g, p)
    fg = f * g

    resonant, pi_g_f, pi_f_g = _decomposition_terms(calc, f, g, D, grid)
    residual = lp_norm(space, fg - resonant - pi_g_f - pi_f_g, p) / scale
    fine = refine_grid(grid)
    refined = lp_norm(space, fg - sum(_decomposition_terms(calc, f, g, D, fine)), p) / scale
    order = quadrature_order(residual, refined)

    split = None
    if calc.generator.has_gamma:
        split = carre_split_check(calc, calc.generator, f, g, D, grid, p)
    logger.debug("decomposition residual %.3g, refined %.3g, order %s", residual, refined, order)
    return DecompositionReport(
        pi_resonant=resonant, pi_g_f=pi_g_f, pi_f_g=pi_f_g,
        residual_p=float(residual), residual_refined=float(refined),
        carre_split_residual=split, quadrature_order_estimate=order,
        converged_to_roundoff=bool(refined <= ROUNDOFF_FLOOR), p=p,
    )


def sobolev_norm(calc: SpectralCalculus, f, p: float, alpha: float, strict: bool = False) -> float:
    """||L^{alpha/2} f||_p, a seminorm vanishing on the kernel."""
    if not 0 < alpha <= 1:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    return lp_norm(calc.generator.space, frac_power(calc, alpha / 2, f, strict=strict), p)


def leibniz_ratio(calc: SpectralCalculus, f, g, p: float, alpha: float, strict: bool = False) -> float:
    f = np.asarray(f)
    g = np.asarray(g)
    space = calc.generator.space
    den = (sobolev_norm(calc, f, p, alpha, strict) * lp_norm(space, g, math.inf)
           + lp_norm(space, f, math.inf) * sobolev_norm(calc, g, p, alpha, strict))
    if not den > np.finfo(float).tiny:
        raise DegenerateSampleError("Leibniz denominator vanishes")
    # fg is not kernel-free in general; frac_power annihilates that part
    return sobolev_norm(calc, f * g, p, alpha) / den
