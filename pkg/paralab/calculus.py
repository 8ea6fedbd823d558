"""Spectral functional calculus of a generator.

Every operator of the form phi(L) is applied through one factorization of L:
an orthonormal eigendecomposition of M^{1/2} L M^{-1/2} for self-adjoint
generators, a guarded eigendecomposition for non-normal ones, and a
Schur-Parlett evaluation when the eigenvectors are too ill-conditioned.
Entire functions act on the whole space; fractional and imaginary powers are
deflated, i.e. set to zero on the kernel of L.
"""
import logging
import math
from typing import Callable, Literal, Optional

import numpy as np
import scipy.linalg as sla
from scipy.special import gammaln

from .errors import ConditioningError, KernelLeakError, ParameterError, SizeError
from .models import LabModel, NDArray
from .operators import Generator
from .settings import get_settings
from .space import lp_norm

logger = logging.getLogger(__name__)

KERNEL_RTOL = 1e-9
RECONSTRUCTION_RTOL = 1e-10
LEAK_RTOL = 0.01

Multiplier = Callable[[np.ndarray], np.ndarray]


class SpectralCalculus(LabModel):
    generator: Generator
    path: Literal["hermitian", "eig", "schur"]
    eigenvalues: NDArray
    # columns of `basis` are eigenvectors; `basis_inv @ f` gives spectral coefficients
    basis: Optional[NDArray] = None
    basis_inv: Optional[NDArray] = None
    schur_form: Optional[NDArray] = None
    schur_vectors: Optional[NDArray] = None
    kernel_mask: NDArray
    kernel_projector: NDArray
    eigvec_condition: float
    spectral_window: tuple[float, float]
    reconstruction_error: float

    @property
    def n(self) -> int:
        return self.generator.n

    @property
    def lambda_max(self) -> float:
        return self.spectral_window[1]

    @property
    def lambda_min(self) -> float:
        return self.spectral_window[0]


def gamma_normalization(N: int) -> float:
    """c_N = integral of s^N e^{-s} ds/s = (N-1)!"""
    return float(math.factorial(N - 1))


def psi(N: int, x) -> np.ndarray:
    """c_N^{-1} x^N e^{-x}, the multiplier of Q_t^{(N)}."""
    return _power_exp(N, x, N)


def psi_tilde(D: int, x) -> np.ndarray:
    """c_D^{-1} x^{D-1} e^{-x}, the multiplier of (tL)^{-1} Q_t^{(D)}."""
    return _power_exp(D - 1, x, D)


def phi(N: int, x) -> np.ndarray:
    """e^{-x} sum_{k<N} x^k / k!, the multiplier of P_t^{(N)}."""
    x = np.asarray(x)
    out = np.zeros(x.shape, dtype=np.result_type(x, float))
    for k in range(N):
        out = out + _power_exp(k, x, k + 1)
    return out


def _power_exp(k: int, x, N: int) -> np.ndarray:
    # x^k e^{-x} / (N-1)! evaluated in log space
    x = np.asarray(x)
    if k == 0:
        return np.exp(-x) / math.factorial(N - 1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if np.iscomplexobj(x):
            out = np.exp(k * np.log(x) - x - gammaln(N))
        else:
            out = np.sign(x) ** k * np.exp(k * np.log(np.abs(x)) - x - gammaln(N))
    return np.where(x == 0, 0.0, out)


def build_calculus(gen: Generator, allow_schur: bool = True) -> SpectralCalculus:
    settings = get_settings()
    n = gen.n
    mu = gen.space.mu
    L = gen.matrix
    norm = gen.norm
    if gen.self_adjoint:
        if n > settings.max_points:
            raise SizeError(f"{n} points exceed the self-adjoint cap {settings.max_points}")
        root = np.sqrt(mu)
        B = root[:, None] * L / root[None, :]
        lam, U = sla.eigh((B + B.conj().T) / 2)
        basis = U / root[:, None]
        basis_inv = U.conj().T * root[None, :]
        path = "hermitian"
        condition = float(mu.max() / mu.min()) ** 0.5
        schur_form = schur_vectors = None
    else:
        if n > settings.nonnormal_max_points:
            raise SizeError(f"{n} points exceed the non-normal cap {settings.nonnormal_max_points}")
        lam, V = sla.eig(L)
        condition = float(np.linalg.cond(V))
        if condition <= settings.condition_limit:
            path = "eig"
            basis = V
            basis_inv = sla.solve(V, np.eye(n))
            schur_form = schur_vectors = None
        else:
            if not allow_schur:
                raise ConditioningError(f"eigenvector condition {condition:.3g} exceeds {settings.condition_limit:.3g}")
            logger.warning("eigenvector condition %.3g; falling back to Schur-Parlett evaluation", condition)
            path = "schur"
            schur_form, schur_vectors = sla.schur(L.astype(complex), output="complex")
            lam = np.diag(schur_form)
            basis = basis_inv = None

    magnitude = np.abs(lam)
    kernel_mask = magnitude <= KERNEL_RTOL * magnitude.max()
    nonzero = magnitude[~kernel_mask]
    window = (float(nonzero.min()), float(nonzero.max())) if nonzero.size else (0.0, 0.0)

    if path == "schur":
        projector = _kernel_projector_svd(L, int(kernel_mask.sum()))
        rebuilt = schur_vectors @ schur_form @ schur_vectors.conj().T
    else:
        projector = basis[:, kernel_mask] @ basis_inv[kernel_mask, :]
        rebuilt = (basis * lam[None, :]) @ basis_inv
    if np.isrealobj(L) and np.all(np.abs(np.imag(projector)) <= 1e-13):
        projector = projector.real
    error = float(np.abs(rebuilt - L).sum(axis=1).max() / norm)
    if error > RECONSTRUCTION_RTOL:
        logger.warning("factorization reconstruction error %.3g relative", error)

    logger.info("built %s calculus, n=%d, spectral window [%.3g, %.3g]", path, n, *window)
    return SpectralCalculus(
        generator=gen, path=path, eigenvalues=lam, basis=basis, basis_inv=basis_inv,
        schur_form=schur_form, schur_vectors=schur_vectors, kernel_mask=kernel_mask,
        kernel_projector=projector, eigvec_condition=condition, spectral_window=window,
        reconstruction_error=error,
    )


def _kernel_projector_svd(L: np.ndarray, k: int) -> np.ndarray:
    n = L.shape[0]
    if k == 0:
        return np.zeros((n, n))
    U, _, Vh = sla.svd(L)
    right = Vh[-k:].conj().T
    left = U[:, -k:]
    return right @ sla.solve(left.conj().T @ right, left.conj().T)


def _schur_matrix(calc: SpectralCalculus, fn: Multiplier, deflate: bool) -> np.ndarray:
    tol = KERNEL_RTOL * np.abs(calc.eigenvalues).max()

    def scalar(z):
        z = np.asarray(z)
        with np.errstate(divide="ignore", invalid="ignore"):
            values = fn(z)
        if deflate:
            values = np.where(np.abs(z) <= tol, 0.0, values)
        return values

    F, err = sla.funm(calc.schur_form, scalar, disp=False)
    if err > 1e-8:
        logger.warning("Schur-Parlett evaluation error estimate %.3g", err)
    Z = calc.schur_vectors
    return Z @ F @ Z.conj().T


def _maybe_real(calc: SpectralCalculus, out: np.ndarray, f: np.ndarray, values: np.ndarray) -> np.ndarray:
    # complex multipliers such as lam^{i eta} keep their imaginary part
    if (np.isrealobj(values) and np.isrealobj(f) and np.isrealobj(calc.generator.matrix)
            and calc.path == "hermitian" and np.isrealobj(calc.basis)):
        return np.real(out)
    return out


def apply_function(calc: SpectralCalculus, fn: Multiplier, f, deflate: bool = False) -> np.ndarray:
    """fn(L) f for a vector or a column batch f."""
    f = np.asarray(f)
    if calc.path == "schur":
        return operator_matrix(calc, fn, deflate) @ f
    values = _family_values(calc, fn, calc.eigenvalues, deflate)
    coeff = calc.basis_inv @ f
    scaled = values * coeff if f.ndim == 1 else values[:, None] * coeff
    return _maybe_real(calc, calc.basis @ scaled, f, values)


def apply_family(calc: SpectralCalculus, fn: Multiplier, times, f, deflate: bool = False) -> np.ndarray:
    """Columns fn(t_k L) f for every time t_k; returns (n, K)."""
    f = np.asarray(f)
    times = np.asarray(times, dtype=float)
    if calc.path == "schur":
        return np.stack([operator_matrix(calc, lambda z, t=t: fn(t * z), deflate) @ f for t in times], axis=1)
    coeff = calc.basis_inv @ f
    grid = calc.eigenvalues[:, None] * times[None, :]
    values = _family_values(calc, fn, grid, deflate)
    return _maybe_real(calc, calc.basis @ (values * coeff[:, None]), f, values)


def sum_family(calc: SpectralCalculus, fn: Multiplier, times, weights, G, deflate: bool = False) -> np.ndarray:
    """sum_k w_k fn(t_k L) G[:, k]."""
    G = np.asarray(G)
    times = np.asarray(times, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if calc.path == "schur":
        total = np.zeros(calc.n, dtype=complex)
        for k, t in enumerate(times):
            total += weights[k] * (operator_matrix(calc, lambda z, t=t: fn(t * z), deflate) @ G[:, k])
        return total
    coeff = calc.basis_inv @ G
    grid = calc.eigenvalues[:, None] * times[None, :]
    values = _family_values(calc, fn, grid, deflate)
    return _maybe_real(calc, calc.basis @ ((values * coeff) @ weights), G, values)


def _family_values(calc: SpectralCalculus, fn: Multiplier, grid: np.ndarray, deflate: bool) -> np.ndarray:
    if not deflate:
        return fn(grid)
    keep = ~calc.kernel_mask
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = fn(grid[keep])
    values = np.zeros(grid.shape, dtype=np.result_type(inner, float))
    values[keep] = inner
    return values


def operator_matrix(calc: SpectralCalculus, fn: Multiplier, deflate: bool = False) -> np.ndarray:
    if calc.path == "schur":
        return _schur_matrix(calc, fn, deflate)
    values = _family_values(calc, fn, calc.eigenvalues, deflate)
    out = (calc.basis * values[None, :]) @ calc.basis_inv
    if calc.path == "hermitian" and np.isrealobj(calc.basis) and np.isrealobj(values):
        return np.real(out)
    return out


def _check_time(t: float) -> None:
    if not t > 0:
        raise ParameterError(f"time must be positive, got {t}")


def semigroup(calc: SpectralCalculus, t: float, f) -> np.ndarray:
    _check_time(t)
    return apply_function(calc, lambda lam: np.exp(-t * lam), f)


def heat_kernel(calc: SpectralCalculus, t: float) -> np.ndarray:
    """p_t(x, y) = [e^{-tL}]_{xy} / mu(y)."""
    _check_time(t)
    E = operator_matrix(calc, lambda lam: np.exp(-t * lam))
    return E / calc.generator.space.mu[None, :]


def q_t(calc: SpectralCalculus, N: int, t: float, f) -> np.ndarray:
    _check_order(N)
    _check_time(t)
    return apply_function(calc, lambda lam: psi(N, t * lam), f)


def p_t(calc: SpectralCalculus, N: int, t: float, f) -> np.ndarray:
    _check_order(N)
    _check_time(t)
    return apply_function(calc, lambda lam: phi(N, t * lam), f)


def q_tilde(calc: SpectralCalculus, D: int, t: float, f) -> np.ndarray:
    _check_order(D)
    _check_time(t)
    return apply_function(calc, lambda lam: psi_tilde(D, t * lam), f)


def _check_order(N: int) -> None:
    if N < 1:
        raise ParameterError(f"order must be >= 1, got {N}")


def kernel_component(calc: SpectralCalculus, f) -> np.ndarray:
    return calc.kernel_projector @ np.asarray(f)


def kernel_leak(calc: SpectralCalculus, f) -> np.ndarray | float:
    """||P_0 f||_2 / ||f||_2 in L^2(mu), per column."""
    space = calc.generator.space
    f = np.asarray(f)
    total = lp_norm(space, f, 2)
    part = lp_norm(space, kernel_component(calc, f), 2)
    return np.where(total > 0, part / np.where(total > 0, total, 1.0), 0.0)


def _report_leak(calc: SpectralCalculus, f, strict: bool) -> None:
    leak = float(np.max(kernel_leak(calc, f)))
    if leak > 0:
        logger.debug("annihilated kernel component, relative size %.3g", leak)
    if strict and leak > LEAK_RTOL:
        raise KernelLeakError(f"kernel component is {leak:.3g} of the field norm")


def frac_power(calc: SpectralCalculus, beta: float, f, strict: bool = False) -> np.ndarray:
    _report_leak(calc, f, strict)
    return apply_function(calc, lambda lam: np.power(lam, beta), f, deflate=True)


def imaginary_power(calc: SpectralCalculus, eta: float, f, strict: bool = False) -> np.ndarray:
    _report_leak(calc, f, strict)
    return apply_function(calc, lambda lam: np.power(lam.astype(complex), 1j * eta), f, deflate=True)


def default_order(nu: float) -> int:
    """D = ceil(4 nu) + 1."""
    return int(math.ceil(4 * nu)) + 1
