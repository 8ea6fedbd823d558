import logging
import math

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from pydantic import model_validator
from scipy.sparse.csgraph import connected_components

from .errors import (
    AccretivityError, ConnectivityError, EllipticityError, ParameterError,
    UnsupportedOperatorError,
)
from .models import CarreReport, EllipticityReport, LabModel, NDArray, R2Report, SparseMatrix
from .settings import get_settings
from .space import MetricMeasureSpace, lp_norm

logger = logging.getLogger(__name__)

FLAG_TOL = 1e-12
KERNEL_RTOL = 1e-10
RANGE_ANGLES = 72


class GammaTerm(LabModel):
    """One bilinear piece of Γ: spread @ (coeff * (left @ f) * (right @ g))."""

    spread: SparseMatrix
    coeff: NDArray
    left: SparseMatrix
    right: SparseMatrix

    def apply(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        c = self.coeff if f.ndim == 1 else self.coeff[:, None]
        return self.spread @ (c * (self.left @ f) * (self.right @ g))


class Generator(LabModel):
    space: MetricMeasureSpace
    matrix: NDArray
    gamma_terms: list[GammaTerm] = []
    self_adjoint: bool
    conservative: bool
    accretivity_angle: float = 0.0
    kind: str = "custom"

    @model_validator(mode="after")
    def check_flags(self):
        L = self.matrix
        n = self.space.n
        if L.shape != (n, n) or not np.all(np.isfinite(L)):
            raise ParameterError("generator matrix must be a finite n x n matrix")
        norm = self.norm
        if self.conservative and np.abs(L.sum(axis=1)).max() > FLAG_TOL * norm:
            raise ParameterError("conservative flag set but L1 != 0")
        if self.self_adjoint:
            mu = self.space.mu
            adjoint = L.conj().T * mu[None, :] / mu[:, None]
            if np.abs(L - adjoint).max() > FLAG_TOL * norm:
                raise ParameterError("self_adjoint flag set but L differs from its mu-adjoint")
        return self

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def norm(self) -> float:
        """Max absolute row sum of L."""
        return max(float(np.abs(self.matrix).sum(axis=1).max()), np.finfo(float).tiny)

    @property
    def has_gamma(self) -> bool:
        return len(self.gamma_terms) > 0

    def apply(self, f) -> np.ndarray:
        return self.matrix @ np.asarray(f)


def _edge_array(space: MetricMeasureSpace, edge_weights) -> np.ndarray:
    if edge_weights is None:
        return np.asarray(space.edges, dtype=float).reshape(-1, 3)
    return np.asarray(edge_weights, dtype=float).reshape(-1, 3)


def graph_laplacian(space: MetricMeasureSpace, edge_weights=None) -> Generator:
    edges = _edge_array(space, edge_weights)
    n = space.n
    i, j, w = edges[:, 0].astype(int), edges[:, 1].astype(int), edges[:, 2]
    if np.any(w <= 0):
        raise ParameterError("edge weights must be positive")
    W = np.zeros((n, n))
    np.add.at(W, (i, j), w)
    np.add.at(W, (j, i), w)
    n_components, _ = connected_components(W, directed=False)
    if n_components != 1:
        raise ConnectivityError(f"graph has {n_components} connected components")

    mu = space.mu
    L = (np.diag(W.sum(axis=1)) - W) / mu[:, None]

    m = len(edges)
    rows = np.arange(m)
    ones = np.ones(m)
    incidence = sp.csr_matrix(
        (np.concatenate([ones, -ones]), (np.concatenate([rows, rows]), np.concatenate([i, j]))),
        shape=(m, n),
    )
    spread = sp.csr_matrix(
        (np.concatenate([0.5 / mu[i], 0.5 / mu[j]]), (np.concatenate([i, j]), np.concatenate([rows, rows]))),
        shape=(n, m),
    )
    term = GammaTerm(spread=spread, coeff=w, left=incidence, right=incidence)
    return Generator(
        space=space, matrix=L, gamma_terms=[term],
        self_adjoint=True, conservative=True, accretivity_angle=0.0, kind="graph_laplacian",
    )


def forward_difference(space: MetricMeasureSpace, axis: int) -> sp.csr_matrix:
    """(∇_h f)_axis(x) = (f(x + h e_axis) - f(x)) / h; zero row where no forward neighbour exists."""
    dims = space.dims
    side = dims[axis]
    index = np.arange(space.n).reshape(dims)
    coord = np.indices(dims)[axis].ravel()
    base = index.ravel()
    shifted = np.roll(index, -1, axis=axis).ravel()
    if space.periodic and side > 2:
        keep = np.ones(space.n, dtype=bool)
    else:
        keep = coord < side - 1
    src, dst = base[keep], shifted[keep]
    inv_h = 1.0 / space.h
    data = np.concatenate([np.full(src.size, -inv_h), np.full(src.size, inv_h)])
    return sp.csr_matrix((data, (np.concatenate([src, src]), np.concatenate([src, dst]))),
                         shape=(space.n, space.n))


def _coefficient_field(space: MetricMeasureSpace, A) -> np.ndarray:
    d = len(space.dims)
    A = np.asarray(A, dtype=complex)
    if A.shape == (d, d):
        A = np.broadcast_to(A, (space.n, d, d)).copy()
    if A.shape != (space.n, d, d):
        raise ParameterError(f"coefficient field must have shape ({d}, {d}) or ({space.n}, {d}, {d})")
    return A


def divergence_form(space: MetricMeasureSpace, A) -> Generator:
    if space.kind != "grid":
        raise ParameterError("divergence_form needs a grid space")
    A = _coefficient_field(space, A)
    report = check_ellipticity(A)
    if report.violations > 0:
        raise EllipticityError(
            f"{report.violations} cells violate ellipticity (lambda_low={report.lambda_low:.3g})"
        )
    d = len(space.dims)
    grads = [forward_difference(space, k) for k in range(d)]
    real = bool(np.all(A.imag == 0))
    coeffs = A.real if real else A

    L = sp.csr_matrix((space.n, space.n), dtype=coeffs.dtype)
    for k in range(d):
        for l in range(d):
            if np.any(coeffs[:, k, l] != 0):
                L = L + grads[k].T @ sp.diags(coeffs[:, k, l]) @ grads[l]
    L = L.toarray()

    # Γ uses the symmetric part of A, which is Re A when A is Hermitian
    sym = (coeffs + coeffs.transpose(0, 2, 1)) / 2
    identity = sp.identity(space.n, format="csr")
    terms = [
        GammaTerm(spread=identity, coeff=sym[:, k, l], left=grads[l], right=grads[k])
        for k in range(d) for l in range(d) if np.any(sym[:, k, l] != 0)
    ]

    hermitian = bool(np.allclose(A, A.conj().transpose(0, 2, 1), rtol=0, atol=FLAG_TOL * np.abs(A).max()))
    omega = 0.0 if hermitian else numerical_range_angle(L, space.mu)
    return Generator(
        space=space, matrix=L, gamma_terms=terms,
        self_adjoint=hermitian, conservative=True, accretivity_angle=omega, kind="divergence_form",
    )


def nondivergence_delta_a(space: MetricMeasureSpace, a, floor: float = 0.0) -> Generator:
    if space.kind != "grid":
        raise ParameterError("delta_a needs a grid space")
    a = np.broadcast_to(np.asarray(a, dtype=complex), (space.n,))
    if a.real.min() <= floor:
        raise AccretivityError(f"Re a must stay above {floor}, min is {a.real.min():.3g}")
    if np.all(a.imag == 0):
        a = a.real
    lap = graph_laplacian(space).matrix
    L = lap * a[None, :]
    omega = numerical_range_angle(L, space.mu)
    if omega >= math.pi / 2:
        logger.warning("numerical range of -Δ(a·) leaves the right half-plane (ω=%.3f)", omega)
    return Generator(
        space=space, matrix=L, self_adjoint=False, conservative=False,
        accretivity_angle=omega, kind="delta_a",
    )


def gamma(gen: Generator, f, g) -> np.ndarray:
    if not gen.has_gamma:
        raise UnsupportedOperatorError(f"{gen.kind} generator has no carré du champ")
    f = np.asarray(f)
    g = np.asarray(g)
    out = gen.gamma_terms[0].apply(f, g)
    for term in gen.gamma_terms[1:]:
        out = out + term.apply(f, g)
    return out


def gamma_len(gen: Generator, f) -> np.ndarray:
    return np.sqrt(np.abs(gamma(gen, f, f)))


def check_carre_identity(gen: Generator, f, g, calc=None, t_grid=None) -> CarreReport:
    f = np.asarray(f)
    g = np.asarray(g)
    L = gen.matrix
    gam = gamma(gen, f, g)
    defect = L @ (f * g) - (L @ f) * g - f * (L @ g)
    residual = defect + 2 * gam
    scale = max(float(np.abs(f).max() * np.abs(g).max()) * gen.norm, np.finfo(float).tiny)
    strong_abs = float(np.abs(residual).max())
    weak = None
    ratio = None
    if calc is not None and t_grid is not None:
        from .calculus import apply_family

        times = np.asarray(t_grid, dtype=float)
        heat = lambda x: np.exp(-x)
        weak = float(np.abs(apply_family(calc, heat, times, residual)).max()) / scale
        smoothed_defect = np.abs(apply_family(calc, heat, times, defect)).max(axis=0)
        smoothed_gamma = np.abs(apply_family(calc, heat, times, gam)).max(axis=0)
        usable = smoothed_gamma > 1e-14 * scale
        if np.any(usable):
            ratio = float(np.max(smoothed_defect[usable] / smoothed_gamma[usable]))
    return CarreReport(
        residual_strong=strong_abs / scale, residual_strong_abs=strong_abs,
        residual_weak_max_t=weak, carre_w_ratio=ratio,
    )


def check_cauchy_schwarz(gen: Generator, samples: int = 10_000, seed: int = 0, batch: int = 500) -> float:
    """Largest |Γ(f,g)| - Γ(f)Γ(g) over real samples, relative to each sample's max Γ(f)Γ(g)."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    done = 0
    while done < samples:
        k = min(batch, samples - done)
        F = rng.standard_normal((gen.n, k))
        G = rng.standard_normal((gen.n, k))
        lhs = np.abs(gamma(gen, F, G))
        bound = gamma_len(gen, F) * gamma_len(gen, G)
        scale = np.maximum(bound.max(axis=0), np.finfo(float).tiny)
        worst = max(worst, float(((lhs - bound) / scale).max()))
        done += k
    return worst


def _remove_kernel(gen: Generator, F: np.ndarray, calc=None) -> np.ndarray:
    if gen.conservative:
        mu = gen.space.mu
        return F - (mu @ F) / mu.sum()
    if calc is not None:
        out = F - calc.kernel_projector @ F
        return out.real if np.isrealobj(F) and np.abs(out.imag).max() <= 1e-12 * np.abs(out).max() else out
    return F


def check_r2_and_carre2(gen: Generator, calc=None, samples: int = 1000, seed: int = 0) -> R2Report:
    if not gen.has_gamma:
        raise UnsupportedOperatorError(f"{gen.kind} generator has no carré du champ")
    rng = np.random.default_rng(seed)
    space = gen.space
    mu = space.mu
    F = _remove_kernel(gen, rng.standard_normal((gen.n, samples)), calc)
    G = _remove_kernel(gen, rng.standard_normal((gen.n, samples)), calc)
    LF = gen.matrix @ F

    scale = 1e-14 * gen.norm * lp_norm(space, F, 2) * lp_norm(space, G, 2)
    num = np.abs(mu @ (LF * G))
    den = mu @ (gamma_len(gen, F) * gamma_len(gen, G))
    usable = den > scale
    skipped = int(samples - usable.sum())
    carre2 = float(np.max(num[usable] / den[usable])) if np.any(usable) else 0.0

    r2_ratio = None
    r2_defect = None
    if gen.self_adjoint and calc is not None:
        from .calculus import frac_power

        gamma_sq = mu @ np.abs(gamma(gen, F, F))
        energy = np.real(mu @ (LF * F.conj()))
        root = lp_norm(space, frac_power(calc, 0.5, F), 2)
        ok = energy > 1e-14 * gen.norm * lp_norm(space, F, 2) ** 2
        skipped += int(samples - ok.sum())
        if np.any(ok):
            r2_ratio = float(np.max(np.sqrt(gamma_sq[ok]) / root[ok]))
            r2_defect = float(np.max(np.abs(gamma_sq[ok] - energy[ok]) / energy[ok]))
    return R2Report(
        r2_max_ratio=r2_ratio, r2_max_defect=r2_defect, carre2_max_ratio=carre2,
        samples=samples, skipped=skipped,
    )


def check_ellipticity(A) -> EllipticityReport:
    A = np.asarray(A, dtype=complex)
    if A.ndim == 2:
        A = A[None]
    hermitian_part = (A + A.conj().transpose(0, 2, 1)) / 2
    low = np.linalg.eigvalsh(hermitian_part)[:, 0]
    high = np.linalg.norm(A, ord=2, axis=(1, 2))
    return EllipticityReport(
        lambda_low=float(low.min()), Lambda_high=float(high.max()),
        violations=int(np.sum(low <= 0)),
    )


def _symmetrized(matrix: np.ndarray, mu: np.ndarray) -> np.ndarray:
    root = np.sqrt(mu)
    return root[:, None] * matrix / root[None, :]


def numerical_range_angle(matrix: np.ndarray, mu: np.ndarray, angles: int = RANGE_ANGLES) -> float:
    """Largest |arg z| over boundary points of the numerical range, kernel removed."""
    B = _symmetrized(np.asarray(matrix), mu)
    if B.shape[0] > get_settings().nonnormal_max_points:
        return _sampled_angle(B, samples=1000, seed=0)
    _, s, vh = sla.svd(B)
    rank = int(np.sum(s > KERNEL_RTOL * s[0]))
    basis = vh[:rank].conj().T
    Bc = basis.conj().T @ B @ basis
    tol = 1e-12 * s[0]
    best = 0.0
    for theta in np.linspace(0.0, 2 * np.pi, angles, endpoint=False):
        rotated = np.exp(1j * theta) * Bc
        _, vecs = np.linalg.eigh((rotated + rotated.conj().T) / 2)
        v = vecs[:, -1]
        z = v.conj() @ Bc @ v
        if abs(z) > tol:
            best = max(best, abs(np.angle(z)))
    return float(best)


def _sampled_angle(B: np.ndarray, samples: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((B.shape[0], samples)) + 1j * rng.standard_normal((B.shape[0], samples))
    z = np.sum(V.conj() * (B @ V), axis=0)
    tol = 1e-12 * np.abs(B).sum(axis=1).max() * np.sum(np.abs(V) ** 2, axis=0)
    z = z[np.abs(z) > tol]
    return float(np.abs(np.angle(z)).max()) if z.size else 0.0


def check_accretivity(gen: Generator, samples: int = 1000, seed: int = 0) -> float:
    """Sampled sector half-angle of the numerical range, refined along its boundary."""
    B = _symmetrized(gen.matrix, gen.space.mu)
    omega = _sampled_angle(B, samples, seed)
    if gen.self_adjoint:
        return omega
    return max(omega, numerical_range_angle(gen.matrix, gen.space.mu))
