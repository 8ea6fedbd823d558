"""Experiment campaigns assembled from a validated ExperimentConfig.

Each campaign is split into row tasks that only read the shared, immutable
context; rows are merged by id so the output does not depend on the number
of worker threads.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Optional

import numpy as np

from .calculus import (
    SpectralCalculus, apply_family, apply_function, build_calculus, default_order, frac_power, kernel_component,
    psi,
)
from .errors import CampaignError, DegenerateSampleError, InsufficientDataError, ParameterError
from .estimates import (
    centered_pairs, change_of_angle_ratio, davies_gaffney, fit_ue, gamma_square_profile, gradient_bound,
    gradient_time_field, imaginary_power_growth, orthogonality_ratio, stack_fields, vertical_square_function_exact,
    vertical_square_profile, TimeField,
)
from .models import (
    DoublingProfile, EstimateReport, ExperimentConfig, LabModel, LeibnizReport, LeibnizRow, RunResult,
)
from .operators import (
    Generator, check_accretivity, check_carre_identity, check_cauchy_schwarz, check_ellipticity,
    check_r2_and_carre2, divergence_form, graph_laplacian, nondivergence_delta_a,
)
from .paraproducts import (
    QuadratureGrid, adapted_grid, carre_split_check, carre_split_terms, decomposition_residual, lifted_paraproduct,
    paraproduct_pi_g, pi_gamma, refine_grid, resonant_pi,
)
from .settings import get_settings
from .space import (
    MetricMeasureSpace, build_graph_space, build_grid_space, check_metric, doubling_profile, lp_norm, read_edge_list,
)

logger = logging.getLogger(__name__)

SAMPLE_RETRIES = 8
DEGENERATE_SAMPLE = 1e-12
CARRE_PAIRS = 1000
CARRE_TOL = 1e-12
CAUCHY_SCHWARZ_SAMPLES = 10_000
CAUCHY_SCHWARZ_TOL = 1e-12
R2_SAMPLES = 1000
R2_TOL = 1e-10


class ExperimentContext(LabModel):
    config: ExperimentConfig
    space: MetricMeasureSpace
    generator: Generator
    calculus: SpectralCalculus
    grid: QuadratureGrid
    doubling: DoublingProfile
    D: int
    nu: float

    @property
    def seed(self) -> int:
        return self.config.sampler.seed


# ---------------------------------------------------------------- context


def build_space(config: ExperimentConfig) -> MetricMeasureSpace:
    spec = config.space
    if spec.kind == "grid":
        return build_grid_space(spec.dims, spec.h, spec.periodic)
    edges = spec.edges if spec.edges is not None else read_edge_list(config.resolve(spec.edges_file))
    n = int(max(max(i, j) for i, j, _ in edges)) + 1
    mu = spec.mu if spec.mu is not None else np.ones(n)
    return build_graph_space(edges, mu)


def _load_complex(config: ExperimentConfig, path: str) -> np.ndarray:
    return np.loadtxt(config.resolve(path), dtype=complex, ndmin=1)


def coefficient_matrix(config: ExperimentConfig, space: MetricMeasureSpace) -> np.ndarray:
    spec = config.operator
    d = len(space.dims)
    if spec.A_file is not None:
        return _load_complex(config, spec.A_file).reshape(space.n, d, d)
    if spec.A_constant is not None:
        return np.array(spec.A_constant, dtype=complex)
    return np.eye(d)


def coefficient_function(config: ExperimentConfig, space: MetricMeasureSpace) -> np.ndarray:
    spec = config.operator
    if spec.a_file is not None:
        return _load_complex(config, spec.a_file).reshape(space.n)
    if spec.a_sine_amplitude is not None:
        x = space.coords[:, 0]
        period = space.dims[0] * space.h
        return 1.0 + spec.a_sine_amplitude * np.sin(2 * np.pi * x / period)
    if spec.a_constant is not None:
        return np.full(space.n, complex(spec.a_constant))
    return np.ones(space.n)


def build_generator(config: ExperimentConfig, space: MetricMeasureSpace) -> Generator:
    kind = config.operator.kind
    if kind == "graph_laplacian":
        return graph_laplacian(space)
    if kind == "divergence_form":
        return divergence_form(space, coefficient_matrix(config, space))
    return nondivergence_delta_a(space, coefficient_function(config, space), config.operator.accretivity_floor)


def build_context(config: ExperimentConfig) -> ExperimentContext:
    space = build_space(config)
    gen = build_generator(config, space)
    calc = build_calculus(gen, allow_schur=config.calculus.allow_schur)
    doubling = doubling_profile(space)
    nu = config.calculus.nu if config.calculus.nu is not None else doubling.nu_fit
    D = config.calculus.D if config.calculus.D is not None else default_order(nu)
    quad = config.quadrature
    grid = adapted_grid(calc, quad.nodes_per_decade, quad.t_min_factor, quad.t_max_factor)
    logger.info("context ready: %s on %s, n=%d, nu=%.3g, D=%d, %d nodes",
                gen.kind, space.kind, space.n, nu, D, grid.size)
    return ExperimentContext(
        config=config, space=space, generator=gen, calculus=calc, grid=grid,
        doubling=doubling, D=D, nu=nu,
    )


# ---------------------------------------------------------------- samplers


def _bump_draw(calc: SpectralCalculus, rng: np.random.Generator) -> np.ndarray:
    space = calc.generator.space
    center = rng.integers(space.n)
    radius = rng.uniform(space.scale_h, max(space.scale_h, space.diameter / 4))
    indicator = (space.dist[center] <= radius).astype(float)
    tau = 4.0 / calc.lambda_max
    smooth = apply_function(calc, lambda x: np.exp(-tau * x), indicator)
    return smooth - kernel_component(calc, smooth)


def _nonzero_modes(calc: SpectralCalculus) -> np.ndarray:
    nonzero = np.flatnonzero(~calc.kernel_mask)
    return nonzero[np.argsort(np.abs(calc.eigenvalues[nonzero]), kind="stable")]


def _spectral_draw(calc: SpectralCalculus, rng: np.random.Generator) -> np.ndarray:
    if calc.basis is None:
        return _bump_draw(calc, rng)
    modes = _nonzero_modes(calc)
    low = modes[: max(1, (modes.size + 1) // 2)]
    return calc.basis[:, low] @ rng.standard_normal(low.size)


def _product_draw(calc: SpectralCalculus, rng: np.random.Generator) -> np.ndarray:
    if calc.basis is None:
        return _bump_draw(calc, rng)
    i, j = rng.choice(_nonzero_modes(calc), size=2)
    product = calc.basis[:, i] * calc.basis[:, j]
    return product - kernel_component(calc, product)


SAMPLERS: dict[str, Callable[[SpectralCalculus, np.random.Generator], np.ndarray]] = {
    "spectral_bandlimited": _spectral_draw,
    "random_bump": _bump_draw,
    "eigenfunction_product": _product_draw,
}


def sample_test_function(calc: SpectralCalculus, kind: str, seed: int, index: int = 0) -> np.ndarray:
    """Sample `index` of the stream: f = L g0, scaled to ||f||_inf = 1."""
    if kind not in SAMPLERS:
        raise ParameterError(f"unknown sampler {kind!r}")
    gen = calc.generator
    for attempt in range(SAMPLE_RETRIES):
        rng = np.random.default_rng([seed, index, attempt])
        g0 = SAMPLERS[kind](calc, rng)
        if np.isrealobj(gen.matrix):
            g0 = np.real(g0)
        f = gen.apply(g0)
        peak = float(np.abs(f).max())
        if peak >= DEGENERATE_SAMPLE:
            return f / peak
        logger.warning("degenerate %s draw (sample %d, attempt %d); resampling", kind, index, attempt)
    raise DegenerateSampleError(f"{kind} sample {index} stayed degenerate after {SAMPLE_RETRIES} draws")


def sample_pairs(ctx: ExperimentContext, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Columns f_k = sample 2k, g_k = sample 2k + 1."""
    kind = ctx.config.sampler.kind
    F = np.stack([sample_test_function(ctx.calculus, kind, ctx.seed, 2 * k) for k in range(count)], axis=1)
    G = np.stack([sample_test_function(ctx.calculus, kind, ctx.seed, 2 * k + 1) for k in range(count)], axis=1)
    return F, G


def _run_tasks(tasks: dict[int, Callable[[], Any]], threads: int) -> dict[int, Any]:
    if threads <= 1:
        return {key: tasks[key]() for key in sorted(tasks)}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {key: pool.submit(task) for key, task in tasks.items()}
        return {key: futures[key].result() for key in sorted(futures)}


def _grid_info(grid: QuadratureGrid) -> dict[str, Any]:
    return {
        "t_min": grid.t_min, "t_max": grid.t_max,
        "nodes_per_decade": grid.nodes_per_decade, "nodes": grid.size, "rule": grid.rule,
    }


def _context_info(ctx: ExperimentContext) -> dict[str, Any]:
    return {
        "space": {"kind": ctx.space.kind, "n": ctx.space.n, "scale_h": ctx.space.scale_h},
        "operator": ctx.generator.kind,
        "calculus_path": ctx.calculus.path,
        "D": ctx.D,
        "nu": ctx.nu,
        "grid": _grid_info(ctx.grid),
    }


# ---------------------------------------------------------------- region flags


def inside_main_region(p: float, alpha: float, p0: float) -> bool:
    """alpha < 1 for p <= p0, alpha < p0 / p beyond."""
    if p <= p0:
        return alpha < 1
    return alpha < p0 / p


def inside_previous_region(p: float, alpha: float, p0: float, nu: float) -> bool:
    """The range available without the pointwise carré identity."""
    if p <= p0:
        return alpha < 1
    return alpha < 1 - nu * (1 / p0 - 1 / p)


def hypotheses_met(nu: float, p0: float) -> bool:
    return nu > 2 and 2 <= p0 < nu


# ---------------------------------------------------------------- leibniz sweep


def _leibniz_rows(ctx: ExperimentContext, F, G, alpha: float, targets: list[tuple[int, float]]) -> list[tuple[LeibnizRow, int]]:
    calc = ctx.calculus
    space = ctx.space
    count = ctx.config.sampler.count
    strict = ctx.config.calculus.strict_kernel
    SF = frac_power(calc, alpha / 2, F, strict=strict)
    SG = frac_power(calc, alpha / 2, G, strict=strict)
    SFG = frac_power(calc, alpha / 2, F * G)
    sup_f = np.abs(F).max(axis=0)
    sup_g = np.abs(G).max(axis=0)
    p0 = ctx.config.calculus.p0

    out = []
    for row_id, p in targets:
        den = lp_norm(space, SF, p) * sup_g + sup_f * lp_norm(space, SG, p)
        ok = den > np.finfo(float).tiny
        ratios = np.where(ok, lp_norm(space, SFG, p) / np.where(ok, den, 1.0), np.nan)
        head = ratios[:count]
        if not np.any(ok[:count]):
            raise CampaignError(f"every sample pair is degenerate at p={p:g}, alpha={alpha:g}")
        best = float(np.nanmax(head))
        full = float(np.nanmax(ratios))
        stability = (full - best) / best if best > 0 else 0.0
        row = LeibnizRow(
            row_id=row_id, p=p, alpha=alpha, n_samples=count, max_ratio=best,
            mean_ratio=float(np.nanmean(head)), stability=stability,
            argmax_sample=int(np.nanargmax(head)),
            inside_thm13=inside_main_region(p, alpha, p0),
            inside_previous=inside_previous_region(p, alpha, p0, ctx.nu),
        )
        out.append((row, int(np.sum(~ok))))
    return out


def _leibniz_plan(ctx: ExperimentContext) -> dict[float, list[tuple[int, float]]]:
    grid = ctx.config.grid
    plan: dict[float, list[tuple[int, float]]] = {alpha: [] for alpha in grid.alpha}
    for i, p in enumerate(grid.p):
        for j, alpha in enumerate(grid.alpha):
            plan[alpha].append((i * len(grid.alpha) + j, p))
    return plan


def leibniz_sweep(ctx: ExperimentContext, threads: int = 1) -> LeibnizReport:
    # twice the configured pairs: the second half only feeds the stability column
    F, G = sample_pairs(ctx, 2 * ctx.config.sampler.count)
    plan = _leibniz_plan(ctx)
    alphas = sorted(plan)
    results = _run_tasks(
        {k: (lambda alpha=alpha: _leibniz_rows(ctx, F, G, alpha, plan[alpha])) for k, alpha in enumerate(alphas)},
        threads,
    )
    pairs = [item for k in sorted(results) for item in results[k]]
    rows = sorted((row for row, _ in pairs), key=lambda row: row.row_id)
    degenerate = max((skipped for _, skipped in pairs), default=0)
    p0 = ctx.config.calculus.p0
    return LeibnizReport(
        rows=rows, p0_used=p0, nu_used=ctx.nu, hypotheses_met=hypotheses_met(ctx.nu, p0),
        sampler=ctx.config.sampler.kind, seed=ctx.seed, degenerate_pairs=degenerate,
    )


def _run_leibniz(ctx: ExperimentContext, threads: int) -> RunResult:
    report = leibniz_sweep(ctx, threads)
    table = [row.model_dump() for row in report.rows]
    return RunResult(
        experiment="leibniz_sweep",
        report={**_context_info(ctx), "leibniz": report.model_dump(mode="json")},
        tables={"leibniz": table},
    )


def _replay_leibniz(ctx: ExperimentContext, row_id: int) -> dict[str, Any]:
    F, G = sample_pairs(ctx, 2 * ctx.config.sampler.count)
    for alpha, targets in _leibniz_plan(ctx).items():
        for target in targets:
            if target[0] == row_id:
                row, _ = _leibniz_rows(ctx, F, G, alpha, [target])[0]
                return row.model_dump()
    raise ParameterError(f"leibniz_sweep has no row {row_id}")


# ---------------------------------------------------------------- decomposition / carre split


def _decomposition_row(ctx: ExperimentContext, k: int, f, g) -> dict[str, Any]:
    report = decomposition_residual(ctx.calculus, f, g, ctx.D, ctx.grid, p=2.0)
    return {
        "row_id": k,
        "residual_p": report.residual_p,
        "residual_refined": report.residual_refined,
        "carre_split_residual": report.carre_split_residual,
        "quadrature_order_estimate": report.quadrature_order_estimate,
        "converged_to_roundoff": report.converged_to_roundoff,
    }


def _carre_split_row(ctx: ExperimentContext, k: int, f, g) -> dict[str, Any]:
    calc, gen, grid = ctx.calculus, ctx.generator, ctx.grid
    residual = carre_split_check(calc, gen, f, g, ctx.D, grid)
    refined = carre_split_check(calc, gen, f, g, ctx.D, refine_grid(grid))
    A, B, C = carre_split_terms(calc, gen, f, g, ctx.D, grid)
    return {
        "row_id": k,
        "residual": residual,
        "residual_refined": refined,
        "lifted_f_norm": lp_norm(ctx.space, A, 2),
        "lifted_g_norm": lp_norm(ctx.space, B, 2),
        "pi_gamma_norm": lp_norm(ctx.space, C, 2),
    }


def _pair_rows(ctx: ExperimentContext, row_fn, threads: int) -> list[dict[str, Any]]:
    F, G = sample_pairs(ctx, ctx.config.sampler.count)
    results = _run_tasks(
        {k: (lambda k=k: row_fn(ctx, k, F[:, k], G[:, k])) for k in range(F.shape[1])}, threads,
    )
    return [results[k] for k in sorted(results)]


def _run_decomposition(ctx: ExperimentContext, threads: int) -> RunResult:
    rows = _pair_rows(ctx, _decomposition_row, threads)
    F, G = sample_pairs(ctx, 1)
    first = decomposition_residual(ctx.calculus, F[:, 0], G[:, 0], ctx.D, ctx.grid, p=2.0)
    report = {
        **_context_info(ctx),
        "max_residual": max(row["residual_p"] for row in rows),
        "first_pair": first.model_dump(mode="json"),
        "rows": rows,
    }
    return RunResult(experiment="decomposition", report=report, tables={"decomposition": rows})


def _run_carre_split(ctx: ExperimentContext, threads: int) -> RunResult:
    rows = _pair_rows(ctx, _carre_split_row, threads)
    report = {**_context_info(ctx), "max_residual": max(row["residual"] for row in rows), "rows": rows}
    return RunResult(experiment="carre_split", report=report, tables={"carre_split": rows})


# ---------------------------------------------------------------- proposition campaigns


# name, term, measured in the Sobolev scale, which factor carries the L^p norm
PROPOSITIONS = (
    ("errorterms", "pi_g", True, "f"),
    ("lp_para1", "lifted", False, "f"),
    ("lp_para2", "lifted", False, "g"),
    ("lp_para", "pi_gamma", False, "f"),
    ("resonant_lp", "resonant", False, "f"),
    ("error_2", "lifted", True, "f"),
    ("sp_para", "pi_gamma", True, "f"),
    ("inter", "pi_gamma", True, "f"),
)


def proposition_applies(name: str, p: float, alpha: Optional[float], p0: float) -> bool:
    if name in ("lp_para", "resonant_lp"):
        return p > 2
    if name == "sp_para":
        return p < p0
    if name == "inter":
        return p > p0 and alpha < p0 / p
    return True


def _proposition_terms(ctx: ExperimentContext, F, G, threads: int) -> dict[str, np.ndarray]:
    calc, gen, grid, D = ctx.calculus, ctx.generator, ctx.grid, ctx.D

    def terms(k):
        f, g = F[:, k], G[:, k]
        out = {
            "pi_g": paraproduct_pi_g(calc, f, g, D, grid),
            "lifted": lifted_paraproduct(calc, f, g, D, grid),
            "resonant": resonant_pi(calc, f, g, D, grid),
        }
        if gen.has_gamma:
            out["pi_gamma"] = pi_gamma(calc, gen, f, g, D, grid)
        return out

    results = _run_tasks({k: (lambda k=k: terms(k)) for k in range(F.shape[1])}, threads)
    names = results[0].keys()
    return {name: np.stack([results[k][name] for k in sorted(results)], axis=1) for name in names}


def _proposition_ratios(ctx: ExperimentContext, term_name: str, term: np.ndarray, F, G, p: float, alpha: Optional[float],
                        carrier: str, cache: dict) -> np.ndarray:
    space = ctx.space

    def norm(key, X):
        if alpha is None:
            return lp_norm(space, X, p)
        if (key, alpha) not in cache:
            cache[(key, alpha)] = frac_power(ctx.calculus, alpha / 2, X)
        return lp_norm(space, cache[(key, alpha)], p)

    left = norm(term_name, term)
    if carrier == "f":
        right = norm("f", F) * np.abs(G).max(axis=0)
    else:
        right = np.abs(F).max(axis=0) * norm("g", G)
    ok = right > np.finfo(float).tiny
    return np.where(ok, left / np.where(ok, right, 1.0), np.nan)


def proposition_norms(ctx: ExperimentContext, threads: int = 1) -> list[EstimateReport]:
    count = ctx.config.sampler.count
    F, G = sample_pairs(ctx, count)
    terms = _proposition_terms(ctx, F, G, threads)
    p0 = ctx.config.calculus.p0
    cache: dict = {}
    reports = []
    row_id = 0
    for name, term_name, sobolev, carrier in PROPOSITIONS:
        if term_name not in terms:
            logger.info("skipping %s: %s generator has no carré du champ", name, ctx.generator.kind)
            continue
        rows = []
        for p in ctx.config.grid.p:
            for alpha in (ctx.config.grid.alpha if sobolev else [None]):
                if not proposition_applies(name, p, alpha, p0):
                    continue
                ratios = _proposition_ratios(ctx, term_name, terms[term_name], F, G, p, alpha, carrier, cache)
                if np.all(np.isnan(ratios)):
                    raise CampaignError(f"{name}: every sample pair is degenerate at p={p:g}")
                rows.append({
                    "row_id": row_id, "proposition": name, "p": p, "alpha": alpha,
                    "n_samples": count, "max_ratio": float(np.nanmax(ratios)),
                    "mean_ratio": float(np.nanmean(ratios)), "argmax_sample": int(np.nanargmax(ratios)),
                })
                row_id += 1
        constants = {"max_ratio": max((row["max_ratio"] for row in rows), default=None)}
        reports.append(EstimateReport(
            name=name, fitted_constants=constants, samples=count, seed=ctx.seed, rows=rows,
            window={"p": sorted({row["p"] for row in rows}), "p0": p0},
        ))
    return reports


def _run_propositions(ctx: ExperimentContext, threads: int) -> RunResult:
    reports = proposition_norms(ctx, threads)
    table = [row for report in reports for row in report.rows]
    return RunResult(
        experiment="proposition_norms",
        report={**_context_info(ctx), "propositions": {r.name: r.model_dump(mode="json") for r in reports}},
        tables={"propositions": table},
    )


# ---------------------------------------------------------------- estimate suite


def _square_function_report(ctx: ExperimentContext) -> EstimateReport:
    est = ctx.config.estimates
    calc, gen, space = ctx.calculus, ctx.generator, ctx.space
    alpha, N = est.square_alpha, est.square_N
    F, _ = sample_pairs(ctx, est.square_samples)
    fine = refine_grid(ctx.grid)
    variants = [("vertical", lambda f, grid: vertical_square_profile(calc, f, alpha, N, grid))]
    if gen.has_gamma:
        variants.append(("gamma", lambda f, grid: gamma_square_profile(calc, gen, f, alpha, N, grid)))

    rows = []
    for variant, profile in variants:
        coarse = np.stack([profile(F[:, k], ctx.grid) for k in range(F.shape[1])], axis=1)
        refined = np.stack([profile(F[:, k], fine) for k in range(F.shape[1])], axis=1)
        for p in est.square_p:
            base = lp_norm(space, F, p)
            best = float(np.max(lp_norm(space, coarse, p) / base))
            best_fine = float(np.max(lp_norm(space, refined, p) / base))
            row = {
                "variant": variant, "p": p, "max_ratio": best, "refined_max_ratio": best_fine,
                "refinement_change": abs(best_fine - best) / best if best > 0 else 0.0, "exact_rel_error": None,
            }
            if variant == "vertical" and p == 2 and calc.path == "hermitian":
                exact = np.array([vertical_square_function_exact(calc, F[:, k], alpha, N) for k in range(F.shape[1])])
                values = lp_norm(space, coarse, 2) / base
                row["exact_rel_error"] = float(np.max(np.abs(values - exact) / exact))
            rows.append(row)
    return EstimateReport(
        name="square_functions", fitted_constants={"max_ratio": max(row["max_ratio"] for row in rows)},
        window={"alpha": alpha, "N": N, "p": list(est.square_p)}, samples=est.square_samples,
        seed=ctx.seed, rows=rows,
    )


def _time_fields(ctx: ExperimentContext, count: int) -> TimeField:
    calc, gen, grid = ctx.calculus, ctx.generator, ctx.grid
    F, _ = sample_pairs(ctx, count)
    if gen.has_gamma:
        fields = [gradient_time_field(calc, gen, F[:, k], ctx.D, grid) for k in range(count)]
        return stack_fields(fields)
    # without a carré du champ the band-pass field |Q_t f| stands in
    values = [np.abs(apply_family(calc, lambda x: psi(ctx.D, x), grid.nodes, F[:, k])).T for k in range(count)]
    return TimeField(values=np.stack(values, axis=-1), grid=grid)


def _orthogonality_report(ctx: ExperimentContext) -> EstimateReport:
    est = ctx.config.estimates
    count = est.orthogonality_samples
    fields = _time_fields(ctx, count)
    alpha, N = est.square_alpha, est.square_N
    rows = []
    for p in est.square_p:
        ratios = []
        for k in range(count):
            field = TimeField(values=fields.values[..., k], grid=fields.grid)
            try:
                ratios.append(orthogonality_ratio(ctx.calculus, field, alpha, N, p))
            except DegenerateSampleError:
                logger.debug("orthogonality sample %d skipped at p=%g", k, p)
        if not ratios:
            raise InsufficientDataError(f"every orthogonality sample vanished at p={p:g}")
        rows.append({"p": p, "max_ratio": float(max(ratios)), "mean_ratio": float(np.mean(ratios)),
                     "n_samples": len(ratios)})
    return EstimateReport(
        name="orthogonality", fitted_constants={"max_ratio": max(row["max_ratio"] for row in rows)},
        window={"alpha": alpha, "N": N, "p": list(est.square_p)}, samples=count, seed=ctx.seed, rows=rows,
    )


def _tent_report(ctx: ExperimentContext) -> EstimateReport:
    est = ctx.config.estimates
    count = est.tent_samples
    fields = _time_fields(ctx, 2 * count)
    rows = []
    for p in est.tent_p:
        for j in est.tent_j:
            ratios = np.asarray(change_of_angle_ratio(fields, ctx.space, p, j, ctx.nu))
            best = float(ratios[:count].max())
            full = float(ratios.max())
            rows.append({
                "p": p, "j": j, "max_ratio": best, "n_samples": count,
                "stability": (full - best) / best if best > 0 else 0.0,
            })
    return EstimateReport(
        name="tent_change_of_angle", fitted_constants={"common_bound": max(row["max_ratio"] for row in rows)},
        window={"p": list(est.tent_p), "j": list(est.tent_j), "nu": ctx.nu}, samples=count,
        seed=ctx.seed, rows=rows,
    )


def estimate_suite(ctx: ExperimentContext) -> list[EstimateReport]:
    est = ctx.config.estimates
    calc, gen, space, seed = ctx.calculus, ctx.generator, ctx.space, ctx.seed
    reports = [fit_ue(calc, space, est.ue_t_window, est.ue_times)]

    radius = est.dg_radius if est.dg_radius is not None else 2 * space.scale_h
    pairs = centered_pairs(space, [s * space.scale_h for s in est.dg_separations])
    try:
        reports.append(davies_gaffney(calc, gen, [radius], pairs, samples=est.dg_samples, seed=seed))
    except InsufficientDataError as e:
        logger.warning("Davies-Gaffney fit skipped: %s", e)
        reports.append(EstimateReport(name="dg", notes=str(e), seed=seed))

    if gen.has_gamma:
        times = np.geomspace(1 / calc.lambda_max, 1 / calc.lambda_min, est.gradient_times)
        for p in est.gradient_p:
            reports.append(gradient_bound(calc, gen, p, times, samples=est.gradient_samples, seed=seed))
    reports.append(_square_function_report(ctx))
    reports.append(_orthogonality_report(ctx))
    reports.append(_tent_report(ctx))
    for p in est.imaginary_p:
        reports.append(imaginary_power_growth(calc, p, est.imaginary_eta, samples=est.imaginary_samples, seed=seed))
    return reports


def _flatten(reports: list[EstimateReport]) -> list[dict[str, Any]]:
    table = []
    for report in reports:
        for row in report.rows or [{}]:
            table.append({"row_id": len(table), "estimate": report.name, **row})
    return table


def _run_estimates(ctx: ExperimentContext, threads: int) -> RunResult:
    reports = estimate_suite(ctx)
    return RunResult(
        experiment="estimate_suite",
        report={**_context_info(ctx), "estimates": {r.name: r.model_dump(mode="json") for r in reports}},
        tables={"estimates": _flatten(reports)},
    )


# ---------------------------------------------------------------- assumptions


def verify_assumptions(ctx: ExperimentContext) -> EstimateReport:
    gen, calc, seed = ctx.generator, ctx.calculus, ctx.seed
    rows: list[dict[str, Any]] = []

    def check(name: str, value: Optional[float], violated: bool, **extra) -> None:
        rows.append({"check": name, "value": value, "violated": bool(violated), **extra})

    try:
        check_metric(ctx.space.dist)
        check("metric", 0.0, False)
    except ParameterError as e:
        check("metric", None, True, note=str(e))
    check("doubling", ctx.doubling.c_doubling, False, nu_fit=ctx.doubling.nu_fit,
          max_ratio_violation=ctx.doubling.max_ratio_violation)
    if gen.kind == "divergence_form":
        ellipticity = check_ellipticity(coefficient_matrix(ctx.config, ctx.space))
        check("ellipticity", ellipticity.lambda_low, not ellipticity.valid, Lambda_high=ellipticity.Lambda_high)
    omega = check_accretivity(gen, samples=1000, seed=seed)
    check("accretivity_angle", omega, omega >= math.pi / 2)

    if gen.has_gamma:
        rng = np.random.default_rng([seed, 0])
        shape = (gen.n, CARRE_PAIRS)
        Fc = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        Gc = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        strong = check_carre_identity(gen, Fc, Gc)
        # the identity is exact only for graph generators; divergence form is O(h)
        check("carre_strong", strong.residual_strong,
              gen.kind == "graph_laplacian" and strong.residual_strong > CARRE_TOL,
              residual_abs=strong.residual_strong_abs)
        f, g = Fc[:, 0].real, Gc[:, 0].real
        times = np.geomspace(1 / calc.lambda_max, 1 / calc.lambda_min, 8)
        weak = check_carre_identity(gen, f, g, calc, times)
        check("carre_weak", weak.residual_weak_max_t, False, carre_w_ratio=weak.carre_w_ratio)
        worst = check_cauchy_schwarz(gen, samples=CAUCHY_SCHWARZ_SAMPLES, seed=seed)
        # complex symmetric Γ of a non-Hermitian A carries no pointwise Cauchy-Schwarz bound
        check("cauchy_schwarz", worst, gen.self_adjoint and worst > CAUCHY_SCHWARZ_TOL)
        r2 = check_r2_and_carre2(gen, calc, samples=R2_SAMPLES, seed=seed)
        check("carre2", r2.carre2_max_ratio, gen.self_adjoint and r2.carre2_max_ratio > 1 + R2_TOL)
        if r2.r2_max_defect is not None:
            check("r2", r2.r2_max_defect, gen.conservative and r2.r2_max_defect > R2_TOL,
                  r2_max_ratio=r2.r2_max_ratio, skipped=r2.skipped)

    ue = fit_ue(calc, ctx.space)
    check("ue", ue.fitted_constants.get("C"), ue.violations > 0 or ue.fitted_constants.get("C") is None)
    try:
        dg = davies_gaffney(calc, gen, [2 * ctx.space.scale_h],
                            centered_pairs(ctx.space, [s * ctx.space.scale_h for s in (8, 16, 32)]),
                            samples=ctx.config.estimates.dg_samples, seed=seed)
        check("dg", dg.fitted_constants.get("semigroup_slope"), dg.violations > 0,
              r2=dg.fitted_constants.get("semigroup_r2"))
    except InsufficientDataError as e:
        logger.warning("Davies-Gaffney check skipped: %s", e)
        check("dg", None, False, note=str(e))

    for k, row in enumerate(rows):
        row["row_id"] = k
    violations = sum(1 for row in rows if row["violated"])
    return EstimateReport(
        name="assumptions", violations=violations, samples=CARRE_PAIRS, seed=seed, rows=rows,
        fitted_constants={"nu_fit": ctx.doubling.nu_fit, "accretivity_angle": omega},
    )


def _run_assumptions(ctx: ExperimentContext, threads: int) -> RunResult:
    report = verify_assumptions(ctx)
    return RunResult(
        experiment="verify_assumptions",
        report={**_context_info(ctx), "assumptions": report.model_dump(mode="json")},
        tables={"assumptions": report.rows},
        violations=report.violations,
    )


# ---------------------------------------------------------------- dispatch


RUNNERS: dict[str, Callable[[ExperimentContext, int], RunResult]] = {
    "verify_assumptions": _run_assumptions,
    "decomposition": _run_decomposition,
    "carre_split": _run_carre_split,
    "leibniz_sweep": _run_leibniz,
    "proposition_norms": _run_propositions,
    "estimate_suite": _run_estimates,
}


def run_experiment(config: ExperimentConfig, threads: Optional[int] = None) -> RunResult:
    threads = threads if threads is not None else get_settings().threads
    ctx = build_context(config)
    logger.info("running %s with %d thread(s)", config.experiment, threads)
    return RUNNERS[config.experiment](ctx, threads)


def replay_row(config: ExperimentConfig, experiment: str, row_id: int) -> dict[str, Any]:
    """Recompute one table row of `experiment` in isolation."""
    if experiment not in RUNNERS:
        raise ParameterError(f"unknown experiment {experiment!r}")
    if experiment != config.experiment:
        config = config.model_copy(update={"experiment": experiment})
    ctx = build_context(config)
    if experiment == "leibniz_sweep":
        return _replay_leibniz(ctx, row_id)
    if experiment in ("decomposition", "carre_split"):
        if not 0 <= row_id < config.sampler.count:
            raise ParameterError(f"{experiment} has no row {row_id}")
        kind = config.sampler.kind
        f = sample_test_function(ctx.calculus, kind, ctx.seed, 2 * row_id)
        g = sample_test_function(ctx.calculus, kind, ctx.seed, 2 * row_id + 1)
        row_fn = _decomposition_row if experiment == "decomposition" else _carre_split_row
        return row_fn(ctx, row_id, f, g)
    result = RUNNERS[experiment](ctx, 1)
    table = next(iter(result.tables.values()))
    for row in table:
        if row.get("row_id") == row_id:
            return row
    raise ParameterError(f"{experiment} has no row {row_id}")
