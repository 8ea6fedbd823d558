import logging
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import PrivateAttr, model_validator
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.spatial.distance import cdist

from .errors import ConnectivityError, ParameterError, SizeError
from .models import DoublingProfile, LabModel, NDArray
from .settings import get_settings

logger = logging.getLogger(__name__)

METRIC_TOL = 1e-12
TRIANGLE_SAMPLES = 200_000


class MetricMeasureSpace(LabModel):
    n: int
    dist: NDArray
    mu: NDArray
    scale_h: float
    kind: str = "graph"
    dims: tuple[int, ...] = ()
    h: float = 1.0
    periodic: bool = False
    # (m, 3) rows of (i, j, weight); the conductances a grid or graph was built from
    edges: NDArray

    _sorted_cache: Optional[tuple] = PrivateAttr(default=None)

    @model_validator(mode="after")
    def check_axioms(self):
        if self.dist.shape != (self.n, self.n) or self.mu.shape != (self.n,):
            raise ParameterError("dist must be n x n and mu an n-vector")
        if not np.all(np.isfinite(self.dist)) or not np.all(np.isfinite(self.mu)):
            raise ParameterError("dist and mu must be finite")
        if np.any(self.mu <= 0):
            raise ParameterError("measure weights must be strictly positive")
        check_metric(self.dist)
        return self

    @property
    def diameter(self) -> float:
        return float(self.dist.max())

    @property
    def total_measure(self) -> float:
        return float(self.mu.sum())

    @property
    def coords(self) -> np.ndarray:
        """Lattice coordinates of grid points, row-major over dims."""
        if self.kind != "grid":
            raise ParameterError("coordinates exist only for grid spaces")
        idx = np.indices(self.dims).reshape(len(self.dims), -1).T
        return idx * self.h

    def field(self, values) -> np.ndarray:
        values = np.asarray(values)
        if values.shape[0] != self.n:
            raise ParameterError(f"field has {values.shape[0]} entries, space has {self.n} points")
        if not np.all(np.isfinite(values)):
            raise ParameterError("field entries must be finite")
        return values

    def _sorted_rows(self):
        cache = self._sorted_cache
        if cache is None:
            order = np.argsort(self.dist, axis=1, kind="stable")
            sorted_dist = np.take_along_axis(self.dist, order, axis=1)
            cum_mu = np.cumsum(self.mu[order], axis=1)
            cache = (sorted_dist, cum_mu)
            self._sorted_cache = cache
        return cache


def check_metric(dist: np.ndarray, exhaustive_max: Optional[int] = None) -> None:
    n = dist.shape[0]
    scale = max(float(dist.max()), 1.0)
    if not np.allclose(dist, dist.T, rtol=0, atol=METRIC_TOL * scale):
        raise ParameterError("distance matrix is not symmetric")
    if np.any(np.diag(dist) != 0):
        raise ParameterError("distance matrix must have a zero diagonal")
    off = dist[~np.eye(n, dtype=bool)]
    if off.size and off.min() <= 0:
        raise ParameterError("distinct points must be at positive distance")

    if exhaustive_max is None:
        exhaustive_max = get_settings().metric_exhaustive_max
    tol = METRIC_TOL * scale
    if n <= exhaustive_max:
        for k in range(n):
            if np.any(dist > dist[:, k, None] + dist[None, k, :] + tol):
                raise ParameterError("triangle inequality fails")
        return
    rng = np.random.default_rng(0)
    x, y, z = rng.integers(0, n, size=(3, TRIANGLE_SAMPLES))
    if np.any(dist[x, z] > dist[x, y] + dist[y, z] + tol):
        raise ParameterError("triangle inequality fails on a sampled triple")


def _grid_edges(dims: Sequence[int], h: float, periodic: bool) -> np.ndarray:
    d = len(dims)
    index = np.arange(math.prod(dims)).reshape(dims)
    weight = h ** (d - 2)
    edges = []
    for axis, side in enumerate(dims):
        if side < 2:
            continue
        src = index.take(np.arange(side - 1), axis=axis).ravel()
        dst = index.take(np.arange(1, side), axis=axis).ravel()
        edges.append(np.stack([src, dst], axis=1))
        if periodic and side > 2:
            src = index.take([side - 1], axis=axis).ravel()
            dst = index.take([0], axis=axis).ravel()
            edges.append(np.stack([src, dst], axis=1))
    if not edges:
        return np.zeros((0, 3))
    pairs = np.concatenate(edges).astype(float)
    return np.column_stack([pairs, np.full(len(pairs), weight)])


def build_grid_space(dims: Sequence[int], h: float = 1.0, periodic: bool = False,
                     max_points: Optional[int] = None) -> MetricMeasureSpace:
    dims = tuple(int(s) for s in dims)
    if not 1 <= len(dims) <= 3:
        raise ParameterError("grid spaces have between 1 and 3 dimensions")
    if any(s < 1 for s in dims) or h <= 0:
        raise ParameterError("grid sides must be positive and h > 0")
    n = math.prod(dims)
    cap = max_points if max_points is not None else get_settings().max_points
    if n > cap:
        raise SizeError(f"grid has {n} points, cap is {cap}")
    if n < 2:
        raise ParameterError("a space needs at least two points")

    idx = np.indices(dims).reshape(len(dims), -1).T.astype(float)
    if periodic:
        sq = np.zeros((n, n))
        for axis, side in enumerate(dims):
            delta = np.abs(idx[:, axis, None] - idx[None, :, axis])
            delta = np.minimum(delta, side - delta)
            sq += delta ** 2
        dist = np.sqrt(sq) * h
    else:
        dist = cdist(idx, idx) * h

    logger.debug("grid space dims=%s h=%g periodic=%s", dims, h, periodic)
    return MetricMeasureSpace(
        n=n, dist=dist, mu=np.full(n, h ** len(dims)), scale_h=h,
        kind="grid", dims=dims, h=h, periodic=periodic,
        edges=_grid_edges(dims, h, periodic),
    )


def read_edge_list(path: str | Path) -> list[tuple[int, int, float]]:
    """Read `i j weight` triples, one per line, 0-indexed."""
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] != 3:
        raise ParameterError(f"{path}: expected three columns per line")
    return [(int(i), int(j), float(w)) for i, j, w in data]


def build_graph_space(edges, mu, max_points: Optional[int] = None) -> MetricMeasureSpace:
    mu = np.asarray(mu, dtype=float)
    n = len(mu)
    cap = max_points if max_points is not None else get_settings().max_points
    if n > cap:
        raise SizeError(f"graph has {n} vertices, cap is {cap}")
    edges = np.asarray(edges, dtype=float).reshape(-1, 3)
    i, j, w = edges[:, 0].astype(int), edges[:, 1].astype(int), edges[:, 2]
    if np.any(w <= 0):
        raise ParameterError("edge weights must be positive")
    if np.any((i < 0) | (i >= n) | (j < 0) | (j >= n)) or np.any(i == j):
        raise ParameterError("edges must join two distinct existing vertices")

    lengths = np.full((n, n), np.inf)
    np.minimum.at(lengths, (i, j), w ** -0.5)
    np.minimum.at(lengths, (j, i), w ** -0.5)
    n_components, _ = connected_components(np.isfinite(lengths).astype(float), directed=False)
    if n_components != 1:
        raise ConnectivityError(f"graph has {n_components} connected components")

    dist = shortest_path(lengths, method="D", directed=False)
    scale_h = float(dist[dist > 0].min())
    return MetricMeasureSpace(
        n=n, dist=dist, mu=mu, scale_h=scale_h, kind="graph", edges=edges,
    )


def ball(space: MetricMeasureSpace, x: int, r: float) -> np.ndarray:
    if r <= 0:
        raise ParameterError("ball radius must be positive")
    return np.flatnonzero(space.dist[x] < r)


def annulus(space: MetricMeasureSpace, B: tuple[int, float], j: int) -> np.ndarray:
    x, r = B
    if j < 0:
        raise ParameterError("annulus index must be nonnegative")
    if r <= 0:
        raise ParameterError("ball radius must be positive")
    d = space.dist[x]
    if j == 0:
        return np.flatnonzero(d < 2 * r)
    return np.flatnonzero((d >= 2 ** j * r) & (d < 2 ** (j + 1) * r))


def volume(space: MetricMeasureSpace, x, r) -> np.ndarray:
    """V(x, r) for arrays of centers and radii (broadcast together)."""
    sorted_dist, cum_mu = space._sorted_rows()
    x, r = np.broadcast_arrays(np.asarray(x), np.asarray(r, dtype=float))
    out = np.empty(x.shape)
    for pos in np.ndindex(x.shape):
        row = int(x[pos])
        count = np.searchsorted(sorted_dist[row], r[pos], side="left")
        out[pos] = cum_mu[row, count - 1] if count > 0 else 0.0
    return out


def volume_table(space: MetricMeasureSpace, radii) -> np.ndarray:
    """(n, R) table of V(x, r) with strict inequality d(x, y) < r."""
    sorted_dist, cum_mu = space._sorted_rows()
    radii = np.asarray(radii, dtype=float)
    table = np.empty((space.n, radii.size))
    for x in range(space.n):
        count = np.searchsorted(sorted_dist[x], radii, side="left")
        table[x] = np.where(count > 0, cum_mu[x, np.maximum(count - 1, 0)], 0.0)
    return table


def lp_norm(space: MetricMeasureSpace, f, p: float) -> np.ndarray | float:
    """Weighted L^p(mu) norm along the first axis; math.inf gives the sup norm."""
    return weighted_lp_norm(f, p, space.mu)


def weighted_lp_norm(f, p: float, mu: np.ndarray) -> np.ndarray | float:
    if p < 1:
        raise ParameterError(f"p must be >= 1, got {p}")
    a = np.abs(np.asarray(f))
    if math.isinf(p):
        out = a.max(axis=0)
    else:
        peak = a.max(axis=0)
        safe = np.where(peak > 0, peak, 1.0)
        w = mu if a.ndim == 1 else mu[:, None]
        out = safe * np.sum((a / safe) ** p * w, axis=0) ** (1.0 / p)
        out = np.where(peak > 0, out, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def ball_average(space: MetricMeasureSpace, f, B: tuple[int, float]) -> complex:
    idx = ball(space, B[0], B[1])
    f = np.asarray(f)
    return complex(np.sum(f[idx] * space.mu[idx]) / space.mu[idx].sum())


def doubling_profile(space: MetricMeasureSpace, radii=None, n_radii: int = 24) -> DoublingProfile:
    if radii is None:
        lo, hi = space.scale_h, space.diameter / 2
        if hi < lo:
            hi = lo
        radii = np.geomspace(lo, hi, n_radii)
    radii = np.unique(np.asarray(radii, dtype=float))
    if radii.size == 0:
        raise ParameterError("empty radii window")
    slack = 1e-12 * space.diameter
    if radii[0] < space.scale_h - slack or radii[-1] > space.diameter + slack:
        raise ParameterError("radii must lie within [scale_h, diameter]")

    vol = volume_table(space, radii)
    vol2 = volume_table(space, 2 * radii)
    c_doubling = float(np.max(vol2 / vol))

    if radii.size >= 2:
        logr = np.log(radii)
        logv = np.log(vol)
        centered = logr - logr.mean()
        slopes = (logv - logv.mean(axis=1, keepdims=True)) @ centered / np.sum(centered ** 2)
        nu_fit = float(slopes.mean())
    else:
        nu_fit = float(np.log2(np.mean(vol2 / vol)))
    nu_fit = max(nu_fit, np.finfo(float).tiny)

    # implied (VD_nu) constant at the fitted exponent over all pairs r >= s
    ratio = vol[:, :, None] / vol[:, None, :]
    scale = (radii[:, None] / radii[None, :]) ** nu_fit
    upper = np.triu(np.ones((radii.size, radii.size), dtype=bool)).T
    max_ratio = float(np.max((ratio / scale)[:, upper]))

    return DoublingProfile(
        c_doubling=max(c_doubling, 1.0), nu_fit=nu_fit,
        radii_window=(float(radii[0]), float(radii[-1])),
        max_ratio_violation=max_ratio, n_radii=int(radii.size),
    )
