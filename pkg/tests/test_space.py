import math

import numpy as np
import pytest
from hypothesis import given, settings as hsettings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from paralab.errors import ConnectivityError, ParameterError, SizeError
from paralab.space import (
    annulus, ball, ball_average, build_graph_space, build_grid_space, check_metric, doubling_profile,
    lp_norm, read_edge_list, volume, volume_table,
)

TOL = 1e-12


def test_grid_space_shape_and_measure():
    space = build_grid_space([4, 3], h=0.5)
    assert space.n == 12
    assert space.scale_h == 0.5
    assert_allclose(space.mu, 0.25)
    assert_allclose(space.dist[0, 11], 0.5 * math.hypot(3, 2))
    assert space.coords.shape == (12, 2)


def test_periodic_grid_wraps_distances():
    space = build_grid_space([8], periodic=True)
    assert space.dist[0, 7] == 1.0
    assert space.diameter == 4.0


def test_graph_space_uses_resistance_lengths():
    space = build_graph_space([(0, 1, 4.0), (1, 2, 1.0)], [1.0, 2.0, 1.0])
    assert_allclose(space.dist[0, 1], 0.5)
    assert_allclose(space.dist[0, 2], 1.5)
    assert space.scale_h == 0.5


def test_disconnected_graph_is_rejected():
    with pytest.raises(ConnectivityError):
        build_graph_space([(0, 1, 1.0), (2, 3, 1.0)], [1.0] * 4)


def test_size_cap():
    with pytest.raises(SizeError):
        build_grid_space([10, 10], max_points=50)


@pytest.mark.parametrize("edges", [[(0, 0, 1.0)], [(0, 5, 1.0)], [(0, 1, -1.0)]])
def test_bad_edges(edges):
    with pytest.raises(ParameterError):
        build_graph_space(edges, [1.0, 1.0])


def test_read_edge_list(tmp_path):
    path = tmp_path / "p3.edges"
    path.write_text("0 1 1.0\n1 2 2.5\n")
    assert read_edge_list(path) == [(0, 1, 1.0), (1, 2, 2.5)]


def test_check_metric_rejects_triangle_violation():
    dist = np.array([[0.0, 1.0, 5.0], [1.0, 0.0, 1.0], [5.0, 1.0, 0.0]])
    with pytest.raises(ParameterError):
        check_metric(dist)


def test_ball_is_open():
    space = build_grid_space([10])
    assert list(ball(space, 0, 2.0)) == [0, 1]
    assert list(ball(space, 5, 1.0)) == [5]


@hsettings(deadline=None, max_examples=40)
@given(x=st.integers(0, 24), r=st.floats(0.5, 6.0), levels=st.integers(1, 5))
def test_annuli_partition_the_space(x, r, levels):
    space = build_grid_space([25])
    pieces = [annulus(space, (x, r), j) for j in range(levels)]
    union = np.concatenate(pieces)
    assert len(union) == len(set(union.tolist()))
    expected = np.flatnonzero(space.dist[x] < 2 ** levels * r)
    assert sorted(union.tolist()) == expected.tolist()


def test_volume_matches_direct_sum():
    space = build_grid_space([7, 5], h=0.3)
    radii = np.array([0.3, 0.5, 1.0, 2.2])
    table = volume_table(space, radii)
    for x in (0, 17, 34):
        for k, r in enumerate(radii):
            direct = space.mu[space.dist[x] < r].sum()
            assert_allclose(table[x, k], direct, rtol=TOL)
            assert_allclose(volume(space, x, r), direct, rtol=TOL)


def test_lp_norm_batches_and_sup():
    space = build_grid_space([4], h=0.5)
    f = np.array([1.0, -2.0, 0.0, 1.0])
    assert_allclose(lp_norm(space, f, 2), math.sqrt(0.5 * 6))
    assert lp_norm(space, f, math.inf) == 2.0
    batch = np.stack([f, 2 * f, np.zeros(4)], axis=1)
    assert_allclose(lp_norm(space, batch, 3), [lp_norm(space, f, 3), 2 * lp_norm(space, f, 3), 0.0])


def test_ball_average_of_constant():
    space = build_grid_space([9])
    assert ball_average(space, np.full(9, 3.0), (4, 2.5)).real == pytest.approx(3.0)


@pytest.mark.parametrize("dims, low, high", [([256], 0.9, 1.1), ([32, 32], 1.8, 2.2)])
def test_doubling_exponent_of_grids(dims, low, high):
    profile = doubling_profile(build_grid_space(dims))
    assert low <= profile.nu_fit <= high
    assert profile.c_doubling >= 1.0


def test_doubling_single_radius_uses_mean_ratio():
    space = build_grid_space([3])
    profile = doubling_profile(space, radii=[1.0])
    vol = volume_table(space, [1.0])[:, 0]
    vol2 = volume_table(space, [2.0])[:, 0]
    assert_allclose(profile.nu_fit, math.log2(np.mean(vol2 / vol)))
    assert profile.n_radii == 1


def test_two_point_graph_doubles_exactly(k2_space):
    profile = doubling_profile(k2_space)
    assert profile.n_radii == 1
    assert profile.radii_window == (1.0, 1.0)
    assert_allclose(profile.nu_fit, 1.0)
