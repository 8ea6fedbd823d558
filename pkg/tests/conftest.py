import numpy as np
import pytest

from paralab import settings
from paralab.calculus import build_calculus
from paralab.operators import divergence_form, graph_laplacian
from paralab.paraproducts import adapted_grid
from paralab.space import build_graph_space, build_grid_space

K2_EDGES = [(0, 1, 1.0)]
P3_EDGES = [(0, 1, 1.0), (1, 2, 1.0)]


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    for name in ("PARALAB_MAX_POINTS", "PARALAB_NONNORMAL_MAX_POINTS", "PARALAB_THREADS", "PARALAB_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    settings.reset()
    yield
    settings.reset()


@pytest.fixture
def k2_space():
    return build_graph_space(K2_EDGES, [1.0, 1.0])


@pytest.fixture
def k2(k2_space):
    return build_calculus(graph_laplacian(k2_space))


@pytest.fixture
def p3_space():
    return build_graph_space(P3_EDGES, [1.0, 1.0, 1.0])


@pytest.fixture
def p3(p3_space):
    return build_calculus(graph_laplacian(p3_space))


@pytest.fixture
def line64():
    return build_calculus(graph_laplacian(build_grid_space([64])))


@pytest.fixture
def line256():
    return build_calculus(graph_laplacian(build_grid_space([256])))


@pytest.fixture
def square8():
    return build_calculus(graph_laplacian(build_grid_space([8, 8])))


@pytest.fixture
def hermitian_divergence():
    space = build_grid_space([6, 6], h=0.5)
    return build_calculus(divergence_form(space, [[1.0, 0.5j], [-0.5j, 1.0]]))


@pytest.fixture
def nonnormal_divergence():
    space = build_grid_space([6, 6], h=0.5)
    return build_calculus(divergence_form(space, [[1.0, 0.5j], [0.5j, 1.0]]))


@pytest.fixture
def grid_for():
    return lambda calc, nodes_per_decade=40: adapted_grid(calc, nodes_per_decade)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)