import numpy as np
import pytest
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from mhubert.quantizer.hnsw import (
    HnswGraph,
    build_hnsw,
    hnsw_search,
    hnsw_search_batch,
    recall_at_1,
)


def exact_nearest(points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    return cdist(queries, points, 'sqeuclidean').argmin(axis=1)


@pytest.fixture(scope='module')
def graph_1000():
    rng = np.random.default_rng(0)
    points = rng.normal(size=(1000, 64)).astype(np.float32)
    graph = build_hnsw(points, max_links=16, ef_construction=100, seed=1)
    picks = rng.integers(0, 1000, size=10_000)
    queries = points[picks] + 0.5 * rng.normal(size=(10_000, 64))
    return points, graph, queries.astype(np.float32)


@pytest.fixture(scope='module')
def centroid_graph():
    """1000 centroids in 64 dims with unrelated random queries."""
    rng = np.random.default_rng(10)
    points = rng.normal(size=(1000, 64)).astype(np.float32)
    graph = build_hnsw(points, max_links=32, seed=2)
    queries = rng.normal(size=(10_000, 64)).astype(np.float32)
    return points, graph, queries, exact_nearest(points, queries)


def test_single_point():
    points = np.array([[1.0, 2.0, 3.0]])
    g = build_hnsw(points, max_links=4)
    assert g.num_nodes == 1 and g.entry_point == 0
    assert hnsw_search(g, points, [9.0, 9.0, 9.0]) == 0


def test_two_points():
    points = np.array([[0.0, 0.0], [10.0, 0.0]])
    g = build_hnsw(points, max_links=4)
    assert g.neighbors(0).tolist() == [1]
    assert g.neighbors(1).tolist() == [0]
    queries = np.array([[1.0, 0.0], [9.0, 1.0], [-5.0, 0.0]])
    assert hnsw_search_batch(g, points, queries).tolist() == [0, 1, 0]


def test_equidistant_query_takes_lowest_id():
    points = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 5.0]])
    g = build_hnsw(points, max_links=4)
    assert hnsw_search(g, points, [0.0, 0.0]) == 0


def test_empty_graph_and_shape_errors():
    empty = HnswGraph([], np.zeros(0, dtype=np.int32), 0)
    with pytest.raises(ValueError):
        hnsw_search_batch(empty, np.zeros((0, 2)), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        build_hnsw(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        build_hnsw(np.zeros((4, 3)), max_links=1)
    points = np.random.default_rng(2).normal(size=(20, 3))
    g = build_hnsw(points, max_links=4)
    with pytest.raises(ValueError):
        hnsw_search_batch(g, points, np.zeros((1, 4)))
    with pytest.raises(ValueError):
        hnsw_search_batch(g, points[:10], np.zeros((1, 3)))


def test_layer_structure(graph_1000):
    points, g, _ = graph_1000
    assert g.layers[0].shape == (1000, 32)
    for level, adj in enumerate(g.layers[1:], start=1):
        assert adj.shape[1] == 16
        linked = np.flatnonzero((adj >= 0).any(axis=1))
        assert np.all(g.levels[linked] >= level)
    assert g.levels[g.entry_point] == g.max_level
    node = 17
    nbrs = g.neighbors(node)
    d = ((points[nbrs].astype(np.float64) - points[node]) ** 2).sum(axis=1)
    assert np.all(np.diff(d) >= -1e-6)
    assert node not in nbrs.tolist()


def test_level0_is_connected(graph_1000):
    _, g, _ = graph_1000
    adj = g.layers[0]
    rows, cols = np.nonzero(adj >= 0)
    matrix = csr_matrix((np.ones(len(rows)), (rows, adj[rows, cols])),
                        shape=(g.num_nodes, g.num_nodes))
    n_components, _ = connected_components(matrix, directed=True,
                                           connection='weak')
    assert n_components == 1


def test_self_queries(graph_1000):
    points, g, _ = graph_1000
    found = hnsw_search_batch(g, points, points, ef_search=64)
    assert recall_at_1(found, np.arange(1000)) >= 0.99


def test_recall_and_ef(graph_1000):
    points, g, queries = graph_1000
    exact = exact_nearest(points, queries)
    wide = recall_at_1(hnsw_search_batch(g, points, queries, ef_search=64),
                       exact)
    narrow = recall_at_1(hnsw_search_batch(g, points, queries, ef_search=1),
                         exact)
    assert wide >= 0.95
    assert narrow <= wide


def test_recall_on_random_queries(centroid_graph):
    points, g, queries, exact = centroid_graph
    recall = {ef: recall_at_1(hnsw_search_batch(g, points, queries,
                                                ef_search=ef), exact)
              for ef in (16, 64, 128)}
    assert recall[64] >= 0.95
    assert recall[128] >= recall[16]


def test_results_independent_of_batching(graph_1000):
    points, g, queries = graph_1000
    sample = queries[:2000]
    base = hnsw_search_batch(g, points, sample, ef_search=32)
    perm = np.random.default_rng(3).permutation(len(sample))
    shuffled = hnsw_search_batch(g, points, sample[perm], ef_search=32)
    assert np.array_equal(shuffled, base[perm])
    chunked = hnsw_search_batch(g, points, sample, ef_search=32, chunk=7)
    assert np.array_equal(chunked, base)
    assert hnsw_search(g, points, sample[5], ef_search=32) == base[5]


def test_build_is_deterministic():
    points = np.random.default_rng(4).normal(size=(200, 8))
    one = build_hnsw(points, max_links=8, ef_construction=40, seed=2)
    two = build_hnsw(points, max_links=8, ef_construction=40, seed=2)
    assert one.entry_point == two.entry_point
    assert all(np.array_equal(a, b) for a, b in zip(one.layers, two.layers))
    assert np.array_equal(one.levels, two.levels)


def test_recall_at_1_errors():
    assert recall_at_1([1, 2, 3, 4], [1, 2, 0, 4]) == 0.75
    with pytest.raises(ValueError):
        recall_at_1([1, 2], [1])
    with pytest.raises(ValueError):
        recall_at_1([], [])
