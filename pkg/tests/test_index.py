import time

import numpy as np
import pytest

from mhubert.quantizer.index import (
    DEFAULT_INDEX_CONFIG,
    Index,
    component_seed,
    index_assign,
    load_index,
    parse_index_config,
    read_index,
    save_index,
    train_index,
    write_index,
)
from mhubert.quantizer.hnsw import build_hnsw
from mhubert.quantizer.kmeans import KMeansModel, assign_exhaustive, train_kmeans


def clustered(n: int, dim: int, clusters: int, seed: int,
              spread: float = 4.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=spread, size=(clusters, dim))
    return centers[rng.integers(0, clusters, size=n)] + rng.normal(size=(n, dim))


@pytest.fixture(scope='module')
def small_index():
    data = clustered(2000, 16, 20, seed=0)
    return data, train_index(data, 'OPQ4_8,IVF32_HNSW8,PQ4x4', seed=3)


@pytest.fixture(scope='module')
def latent_index():
    # 768-d frames through the default 64-d OPQ / 1000 centroid layout
    data = clustered(1200, 768, 50, seed=1, spread=1.0).astype(np.float32)
    return data, train_index(data, DEFAULT_INDEX_CONFIG, seed=0)


def test_parse_index_config():
    cfg = parse_index_config('OPQ16_64,IVF1000_HNSW32,PQ16x4fsr')
    assert (cfg.opq_m, cfg.opq_dim, cfg.n_list, cfg.hnsw_links) == \
        (16, 64, 1000, 32)
    assert (cfg.pq_m, cfg.pq_bits, cfg.fast_scan, cfg.residual) == \
        (16, 4, True, True)
    assert cfg.describe() == 'OPQ16_64,IVF1000_HNSW32,PQ16x4fsr'
    plain = parse_index_config('IVF100_HNSW16,PQ8x4', kmeans_iters=5)
    assert not plain.uses_opq and plain.kmeans_iters == 5
    assert plain.describe() == 'IVF100_HNSW16,PQ8x4'


@pytest.mark.parametrize('text', [
    'IVF100,PQ8x4',
    'OPQ16_64,IVF1000_HNSW32,PQ16x8',
    'OPQ16_60,IVF1000_HNSW32,PQ16x4',
    'OPQ16_64,IVF0_HNSW32,PQ16x4',
    'OPQ16_64,IVF10_HNSW32,PQ12x4',
    '',
])
def test_parse_index_config_rejects(text):
    with pytest.raises(ValueError):
        parse_index_config(text)


def test_identity_index_matches_components():
    data = clustered(800, 12, 10, seed=2)
    config = parse_index_config('IVF16_HNSW8,PQ4x4', kmeans_iters=10)
    idx = train_index(data, config, seed=7)
    assert idx.opq.is_identity
    assert (idx.d_in, idx.d_out, idx.K) == (12, 12, 16)
    coarse = train_kmeans(data, 16, max_iters=10,
                          seed=component_seed(7, 'kmeans'))
    assert np.array_equal(idx.coarse.centroids, coarse.centroids)
    graph = build_hnsw(coarse.centroids, 8, config.ef_construction,
                       seed=component_seed(7, 'hnsw'))
    assert all(np.array_equal(a, b)
               for a, b in zip(idx.graph.layers, graph.layers))


def test_training_is_deterministic(small_index):
    data, idx = small_index
    again = train_index(data, 'OPQ4_8,IVF32_HNSW8,PQ4x4', seed=3)
    assert write_index(again) == write_index(idx)


def test_index_agrees_with_exhaustive(small_index):
    data, idx = small_index
    assert idx.opq.rotation.shape == (8, 16)
    labels = index_assign(idx, data, ef_search=64)
    exact = assign_exhaustive(idx.coarse, idx.opq.apply(data))
    assert (labels == exact).mean() >= 0.95
    assert labels.min() >= 0 and labels.max() < idx.K
    # lifting the centroids back to the input space keeps the nearest one
    lifted = KMeansModel(idx.coarse.centroids @ idx.opq.rotation)
    assert (assign_exhaustive(lifted, data) == exact).mean() >= 0.99


def test_assignment_is_per_frame(small_index):
    data, idx = small_index
    labels = index_assign(idx, data, ef_search=16)
    assert np.array_equal(index_assign(idx, data[100:300], ef_search=16),
                          labels[100:300])
    threaded = index_assign(idx, np.tile(data, (3, 1)), ef_search=16,
                            threads=4)
    assert np.array_equal(threaded, np.tile(labels, 3))


def test_assign_edge_cases(small_index):
    _, idx = small_index
    assert index_assign(idx, np.zeros((0, 16))).shape == (0,)
    with pytest.raises(ValueError):
        index_assign(idx, np.zeros((5, 15)))


def test_too_few_vectors():
    with pytest.raises(ValueError):
        train_index(np.zeros((10, 8)), 'IVF16_HNSW8,PQ4x4')


def test_index_bytes_are_stable(small_index, tmp_path):
    _, idx = small_index
    blob = write_index(idx)
    assert blob[:4] == b'MHIX'
    restored = read_index(blob)
    assert write_index(restored) == blob
    assert restored.config.describe() == idx.config.describe()
    assert np.array_equal(restored.coarse.centroids, idx.coarse.centroids)
    path = str(tmp_path / 'small.mhix')
    save_index(path, idx)
    assert write_index(load_index(path)) == blob


def test_index_keeps_training_knobs():
    data = clustered(400, 8, 10, seed=5)
    config = parse_index_config('IVF10_HNSW4,PQ2x4', kmeans_iters=7,
                                opq_iters=3, ef_construction=40,
                                train_cap_per_centroid=100)
    idx = train_index(data, config, seed=1)
    restored = read_index(write_index(idx))
    assert restored.config == config
    assert restored.graph.ef_construction == 40


def test_read_index_errors(small_index):
    _, idx = small_index
    blob = write_index(idx)
    with pytest.raises(ValueError, match='magic'):
        read_index(b'XXXX' + blob[4:])
    with pytest.raises(ValueError, match='version'):
        read_index(blob[:4] + (9).to_bytes(4, 'little') + blob[8:])
    with pytest.raises(ValueError, match='truncated'):
        read_index(blob[:-1])
    with pytest.raises(ValueError, match='trailing'):
        read_index(blob + b'\x00')


def test_index_shape_validation(small_index):
    _, idx = small_index
    with pytest.raises(ValueError):
        Index(idx.config, idx.opq, KMeansModel(np.zeros((5, 8))), idx.graph,
              idx.pq)


@pytest.mark.slow
def test_latent_index_layout(latent_index):
    data, idx = latent_index
    assert idx.opq.rotation.shape == (64, 768)
    assert idx.opq.orthonormality_error() < 1e-5
    assert idx.K == 1000 and idx.pq.M_sub == 16
    labels = index_assign(idx, data, ef_search=64)
    exact = assign_exhaustive(idx.coarse, idx.opq.apply(data))
    assert (labels == exact).mean() >= 0.95


@pytest.mark.slow
def test_index_faster_than_exhaustive(latent_index):
    _, idx = latent_index
    frames = clustered(100_000, 768, 50, seed=1,
                       spread=1.0).astype(np.float32)
    lifted = KMeansModel(idx.coarse.centroids @ idx.opq.rotation)
    started = time.perf_counter()
    assign_exhaustive(lifted, frames)
    exhaustive = time.perf_counter() - started
    started = time.perf_counter()
    index_assign(idx, frames, ef_search=16)
    indexed = time.perf_counter() - started
    assert exhaustive >= 2 * indexed
