"""Lloyd k-means with k-means++ seeding and exhaustive assignment.

Distances are squared Euclidean throughout. The assignment step may run on
several threads over contiguous chunks of the data; the centroid update is a
single reduction so results do not depend on the thread count.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

from mhubert.rng import make_rng, spawn_seeds

DEFAULT_ITERS = 25
DEFAULT_TOL = 1e-4
SMALL_RESTARTS = 8
SMALL_PROBLEM = 2_000_000   # n * K below which restarts are used
ASSIGN_CHUNK = 8192

_log = logging.getLogger(__name__)


@dataclass
class KMeansModel:
    """A trained coarse quantizer.

    Attributes:
        centroids (np.ndarray): K x dim float64 centroid matrix.
        inertia (float): Sum of squared distances of the training data to
            their nearest centroid.
        inertia_history (list): Inertia after each assignment step of the
            selected restart.
        n_iter (int): Lloyd iterations run by the selected restart.

    """
    centroids: np.ndarray
    inertia: float = 0.0
    inertia_history: 'list[float]' = field(default_factory=list)
    n_iter: int = 0

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ValueError('centroids must be a non-empty K x dim matrix')
        if not np.isfinite(self.centroids).all():
            raise ValueError('centroids must be finite')
        if self.inertia < 0:
            raise ValueError('inertia must be non-negative')

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _check_data(data) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f'Expected an n x dim matrix (got shape {data.shape})')
    if np.isnan(data).any():
        raise ValueError('Data contains NaN')
    if not np.isfinite(data).all():
        raise ValueError('Data contains infinite values')
    return data


def _sq_dists(x: np.ndarray, c: np.ndarray, c_norms: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ c.T) + c_norms[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _assign(data: np.ndarray,
            centroids: np.ndarray,
            threads: int = 1,
            ) -> 'tuple[np.ndarray, np.ndarray]':
    """Nearest centroid and squared distance of every row."""
    c_norms = (centroids * centroids).sum(axis=1)

    def chunk(start: int):
        d = _sq_dists(data[start:start + ASSIGN_CHUNK], centroids, c_norms)
        labels = d.argmin(axis=1)
        return labels, d[np.arange(len(labels)), labels]

    starts = range(0, len(data), ASSIGN_CHUNK)
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(chunk, starts))
    else:
        parts = [chunk(s) for s in starts]
    return (np.concatenate([p[0] for p in parts]),
            np.concatenate([p[1] for p in parts]))


def _kmeans_plusplus(data: np.ndarray,
                     K: int,
                     rng: np.random.Generator,
                     ) -> np.ndarray:
    n = len(data)
    chosen = [int(rng.integers(0, n))]
    closest = ((data - data[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            # all points coincide with a centroid
            unchosen = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(unchosen))
        chosen.append(nxt)
        np.minimum(closest, ((data - data[nxt]) ** 2).sum(axis=1), out=closest)
    return data[chosen].copy()


def _update(data: np.ndarray,
            labels: np.ndarray,
            dists: np.ndarray,
            K: int,
            ) -> np.ndarray:
    """Recomputes centroids as cluster means, reseeding empty clusters."""
    n = len(data)
    membership = sparse.csr_matrix((np.ones(n), (labels, np.arange(n))),
                                   shape=(K, n))
    counts = np.bincount(labels, minlength=K)
    centroids = np.asarray(membership @ data)
    nonempty = counts > 0
    centroids[nonempty] /= counts[nonempty, None]
    empty = np.flatnonzero(~nonempty)
    if len(empty):
        dists = dists.copy()
        for j in empty:
            far = int(dists.argmax())
            centroids[j] = data[far]
            dists[far] = 0.0
        _log.debug(f'Reseeded {len(empty)} empty clusters')
    return centroids


def _lloyd(data: np.ndarray,
           centroids: np.ndarray,
           max_iters: int,
           tol: float,
           threads: int,
           ) -> KMeansModel:
    K = len(centroids)
    history = []
    prev_labels = None
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        labels, dists = _assign(data, centroids, threads)
        inertia = float(dists.sum())
        if history and inertia > history[-1] * (1 + 1e-9) + 1e-12:
            _log.warning(f'Inertia increased at iteration {n_iter}:'
                         f' {history[-1]} -> {inertia}')
        history.append(inertia)
        _log.debug(f'Iteration {n_iter} inertia {inertia:.6g}')
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        centroids = _update(data, labels, dists, K)
        prev_labels = labels
        if len(history) > 1:
            improvement = history[-2] - inertia
            if history[-2] == 0 or improvement <= tol * history[-2]:
                break
    labels, _ = _assign(data, centroids, threads)
    inertia = float(((data - centroids[labels]) ** 2).sum())
    return KMeansModel(centroids, inertia, history, n_iter)


def train_kmeans(data,
                 K: int,
                 max_iters: int = DEFAULT_ITERS,
                 seed: int = 0,
                 n_init: 'int|None' = None,
                 tol: float = DEFAULT_TOL,
                 init: 'np.ndarray|None' = None,
                 threads: int = 1,
                 ) -> KMeansModel:
    """Trains k-means with k-means++ seeding and Lloyd iterations.

    Args:
        data: The n x dim training matrix, n >= K.
        K: The number of clusters.
        max_iters: Maximum Lloyd iterations per restart.
        seed: Root seed of the restarts.
        n_init: Restarts; by default 8 for small problems and 1 at scale.
            The restart with the lowest final inertia is kept.
        tol: Stop when the relative inertia improvement falls below this.
        init: Optional K x dim starting centroids (disables restarts).
        threads: Worker threads for the assignment step.

    Returns:
        The KMeansModel.

    Raises:
        ValueError if n < K, K < 1 or the data is not finite.

    """
    data = _check_data(data)
    n = len(data)
    if K < 1:
        raise ValueError(f'K must be >= 1 (got {K})')
    if n < K:
        raise ValueError(f'Need at least K={K} points (got {n})')
    if max_iters < 1:
        raise ValueError('max_iters must be >= 1')
    if init is not None:
        init = np.array(init, dtype=np.float64)
        if init.shape != (K, data.shape[1]):
            raise ValueError(f'init must be {K} x {data.shape[1]}')
        return _lloyd(data, init, max_iters, tol, threads)
    if n_init is None:
        n_init = SMALL_RESTARTS if n * K <= SMALL_PROBLEM else 1
    best = None
    for restart, restart_seed in enumerate(spawn_seeds(seed, n_init)):
        rng = make_rng(restart_seed)
        model = _lloyd(data, _kmeans_plusplus(data, K, rng), max_iters, tol,
                       threads)
        _log.debug(f'Restart {restart} inertia {model.inertia:.6g}'
                   f' after {model.n_iter} iterations')
        if best is None or model.inertia < best.inertia:
            best = model
    _log.info(f'k-means K={K} on {n}x{data.shape[1]}: inertia'
              f' {best.inertia:.6g} (best of {n_init})')
    return best


def assign_exhaustive(model: KMeansModel,
                      queries,
                      chunk: int = ASSIGN_CHUNK,
                      ) -> np.ndarray:
    """Exact nearest-centroid assignment of every query.

    Distances are computed pairwise in float64; ties go to the lowest
    centroid id.

    Raises:
        ValueError on a dimension mismatch.

    """
    queries = np.asarray(queries)
    if queries.ndim != 2 or queries.shape[1] != model.dim:
        raise ValueError(f'Queries of shape {queries.shape} do not match'
                         f' centroid dim {model.dim}')
    labels = np.empty(len(queries), dtype=np.int64)
    for start in range(0, len(queries), chunk):
        block = queries[start:start + chunk].astype(np.float64)
        d = cdist(block, model.centroids, 'sqeuclidean')
        labels[start:start + len(block)] = d.argmin(axis=1)
    return labels
