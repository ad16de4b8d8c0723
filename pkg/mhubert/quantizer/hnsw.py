"""Hierarchical navigable small world graph over the coarse centroids.

Construction follows the usual HNSW insertion: each node draws a level from
an exponential distribution with multiplier 1/ln(max_links), descends the
upper layers greedily and links to the neighbors chosen by the selection
heuristic on every layer up to its own. Links are capped at `max_links` on
upper layers and `2 * max_links` on layer 0.

Search runs over blocks of queries at once: a greedy descent of the upper
layers followed by a beam search of width `ef` on layer 0.
"""
import heapq
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from mhubert.rng import make_rng

DEFAULT_MAX_LINKS = 32
DEFAULT_EF_CONSTRUCTION = 200
DEFAULT_EF_SEARCH = 64
SEARCH_CHUNK = 4096
VISITED_BUDGET = 2**25   # bytes of visited flags per search block
PROGRESS = os.getenv('MHUB_PROGRESS', '1') != '0'

_log = logging.getLogger(__name__)


@dataclass
class HnswGraph:
    """Layered adjacency of an HNSW graph.

    Attributes:
        layers (list): One `K x cap` int32 array per level, rows padded with
            -1; nodes absent from a level have an all -1 row.
        levels (np.ndarray): Top level of each node.
        entry_point (int): The node search starts from.
        max_links (int): Links per node on levels >= 1.
        ef_construction (int): Beam width used when building.

    """
    layers: 'list[np.ndarray]'
    levels: np.ndarray
    entry_point: int
    max_links: int = DEFAULT_MAX_LINKS
    ef_construction: int = DEFAULT_EF_CONSTRUCTION

    @property
    def num_nodes(self) -> int:
        return len(self.levels)

    @property
    def max_level(self) -> int:
        return len(self.layers) - 1

    def link_cap(self, level: int) -> int:
        return 2 * self.max_links if level == 0 else self.max_links

    def neighbors(self, node: int, level: int = 0) -> np.ndarray:
        row = self.layers[level][node]
        return row[row >= 0]


class _Builder:
    """Incremental insertion with dict-of-dict layers."""

    def __init__(self, points: np.ndarray, max_links: int, ef: int) -> None:
        self.points = points
        self.norms = (points * points).sum(axis=1)
        self.max_links = max_links
        self.ef = ef
        self.layers: 'list[dict[int, dict[int, float]]]' = []
        self.entry: 'int|None' = None

    def cap(self, level: int) -> int:
        return 2 * self.max_links if level == 0 else self.max_links

    def _row(self, q: int) -> 'list[float]':
        d = self.norms + self.norms[q] - 2.0 * (self.points @ self.points[q])
        return np.maximum(d, 0.0).tolist()

    def _pairwise(self, ids: 'list[int]') -> 'list[list[float]]':
        x = self.points[ids]
        n = self.norms[ids]
        d = n[:, None] + n[None, :] - 2.0 * (x @ x.T)
        return np.maximum(d, 0.0).tolist()

    @staticmethod
    def _search_ef1(dist: 'list[float]', entry: int, entry_dist: float,
                    layer: dict) -> 'tuple[int, float]':
        candidates = [(entry_dist, entry)]
        visited = {entry}
        best, best_dist = entry, entry_dist
        while candidates:
            d, curr = heapq.heappop(candidates)
            if d > best_dist:
                break
            for p in layer[curr]:
                if p in visited:
                    continue
                visited.add(p)
                if dist[p] < best_dist:
                    best, best_dist = p, dist[p]
                    heapq.heappush(candidates, (dist[p], p))
        return best, best_dist

    def _search_layer(self, dist: 'list[float]',
                      entries: 'list[tuple[float, int]]',
                      layer: dict) -> 'list[tuple[float, int]]':
        """Beam search; `entries` and the result are (-dist, id) max-heaps."""
        candidates = [(-md, p) for md, p in entries]
        heapq.heapify(candidates)
        visited = {p for _, p in entries}
        while candidates:
            d, curr = heapq.heappop(candidates)
            if d > -entries[0][0]:
                break
            for p in layer[curr]:
                if p in visited:
                    continue
                visited.add(p)
                dp = dist[p]
                if len(entries) < self.ef:
                    heapq.heappush(candidates, (dp, p))
                    heapq.heappush(entries, (-dp, p))
                elif dp < -entries[0][0]:
                    heapq.heappush(candidates, (dp, p))
                    heapq.heapreplace(entries, (-dp, p))
        return entries

    def _prune(self, candidates: 'list[tuple[float, int]]',
               max_size: int) -> 'list[tuple[float, int]]':
        """Keeps a candidate only if it is closer to the base than to any
        already kept neighbor."""
        candidates = sorted(candidates)
        if len(candidates) <= max_size:
            return candidates
        pair = self._pairwise([p for _, p in candidates])
        kept = []
        for i, (d, _) in enumerate(candidates):
            if len(kept) >= max_size:
                break
            row = pair[i]
            if all(row[j] >= d for j in kept):
                kept.append(i)
        return [candidates[i] for i in kept]

    def insert(self, q: int, level: int) -> None:
        if self.entry is None:
            self.layers = [{q: {}} for _ in range(level + 1)]
            self.entry = q
            return
        top = len(self.layers) - 1
        dist = self._row(q)
        curr, curr_dist = self.entry, dist[self.entry]
        for lvl in range(top, level, -1):
            curr, curr_dist = self._search_ef1(dist, curr, curr_dist,
                                               self.layers[lvl])
        entries = [(-curr_dist, curr)]
        for lvl in range(min(level, top), -1, -1):
            layer = self.layers[lvl]
            entries = self._search_layer(dist, entries, layer)
            chosen = self._prune([(-md, p) for md, p in entries],
                                 self.max_links)
            layer[q] = {p: d for d, p in chosen}
            cap = self.cap(lvl)
            for p, d in layer[q].items():
                links = layer[p]
                links[q] = d
                if len(links) > cap:
                    pruned = self._prune([(dp, x) for x, dp in links.items()],
                                         cap)
                    layer[p] = {x: dp for dp, x in pruned}
        for _ in range(top + 1, level + 1):
            self.layers.append({q: {}})
        if level > top:
            self.entry = q


def build_hnsw(points,
               max_links: int = DEFAULT_MAX_LINKS,
               ef_construction: int = DEFAULT_EF_CONSTRUCTION,
               seed: int = 0,
               ) -> HnswGraph:
    """Builds an HNSW graph over the rows of `points`, inserted in id order.

    Args:
        points: K x dim matrix, K >= 1.
        max_links: Links per node on upper levels (doubled on level 0).
        ef_construction: Beam width while inserting.
        seed: Seed of the level draws.

    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) < 1:
        raise ValueError('build_hnsw needs at least one point')
    if max_links < 2:
        raise ValueError('max_links must be >= 2')
    K = len(points)
    level_mult = 1 / math.log(max_links)
    u = make_rng(seed).random(K)
    levels = np.floor(-np.log1p(-u) * level_mult).astype(np.int32)
    builder = _Builder(points, max_links, max(ef_construction, 1))
    for q in tqdm(range(K), desc='hnsw', disable=None if PROGRESS else True,
                  leave=False):
        builder.insert(q, int(levels[q]))
    layers = []
    for lvl, layer in enumerate(builder.layers):
        cap = builder.cap(lvl)
        adj = np.full((K, cap), -1, dtype=np.int32)
        for node, links in layer.items():
            ordered = sorted(links, key=lambda p: (links[p], p))
            adj[node, :len(ordered)] = ordered
        layers.append(adj)
    degree = (layers[0] >= 0).sum(axis=1)
    _log.info(f'HNSW over {K} points: {len(layers)} levels, entry'
              f' {builder.entry}, mean level-0 degree {degree.mean():.1f}')
    return HnswGraph(layers, levels, int(builder.entry), max_links,
                     ef_construction)


def _sq_dist_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a - b
    return np.einsum('ij,ij->i', diff, diff)


def _greedy_descent(g: HnswGraph,
                    points: np.ndarray,
                    queries: np.ndarray,
                    ) -> 'tuple[np.ndarray, np.ndarray]':
    b = len(queries)
    curr = np.full(b, g.entry_point, dtype=np.int64)
    curr_d = _sq_dist_rows(points[curr], queries)
    for level in range(g.max_level, 0, -1):
        adj = g.layers[level]
        active = np.arange(b)
        while len(active):
            nbrs = adj[curr[active]].astype(np.int64)
            valid = nbrs >= 0
            safe = np.where(valid, nbrs, 0)
            diff = points[safe] - queries[active][:, None, :]
            d = np.einsum('ijk,ijk->ij', diff, diff)
            d[~valid] = np.inf
            j = d.argmin(axis=1)
            best_d = d[np.arange(len(active)), j]
            better = best_d < curr_d[active]
            moved = active[better]
            curr[moved] = nbrs[better, j[better]]
            curr_d[moved] = best_d[better]
            active = moved
    return curr, curr_d


def _beam_search(g: HnswGraph,
                 points: np.ndarray,
                 queries: np.ndarray,
                 start: np.ndarray,
                 start_d: np.ndarray,
                 ef: int,
                 ) -> np.ndarray:
    adj = g.layers[0]
    cap = adj.shape[1]
    b = len(queries)
    rows = np.arange(b)
    pool_ids = np.full((b, ef), -1, dtype=np.int64)
    pool_d = np.full((b, ef), np.inf, dtype=np.float32)
    expanded = np.zeros((b, ef), dtype=bool)
    pool_ids[:, 0] = start
    pool_d[:, 0] = start_d
    visited = np.zeros((b, g.num_nodes), dtype=bool)
    visited[rows, start] = True
    while True:
        open_d = np.where(expanded | (pool_ids < 0), np.inf, pool_d)
        j = open_d.argmin(axis=1)
        active = np.flatnonzero(np.isfinite(open_d[rows, j]))
        if not len(active):
            break
        ja = j[active]
        expanded[active, ja] = True
        nbrs = adj[pool_ids[active, ja]].astype(np.int64)
        valid = nbrs >= 0
        safe = np.where(valid, nbrs, 0)
        valid &= ~visited[active[:, None], safe]
        r, c = np.nonzero(valid)
        new_d = np.full((len(active), cap), np.inf, dtype=np.float32)
        if len(r):
            fresh = nbrs[r, c]
            visited[active[r], fresh] = True
            new_d[r, c] = _sq_dist_rows(points[fresh], queries[active[r]])
        new_ids = np.where(valid, nbrs, -1)
        cand_ids = np.concatenate([pool_ids[active], new_ids], axis=1)
        cand_d = np.concatenate([pool_d[active], new_d], axis=1)
        cand_exp = np.concatenate([expanded[active],
                                   np.zeros((len(active), cap), dtype=bool)],
                                  axis=1)
        order = np.argsort(cand_d, axis=1, kind='stable')[:, :ef]
        pool_ids[active] = np.take_along_axis(cand_ids, order, axis=1)
        pool_d[active] = np.take_along_axis(cand_d, order, axis=1)
        expanded[active] = np.take_along_axis(cand_exp, order, axis=1)
    nearest = pool_d.min(axis=1)
    ties = (pool_d == nearest[:, None]) & (pool_ids >= 0)
    return np.where(ties, pool_ids, np.iinfo(np.int64).max).min(axis=1)


def hnsw_search_batch(g: HnswGraph,
                      points,
                      queries,
                      ef_search: int = DEFAULT_EF_SEARCH,
                      chunk: 'int|None' = None,
                      ) -> np.ndarray:
    """Approximate nearest point id of every query row.

    Every query is searched independently, so results do not depend on the
    batch it arrives in. Among equally close points the lowest id wins.

    Raises:
        ValueError if the graph is empty or the shapes disagree.

    """
    if g.num_nodes == 0:
        raise ValueError('Cannot search an empty graph')
    points = np.ascontiguousarray(points, dtype=np.float32)
    queries = np.ascontiguousarray(queries, dtype=np.float32)
    if queries.ndim == 1:
        queries = queries[None, :]
    if len(points) != g.num_nodes:
        raise ValueError(f'Graph has {g.num_nodes} nodes but {len(points)}'
                         f' points were given')
    if queries.shape[1] != points.shape[1]:
        raise ValueError(f'Query dim {queries.shape[1]} does not match point'
                         f' dim {points.shape[1]}')
    ef = max(int(ef_search), 1)
    rows = chunk or max(1, min(SEARCH_CHUNK, VISITED_BUDGET // g.num_nodes))
    result = np.empty(len(queries), dtype=np.int64)
    for start in range(0, len(queries), rows):
        block = queries[start:start + rows]
        curr, curr_d = _greedy_descent(g, points, block)
        result[start:start + len(block)] = _beam_search(g, points, block, curr,
                                                        curr_d, ef)
    return result


def hnsw_search(g: HnswGraph, points, query, ef_search: int = DEFAULT_EF_SEARCH) -> int:
    """Approximate nearest point id of a single query vector."""
    return int(hnsw_search_batch(g, points, np.asarray(query)[None, :],
                                 ef_search)[0])


def recall_at_1(approx, exact) -> float:
    """Fraction of queries whose approximate id equals the exact one."""
    approx = np.asarray(approx)
    exact = np.asarray(exact)
    if approx.shape != exact.shape:
        raise ValueError('approx and exact must have the same shape')
    if not approx.size:
        raise ValueError('recall_at_1 of an empty result')
    return float((approx == exact).mean())
