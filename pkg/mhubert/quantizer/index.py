"""The trained labeling index and its binary file format.

An index is built from a factory string such as
`OPQ16_64,IVF1000_HNSW32,PQ16x4fsr`: an OPQ projection to 64 dims with 16
subspaces, 1000 coarse k-means centroids searched through an HNSW graph with
32 links per node, and 16 4-bit product quantizer codes per vector. The OPQ
part may be omitted, which leaves the input space unrotated.

File layout (all little-endian)::

    magic        4s   b'MHIX'
    version      u32
    config_len   u32, then config_len bytes of UTF-8 factory string
    kmeans_iters, opq_iters, train_cap_per_centroid
                 3 x u32
    d_in, d_out, K, pq_m, pq_bits, max_links, ef_construction, num_levels
                 8 x u32
    entry_point  i32
    inertia      f64
    rotation     d_out x d_in f64
    centroids    K x d_out f64
    levels       K i32
    per level:   cap u32, then K x cap i32 adjacency (-1 padded)
    codebooks    pq_m x 16 x (d_out/pq_m) f64
"""
import logging
import re
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from mhubert.quantizer.hnsw import (
    DEFAULT_EF_CONSTRUCTION,
    DEFAULT_EF_SEARCH,
    SEARCH_CHUNK,
    HnswGraph,
    build_hnsw,
    hnsw_search_batch,
)
from mhubert.quantizer.kmeans import DEFAULT_ITERS, KMeansModel, train_kmeans
from mhubert.quantizer.opq import DEFAULT_OPQ_ITERS, OpqRotation, train_opq
from mhubert.quantizer.pq import PqCodebook, train_pq
from mhubert.rng import derive_seed, make_rng

INDEX_MAGIC = b'MHIX'
INDEX_VERSION = 2
DEFAULT_INDEX_CONFIG = 'OPQ16_64,IVF1000_HNSW32,PQ16x4fsr'
TRAIN_CAP_PER_CENTROID = 256

_CONFIG_RE = re.compile(r'^(?:OPQ(\d+)_(\d+),)?IVF(\d+)_HNSW(\d+),'
                        r'PQ(\d+)x(\d+)(fs)?(r)?$')
_HEADER = struct.Struct('<8Iid')
_KNOBS = struct.Struct('<III')

_log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IndexConfig:
    """Parsed index factory string plus training knobs.

    Attributes:
        n_list (int): K, the number of coarse centroids.
        hnsw_links (int): Links per HNSW node.
        pq_m (int): PQ subquantizers.
        pq_bits (int): Bits per PQ code.
        opq_m (int): OPQ subspaces, `None` without OPQ.
        opq_dim (int): OPQ output dimension, `None` without OPQ.
        fast_scan (bool): `fs` suffix, recorded only.
        residual (bool): `r` suffix, recorded only.

    """
    n_list: int
    hnsw_links: int
    pq_m: int
    pq_bits: int = 4
    opq_m: 'int|None' = None
    opq_dim: 'int|None' = None
    fast_scan: bool = False
    residual: bool = False
    kmeans_iters: int = DEFAULT_ITERS
    opq_iters: int = DEFAULT_OPQ_ITERS
    ef_construction: int = DEFAULT_EF_CONSTRUCTION
    train_cap_per_centroid: int = TRAIN_CAP_PER_CENTROID

    def __post_init__(self):
        if self.n_list < 1:
            raise ValueError('IVF centroid count must be >= 1')
        if self.hnsw_links < 2:
            raise ValueError('HNSW links must be >= 2')
        if self.pq_bits != 4:
            raise ValueError(f'Only 4-bit PQ is supported (got {self.pq_bits})')
        if self.pq_m < 1:
            raise ValueError('PQ subquantizer count must be >= 1')
        if (self.opq_m is None) != (self.opq_dim is None):
            raise ValueError('OPQ needs both M and D')
        if self.opq_dim is not None and self.opq_dim % self.opq_m:
            raise ValueError(f'OPQ dim {self.opq_dim} is not divisible by'
                             f' {self.opq_m}')
        if self.opq_dim is not None and self.opq_dim % self.pq_m:
            raise ValueError(f'OPQ dim {self.opq_dim} is not divisible by PQ M'
                             f' {self.pq_m}')

    @property
    def uses_opq(self) -> bool:
        return self.opq_dim is not None

    def describe(self) -> str:
        """The canonical factory string."""
        parts = []
        if self.uses_opq:
            parts.append(f'OPQ{self.opq_m}_{self.opq_dim}')
        parts.append(f'IVF{self.n_list}_HNSW{self.hnsw_links}')
        suffix = ('fs' if self.fast_scan else '') + ('r' if self.residual else '')
        parts.append(f'PQ{self.pq_m}x{self.pq_bits}{suffix}')
        return ','.join(parts)


def parse_index_config(text: str, **knobs) -> IndexConfig:
    """Parses `[OPQ{M}_{D},]IVF{K}_HNSW{links},PQ{M}x{bits}[fs][r]`."""
    match = _CONFIG_RE.match(text.strip())
    if not match:
        raise ValueError(f'Invalid index config {text!r}')
    opq_m, opq_dim, n_list, links, pq_m, bits, fs, r = match.groups()
    return IndexConfig(n_list=int(n_list),
                       hnsw_links=int(links),
                       pq_m=int(pq_m),
                       pq_bits=int(bits),
                       opq_m=int(opq_m) if opq_m else None,
                       opq_dim=int(opq_dim) if opq_dim else None,
                       fast_scan=bool(fs),
                       residual=bool(r),
                       **knobs)


@dataclass
class Index:
    """A trained, immutable labeling index.

    Attributes:
        config (IndexConfig): The configuration it was trained with.
        opq (OpqRotation): Input projection.
        coarse (KMeansModel): Centroids in the projected space.
        graph (HnswGraph): Search graph whose nodes are the centroids.
        pq (PqCodebook): Product quantizer of projected vectors.

    """
    config: IndexConfig
    opq: OpqRotation
    coarse: KMeansModel
    graph: HnswGraph
    pq: PqCodebook

    def __post_init__(self):
        if self.graph.num_nodes != self.coarse.K:
            raise ValueError(f'Graph has {self.graph.num_nodes} nodes for'
                             f' {self.coarse.K} centroids')
        if self.coarse.dim != self.opq.d_out:
            raise ValueError('Centroid dim does not match the OPQ output dim')
        if self.pq.dim != self.opq.d_out:
            raise ValueError('PQ dim does not match the OPQ output dim')

    @property
    def d_in(self) -> int:
        return self.opq.d_in

    @property
    def d_out(self) -> int:
        return self.opq.d_out

    @property
    def K(self) -> int:
        return self.coarse.K


def component_seed(seed: int, component: str) -> int:
    """The seed `train_index` gives one of its components."""
    return derive_seed(seed, 'index', component)


def train_index(data,
                config: 'IndexConfig|str' = DEFAULT_INDEX_CONFIG,
                seed: int = 0,
                threads: int = 1,
                ) -> Index:
    """Trains OPQ, then k-means on the projected data, then HNSW over the
    centroids, then PQ on the projected vectors.

    Raises:
        ValueError if there are fewer vectors than centroids, or from any
        component.

    """
    if isinstance(config, str):
        config = parse_index_config(config)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError('Expected an n x D_in training matrix')
    n, d_in = data.shape
    if n < config.n_list:
        raise ValueError(f'Need at least K={config.n_list} vectors (got {n})')
    started = time.monotonic()
    cap = config.train_cap_per_centroid * config.n_list
    if config.uses_opq:
        opq = train_opq(data, config.opq_m, config.opq_dim,
                        iters=config.opq_iters,
                        seed=component_seed(seed, 'opq'),
                        max_train=cap, threads=threads)
    else:
        opq = OpqRotation.identity(d_in)
    if opq.d_out % config.pq_m:
        raise ValueError(f'PQ M={config.pq_m} does not divide dim {opq.d_out}')
    projected = opq.apply(data)
    coarse = train_kmeans(projected, config.n_list,
                          max_iters=config.kmeans_iters,
                          seed=component_seed(seed, 'kmeans'), threads=threads)
    graph = build_hnsw(coarse.centroids, config.hnsw_links,
                       config.ef_construction, seed=component_seed(seed, 'hnsw'))
    pq_data = projected
    if n > cap:
        rng = make_rng(component_seed(seed, 'pq-sample'))
        pq_data = projected[np.sort(rng.choice(n, size=cap, replace=False))]
    pq = train_pq(pq_data, config.pq_m, seed=component_seed(seed, 'pq'),
                  threads=threads)
    _log.info(f'Trained {config.describe()} on {n}x{d_in} in'
              f' {time.monotonic() - started:.1f}s')
    return Index(config, opq, coarse, graph, pq)


def index_assign(idx: Index,
                 frames,
                 ef_search: int = DEFAULT_EF_SEARCH,
                 threads: int = 1,
                 ) -> np.ndarray:
    """Labels every frame with its approximate nearest coarse centroid.

    Frames are projected by the OPQ rotation and searched through the HNSW
    graph. The label of a frame does not depend on the other frames.

    Raises:
        ValueError on a dimension mismatch.

    """
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != idx.d_in:
        raise ValueError(f'Frames of shape {frames.shape} do not match index'
                         f' input dim {idx.d_in}')
    if not len(frames):
        return np.empty(0, dtype=np.int64)
    centroids = idx.coarse.centroids.astype(np.float32)
    starts = range(0, len(frames), SEARCH_CHUNK)

    def search(start: int) -> np.ndarray:
        # project in float64 so a frame's label ignores its block neighbors
        block = idx.opq.apply(frames[start:start + SEARCH_CHUNK])
        return hnsw_search_batch(idx.graph, centroids,
                                 block.astype(np.float32), ef_search)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(search, starts))
    else:
        parts = [search(s) for s in starts]
    return np.concatenate(parts)


def _array_bytes(a: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(a, dtype=dtype).tobytes()


def write_index(idx: Index) -> bytes:
    """Serializes an index to the MHIX format."""
    config = idx.config.describe().encode('utf-8')
    g = idx.graph
    parts = [INDEX_MAGIC, struct.pack('<II', INDEX_VERSION, len(config)),
             config,
             _KNOBS.pack(idx.config.kmeans_iters, idx.config.opq_iters,
                         idx.config.train_cap_per_centroid),
             _HEADER.pack(idx.d_in, idx.d_out, idx.K, idx.pq.M_sub,
                          idx.pq.bits, g.max_links, g.ef_construction,
                          len(g.layers), g.entry_point, idx.coarse.inertia),
             _array_bytes(idx.opq.rotation, '<f8'),
             _array_bytes(idx.coarse.centroids, '<f8'),
             _array_bytes(g.levels, '<i4')]
    for adj in g.layers:
        parts.append(struct.pack('<I', adj.shape[1]))
        parts.append(_array_bytes(adj, '<i4'))
    parts.append(_array_bytes(idx.pq.codebooks, '<f8'))
    return b''.join(parts)


class _Reader:

    def __init__(self, data: bytes) -> None:
        self.data = memoryview(data)
        self.offset = 0

    def take(self, size: int) -> memoryview:
        if self.offset + size > len(self.data):
            raise ValueError(f'Index file truncated at byte {self.offset}'
                             f' (need {size} more)')
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: 'str|struct.Struct') -> tuple:
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype: str, shape: tuple) -> np.ndarray:
        dt = np.dtype(dtype)
        count = int(np.prod(shape))
        raw = self.take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder('='))


def read_index(data: bytes) -> Index:
    """Parses an MHIX document.

    Raises:
        ValueError on a bad magic, unsupported version, truncation or
        trailing bytes.

    """
    reader = _Reader(data)
    if bytes(reader.take(4)) != INDEX_MAGIC:
        raise ValueError('Not an MHIX index file (bad magic)')
    version, config_len = reader.unpack('<II')
    if version != INDEX_VERSION:
        raise ValueError(f'Unsupported index version {version}')
    factory = bytes(reader.take(config_len)).decode('utf-8')
    kmeans_iters, opq_iters, train_cap = reader.unpack(_KNOBS)
    (d_in, d_out, K, pq_m, pq_bits, max_links, ef_construction, num_levels,
     entry_point, inertia) = reader.unpack(_HEADER)
    config = parse_index_config(factory, kmeans_iters=kmeans_iters,
                                opq_iters=opq_iters,
                                ef_construction=ef_construction,
                                train_cap_per_centroid=train_cap)
    rotation = reader.array('<f8', (d_out, d_in))
    centroids = reader.array('<f8', (K, d_out))
    levels = reader.array('<i4', (K,))
    layers = []
    for _ in range(num_levels):
        (cap,) = reader.unpack('<I')
        layers.append(reader.array('<i4', (K, cap)))
    codebooks = reader.array('<f8', (pq_m, 2**pq_bits, d_out // max(pq_m, 1)))
    if reader.offset != len(reader.data):
        raise ValueError(f'{len(reader.data) - reader.offset} trailing bytes'
                         f' in index file')
    graph = HnswGraph(layers, levels, entry_point, max_links, ef_construction)
    return Index(config, OpqRotation(rotation), KMeansModel(centroids, inertia),
                 graph, PqCodebook(codebooks, pq_bits))


def save_index(path: str, idx: Index) -> None:
    with open(path, 'wb') as f:
        f.write(write_index(idx))


def load_index(path: str) -> Index:
    with open(path, 'rb') as f:
        return read_index(f.read())
