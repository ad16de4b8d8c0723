"""4-bit product quantization.

A D-dim vector is split into M_sub contiguous subvectors, each replaced by
the id of its nearest entry in a 16-entry sub-codebook. Codes pack two per
byte (low nibble first) so a vector costs M_sub/2 bytes.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from mhubert.quantizer.kmeans import DEFAULT_ITERS, train_kmeans
from mhubert.rng import derive_seed

PQ_BITS = 4

_log = logging.getLogger(__name__)


@dataclass
class PqCodebook:
    """Sub-codebooks of a product quantizer.

    Attributes:
        codebooks (np.ndarray): M_sub x 16 x (D/M_sub) float64 tensor.
        bits (int): Bits per code (4).
        inertias (list): Training inertia of each subspace.

    """
    codebooks: np.ndarray
    bits: int = PQ_BITS
    inertias: 'list[float]' = field(default_factory=list)

    def __post_init__(self):
        self.codebooks = np.ascontiguousarray(self.codebooks, dtype=np.float64)
        if self.bits != PQ_BITS:
            raise ValueError(f'Only {PQ_BITS}-bit codes are supported')
        if self.codebooks.ndim != 3 or self.codebooks.shape[1] != 2**self.bits:
            raise ValueError(f'codebooks must be M_sub x {2**self.bits} x dsub'
                             f' (got {self.codebooks.shape})')

    @property
    def M_sub(self) -> int:
        return self.codebooks.shape[0]

    @property
    def ksub(self) -> int:
        return self.codebooks.shape[1]

    @property
    def dsub(self) -> int:
        return self.codebooks.shape[2]

    @property
    def dim(self) -> int:
        return self.M_sub * self.dsub

    @property
    def code_size(self) -> int:
        """Bytes per encoded vector."""
        return (self.M_sub * self.bits + 7) // 8


def subspace_seed(seed: int, m: int) -> int:
    """The k-means seed used for subspace `m`."""
    return derive_seed(seed, 'pq', str(m))


def train_pq(data,
             M_sub: int,
             seed: int = 0,
             max_iters: int = DEFAULT_ITERS,
             init: 'PqCodebook|None' = None,
             threads: int = 1,
             ) -> PqCodebook:
    """Trains an independent 16-centroid k-means in each subspace.

    Args:
        data: n x D matrix with n >= 16 and D divisible by M_sub.
        M_sub: Number of subquantizers.
        seed: Root seed; subspace m uses `subspace_seed(seed, m)`.
        max_iters: Lloyd iterations per subspace.
        init: Optional codebook to warm-start from.
        threads: Worker threads for k-means assignment.

    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError('Expected an n x D matrix')
    n, D = data.shape
    if M_sub < 1 or D % M_sub:
        raise ValueError(f'D={D} is not divisible by M_sub={M_sub}')
    ksub = 2**PQ_BITS
    if n < ksub:
        raise ValueError(f'Need at least {ksub} training vectors (got {n})')
    if init is not None and init.codebooks.shape != (M_sub, ksub, D // M_sub):
        raise ValueError('init codebook does not match the data layout')
    dsub = D // M_sub
    codebooks = np.empty((M_sub, ksub, dsub))
    inertias = []
    for m in range(M_sub):
        model = train_kmeans(data[:, m * dsub:(m + 1) * dsub], ksub,
                             max_iters=max_iters, seed=subspace_seed(seed, m),
                             init=None if init is None else init.codebooks[m],
                             threads=threads)
        codebooks[m] = model.centroids
        inertias.append(model.inertia)
    _log.debug(f'PQ {M_sub}x{PQ_BITS} trained on {n}x{D}: inertia'
               f' {sum(inertias):.6g}')
    return PqCodebook(codebooks, PQ_BITS, inertias)


def pq_encode(cb: PqCodebook, v) -> np.ndarray:
    """Encodes one vector (or rows of a matrix) as uint8 sub-centroid ids."""
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    x = v[None, :] if single else v
    if x.ndim != 2 or x.shape[1] != cb.dim:
        raise ValueError(f'Vector dim {x.shape[-1]} does not match codebook'
                         f' dim {cb.dim}')
    codes = np.empty((len(x), cb.M_sub), dtype=np.uint8)
    for m in range(cb.M_sub):
        sub = x[:, m * cb.dsub:(m + 1) * cb.dsub]
        codes[:, m] = cdist(sub, cb.codebooks[m], 'sqeuclidean').argmin(axis=1)
    return codes[0] if single else codes


def pq_decode(cb: PqCodebook, codes) -> np.ndarray:
    """Concatenates the sub-centroids named by the codes."""
    codes = np.asarray(codes)
    single = codes.ndim == 1
    c = codes[None, :] if single else codes
    if c.ndim != 2 or c.shape[1] != cb.M_sub:
        raise ValueError(f'Expected {cb.M_sub} codes per vector')
    if c.size and (c.min() < 0 or c.max() >= cb.ksub):
        raise ValueError(f'Code values must be in [0, {cb.ksub})')
    c = c.astype(np.intp)
    out = np.concatenate([cb.codebooks[m][c[:, m]] for m in range(cb.M_sub)],
                         axis=1)
    return out[0] if single else out


def pq_pack(codes) -> bytes:
    """Packs codes two per byte, low nibble first (rows padded to bytes)."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.uint8))
    if codes.size and codes.max() >= 16:
        raise ValueError('Code values must be < 16')
    if codes.shape[1] % 2:
        codes = np.pad(codes, ((0, 0), (0, 1)))
    packed = codes[:, 0::2] | (codes[:, 1::2] << 4)
    return packed.astype(np.uint8).tobytes()


def pq_unpack(data: bytes, M_sub: int) -> np.ndarray:
    """Inverse of `pq_pack` returning an n x M_sub uint8 matrix."""
    row_bytes = (M_sub + 1) // 2
    if len(data) % row_bytes:
        raise ValueError(f'{len(data)} bytes is not a multiple of the'
                         f' {row_bytes}-byte code size')
    packed = np.frombuffer(data, dtype=np.uint8).reshape(-1, row_bytes)
    codes = np.empty((len(packed), row_bytes * 2), dtype=np.uint8)
    codes[:, 0::2] = packed & 0x0F
    codes[:, 1::2] = packed >> 4
    return codes[:, :M_sub]


def pq_reconstruction_error(cb: PqCodebook, data) -> float:
    """Mean squared reconstruction error per vector."""
    data = np.asarray(data, dtype=np.float64)
    if not len(data):
        return 0.0
    recon = pq_decode(cb, pq_encode(cb, data))
    return float(((data - recon) ** 2).sum(axis=1).mean())
