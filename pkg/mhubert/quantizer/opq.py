"""Optimized product quantization: a learned orthonormal projection.

The rotation R is D_out x D_in with orthonormal rows, so a vector x maps to
`R @ x`. Training starts from the top D_out principal directions and then
alternates between training PQ on the projected data and solving the
orthogonal Procrustes problem for R against the PQ reconstruction.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from mhubert.quantizer.pq import (
    PqCodebook,
    pq_decode,
    pq_encode,
    train_pq,
)
from mhubert.rng import derive_seed, make_rng

DEFAULT_OPQ_ITERS = 10
ORTHONORMAL_TOL = 1e-5
RANK_TOL = 1e-10

_log = logging.getLogger(__name__)


@dataclass
class OpqRotation:
    """A D_out x D_in projection with orthonormal rows.

    Attributes:
        rotation (np.ndarray): The float64 matrix R.
        errors (list): PQ reconstruction error after each training iteration,
            the PCA initialization first.

    """
    rotation: np.ndarray
    errors: 'list[float]' = field(default_factory=list)

    def __post_init__(self):
        self.rotation = np.ascontiguousarray(self.rotation, dtype=np.float64)
        if self.rotation.ndim != 2 or self.d_out > self.d_in:
            raise ValueError(f'Rotation must be D_out x D_in with'
                             f' D_out <= D_in (got {self.rotation.shape})')
        self._identity = (self.d_out == self.d_in and
                          np.array_equal(self.rotation, np.eye(self.d_in)))

    @classmethod
    def identity(cls, dim: int) -> 'OpqRotation':
        return cls(np.eye(dim))

    @property
    def d_in(self) -> int:
        return self.rotation.shape[1]

    @property
    def d_out(self) -> int:
        return self.rotation.shape[0]

    @property
    def is_identity(self) -> bool:
        return self._identity

    def orthonormality_error(self) -> float:
        """max |R R^T - I|."""
        gram = self.rotation @ self.rotation.T
        return float(np.abs(gram - np.eye(self.d_out)).max())

    def apply(self, x, dtype=np.float64) -> np.ndarray:
        """Projects the rows of `x` into the D_out space."""
        x = np.asarray(x)
        if x.shape[-1] != self.d_in:
            raise ValueError(f'Input dim {x.shape[-1]} does not match rotation'
                             f' input dim {self.d_in}')
        if self._identity:
            return np.array(x, dtype=dtype)
        return (x.astype(dtype, copy=False) @ self.rotation.T.astype(dtype))


def _pca_rotation(data: np.ndarray, d_out: int) -> 'tuple[np.ndarray, bool]':
    """Top principal directions as rows, and whether they span real variance."""
    centered = data - data.mean(axis=0)
    cov = centered.T @ centered / max(len(data) - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(-eigvals, kind='stable')[:d_out]
    top = eigvals[order]
    full_rank = bool(top[-1] > RANK_TOL * max(top[0], RANK_TOL))
    return eigvecs[:, order].T.copy(), full_rank


def _procrustes(target: np.ndarray, data: np.ndarray) -> np.ndarray:
    """R with orthonormal rows minimizing |target - data R^T|."""
    u, _, vt = np.linalg.svd(target.T @ data, full_matrices=False)
    return u @ vt


def train_opq(data,
              M_sub: int,
              D_out: int,
              iters: int = DEFAULT_OPQ_ITERS,
              seed: int = 0,
              max_train: 'int|None' = None,
              threads: int = 1,
              ) -> OpqRotation:
    """Learns an OPQ projection.

    Args:
        data: n x D_in training matrix.
        M_sub: PQ subquantizers in the projected space.
        D_out: Output dimension, divisible by M_sub and <= D_in.
        iters: Alternating optimization rounds.
        seed: Root seed.
        max_train: Optional cap on training vectors (seeded subsample).
        threads: Worker threads for the inner k-means.

    Returns:
        The rotation with the lowest PQ reconstruction error seen, never worse
        than the PCA initialization. Rank-deficient data returns the PCA
        rotation with a warning.

    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError('Expected an n x D_in matrix')
    n, d_in = data.shape
    if D_out > d_in:
        raise ValueError(f'D_out={D_out} exceeds D_in={d_in}')
    if M_sub < 1 or D_out % M_sub:
        raise ValueError(f'D_out={D_out} is not divisible by M_sub={M_sub}')
    if not np.isfinite(data).all():
        raise ValueError('Data contains NaN or infinite values')
    if max_train is not None and n > max_train:
        rng = make_rng(derive_seed(seed, 'opq', 'sample'))
        data = data[np.sort(rng.choice(n, size=max_train, replace=False))]
        _log.debug(f'OPQ training on {max_train} of {n} vectors')
    rotation, full_rank = _pca_rotation(data, D_out)
    if not full_rank:
        _log.warning(f'Training data has rank below {D_out};'
                     f' using the PCA rotation')
        return OpqRotation(rotation)
    best, best_error = rotation, np.inf
    errors = []
    codebook: 'PqCodebook|None' = None
    for it in range(iters + 1):
        projected = data @ rotation.T
        codebook = train_pq(projected, M_sub,
                            seed=derive_seed(seed, 'opq', str(it)),
                            init=codebook, threads=threads)
        recon = pq_decode(codebook, pq_encode(codebook, projected))
        error = float(((projected - recon) ** 2).sum(axis=1).mean())
        errors.append(error)
        _log.debug(f'OPQ iteration {it} error {error:.6g}')
        if error < best_error:
            best, best_error = rotation, error
        if it == iters:
            break
        rotation = _procrustes(recon, data)
        ortho = np.abs(rotation @ rotation.T - np.eye(D_out)).max()
        if ortho >= ORTHONORMAL_TOL:
            raise RuntimeError(f'Rotation lost orthonormality ({ortho:.3g})')
    _log.info(f'OPQ {d_in}->{D_out} M={M_sub}: error {errors[0]:.6g} ->'
              f' {best_error:.6g}')
    return OpqRotation(best, errors)
