"""Masked-prediction pretext loss and span masking.

The loss is the negative log-likelihood of the frame labels under a softmax
over the logits, averaged separately over masked and unmasked frames and
combined as `psi * L_m + (1 - psi) * L_u`. Frame indices are zero-based.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import log_softmax

from mhubert.rng import make_rng

DEFAULT_MASK_PROB = 0.08
DEFAULT_SPAN_LEN = 10
DEFAULT_PSI = 1.0

_log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskSpec:
    """Masked frame indices of a T-frame sequence."""
    T: int
    indices: np.ndarray
    span_len: int = DEFAULT_SPAN_LEN
    mask_prob: float = DEFAULT_MASK_PROB

    def __post_init__(self):
        indices = np.unique(np.asarray(self.indices, dtype=np.int64))
        if len(indices) and (indices[0] < 0 or indices[-1] >= self.T):
            raise ValueError(f'Mask indices must lie in [0, {self.T})')
        object.__setattr__(self, 'indices', indices)

    @property
    def mask(self) -> np.ndarray:
        """Boolean mask of length T."""
        m = np.zeros(self.T, dtype=bool)
        m[self.indices] = True
        return m

    @classmethod
    def from_mask(cls, mask, span_len: int = DEFAULT_SPAN_LEN,
                  mask_prob: float = DEFAULT_MASK_PROB) -> 'MaskSpec':
        mask = np.asarray(mask, dtype=bool)
        return cls(len(mask), np.flatnonzero(mask), span_len, mask_prob)


@dataclass(frozen=True)
class LossInputs:
    """Logits (T x C), labels (T) in [0, C), mask and weight psi in [0,1]."""
    logits: np.ndarray
    labels: np.ndarray
    mask: MaskSpec
    psi: float = DEFAULT_PSI

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if logits.ndim != 2:
            raise ValueError('logits must be a T x C matrix')
        T, C = logits.shape
        if labels.shape != (T,):
            raise ValueError(f'Expected {T} labels (got {labels.shape})')
        if len(labels) and (labels.min() < 0 or labels.max() >= C):
            raise ValueError(f'Labels must lie in [0, {C})')
        if self.mask.T != T:
            raise ValueError(f'Mask covers {self.mask.T} frames, logits {T}')
        if not 0 <= self.psi <= 1:
            raise ValueError(f'psi must be in [0,1] (got {self.psi})')
        if np.isnan(logits).any() or (logits == np.inf).any():
            raise ValueError('logits must not contain NaN or +inf')
        object.__setattr__(self, 'logits', logits)
        object.__setattr__(self, 'labels', labels)


class LossOutput(NamedTuple):
    loss: float
    masked: float
    unmasked: float
    grad: np.ndarray


def gen_mask_spans(T: int,
                   mask_prob: float = DEFAULT_MASK_PROB,
                   span_len: int = DEFAULT_SPAN_LEN,
                   seed: int = 0,
                   ) -> MaskSpec:
    """Starts a span at each frame with probability `mask_prob`.

    Spans cover `span_len` frames, are clipped at T and may overlap; the mask
    is their union.

    """
    if T < 1:
        raise ValueError(f'T must be >= 1 (got {T})')
    if not 0 <= mask_prob <= 1:
        raise ValueError(f'mask_prob must be in [0,1] (got {mask_prob})')
    if span_len < 1:
        raise ValueError(f'span_len must be >= 1 (got {span_len})')
    starts = make_rng(seed).random(T) < mask_prob
    covered = np.convolve(starts.astype(np.int64), np.ones(span_len,
                                                            dtype=np.int64))
    return MaskSpec(T, np.flatnonzero(covered[:T] > 0), span_len, mask_prob)


def mask_fraction(spec: MaskSpec) -> float:
    return len(spec.indices) / spec.T


def expected_mask_fraction(mask_prob: float, span_len: int) -> float:
    """Coverage of a union of independent spans away from the edges."""
    return 1.0 - (1.0 - mask_prob) ** span_len


def hubert_loss(inputs: LossInputs, reduction: str = 'mean') -> LossOutput:
    """Weighted masked/unmasked cross-entropy and its gradient.

    Args:
        inputs: The logits, labels, mask and psi.
        reduction: `mean` averages within the masked and unmasked sets,
            `sum` adds their per-frame losses.

    Returns:
        LossOutput(loss, masked, unmasked, grad) where grad is dL/dlogits.
        A term over an empty set is 0.

    Raises:
        ValueError for zero frames or an unknown reduction.

    """
    if reduction not in ('mean', 'sum'):
        raise ValueError(f'Unknown reduction {reduction}')
    logits, labels, psi = inputs.logits, inputs.labels, inputs.psi
    T = len(logits)
    if T == 0:
        raise ValueError('Cannot compute the loss of zero frames')
    logp = log_softmax(logits, axis=1)
    rows = np.arange(T)
    nll = -logp[rows, labels]
    masked = inputs.mask.mask
    n_masked = int(masked.sum())
    n_unmasked = T - n_masked
    weights = np.zeros(T)
    if reduction == 'mean':
        loss_m = float(nll[masked].mean()) if n_masked else 0.0
        loss_u = float(nll[~masked].mean()) if n_unmasked else 0.0
        if n_masked:
            weights[masked] = psi / n_masked
        if n_unmasked:
            weights[~masked] = (1 - psi) / n_unmasked
    else:
        loss_m = float(nll[masked].sum())
        loss_u = float(nll[~masked].sum())
        weights[masked] = psi
        weights[~masked] = 1 - psi
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad *= weights[:, None]
    loss = psi * loss_m + (1 - psi) * loss_u
    return LossOutput(loss, loss_m, loss_u, grad)


def batch_loss(batch: 'list[LossInputs]', reduction: str = 'mean') -> float:
    """Frame-weighted mean loss over a batch of sequences."""
    if not batch:
        raise ValueError('Empty batch')
    frames = np.array([len(b.logits) for b in batch], dtype=np.float64)
    losses = np.array([hubert_loss(b, reduction).loss for b in batch])
    return float((frames * losses).sum() / frames.sum())
