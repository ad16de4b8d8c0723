import math

import numpy as np
import pytest

from mhubert.pretext import (
    LossInputs,
    MaskSpec,
    batch_loss,
    expected_mask_fraction,
    gen_mask_spans,
    hubert_loss,
    mask_fraction,
)


def random_inputs(rng: np.random.Generator, psi: 'float|None' = None) -> LossInputs:
    T = int(rng.integers(2, 11))
    C = int(rng.integers(2, 9))
    mask = rng.random(T) < 0.4
    return LossInputs(logits=rng.normal(scale=2.0, size=(T, C)),
                      labels=rng.integers(0, C, size=T),
                      mask=MaskSpec.from_mask(mask),
                      psi=float(rng.random()) if psi is None else psi)


def test_mask_edges():
    assert mask_fraction(gen_mask_spans(50, mask_prob=0.0)) == 0.0
    assert mask_fraction(gen_mask_spans(50, mask_prob=1.0)) == 1.0
    one = gen_mask_spans(1, mask_prob=1.0)
    assert one.indices.tolist() == [0]
    short = gen_mask_spans(5, mask_prob=1.0, span_len=10)
    assert short.mask.tolist() == [True] * 5
    with pytest.raises(ValueError):
        gen_mask_spans(0)
    with pytest.raises(ValueError):
        gen_mask_spans(10, mask_prob=1.5)
    with pytest.raises(ValueError):
        gen_mask_spans(10, span_len=0)


def test_mask_spans_are_contiguous_runs():
    spec = gen_mask_spans(2000, mask_prob=0.02, span_len=7, seed=3)
    mask = spec.mask.astype(np.int8)
    starts = np.flatnonzero(np.diff(np.concatenate([[0], mask])) == 1)
    ends = np.flatnonzero(np.diff(np.concatenate([mask, [0]])) == -1)
    lengths = ends - starts + 1
    assert np.all(lengths[:-1] >= 7)
    assert gen_mask_spans(2000, 0.02, 7, seed=3).indices.tolist() \
        == spec.indices.tolist()


def test_mask_coverage():
    spec = gen_mask_spans(100_000, 0.08, 10, seed=0)
    expected = expected_mask_fraction(0.08, 10)
    assert expected == pytest.approx(0.566, abs=1e-3)
    assert abs(mask_fraction(spec) - expected) <= 0.01


def test_mask_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec(5, [5])
    spec = MaskSpec(6, [4, 1, 1])
    assert spec.indices.tolist() == [1, 4]
    assert MaskSpec.from_mask(spec.mask).indices.tolist() == [1, 4]


def test_uniform_logits_give_log_c():
    T, C = 12, 1000
    inputs = LossInputs(np.zeros((T, C)), np.arange(T) % C,
                        MaskSpec(T, np.arange(T)), psi=1.0)
    out = hubert_loss(inputs)
    assert abs(out.loss - math.log(1000)) <= 1e-9
    assert out.masked == pytest.approx(math.log(1000), abs=1e-12)


def test_confident_logits_give_zero_loss():
    labels = np.array([2, 0, 1])
    logits = np.full((3, 3), -50.0)
    logits[np.arange(3), labels] = 50.0
    out = hubert_loss(LossInputs(logits, labels, MaskSpec(3, [0]), psi=0.5))
    assert out.loss == pytest.approx(0.0, abs=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    eps = 1e-5
    for _ in range(100):
        inputs = random_inputs(rng)
        out = hubert_loss(inputs)
        numeric = np.zeros_like(inputs.logits)
        for t, c in np.ndindex(*inputs.logits.shape):
            up = inputs.logits.copy()
            down = inputs.logits.copy()
            up[t, c] += eps
            down[t, c] -= eps
            numeric[t, c] = (
                hubert_loss(LossInputs(up, inputs.labels, inputs.mask,
                                       inputs.psi)).loss -
                hubert_loss(LossInputs(down, inputs.labels, inputs.mask,
                                       inputs.psi)).loss) / (2 * eps)
        assert np.abs(out.grad - numeric).max() <= 1e-6


def test_gradient_rows_sum_to_zero():
    rng = np.random.default_rng(1)
    for _ in range(20):
        out = hubert_loss(random_inputs(rng))
        assert np.allclose(out.grad.sum(axis=1), 0.0, atol=1e-12)


def test_shift_invariance():
    rng = np.random.default_rng(2)
    inputs = random_inputs(rng)
    shift = rng.normal(scale=10.0, size=(len(inputs.logits), 1))
    shifted = LossInputs(inputs.logits + shift, inputs.labels, inputs.mask,
                         inputs.psi)
    assert hubert_loss(shifted).loss == pytest.approx(hubert_loss(inputs).loss)


def test_psi_is_linear():
    rng = np.random.default_rng(3)
    base = random_inputs(rng)

    def loss(psi):
        return hubert_loss(LossInputs(base.logits, base.labels, base.mask,
                                      psi)).loss

    out = hubert_loss(base)
    assert out.loss == pytest.approx(base.psi * out.masked +
                                     (1 - base.psi) * out.unmasked)
    assert loss(0.3) == pytest.approx(0.3 * loss(1.0) + 0.7 * loss(0.0))


def test_empty_mask_sets_score_zero():
    logits = np.random.default_rng(4).normal(size=(6, 4))
    labels = np.zeros(6, dtype=np.int64)
    everything = hubert_loss(LossInputs(logits, labels,
                                        MaskSpec(6, np.arange(6)), psi=0.5))
    assert everything.unmasked == 0.0
    assert everything.loss == pytest.approx(0.5 * everything.masked)
    nothing = hubert_loss(LossInputs(logits, labels, MaskSpec(6, []),
                                     psi=1.0))
    assert nothing.loss == 0.0
    assert not nothing.grad.any()


def test_sum_reduction():
    rng = np.random.default_rng(5)
    inputs = random_inputs(rng, psi=1.0)
    mean = hubert_loss(inputs)
    total = hubert_loss(inputs, reduction='sum')
    n_masked = len(inputs.mask.indices)
    assert total.masked == pytest.approx(mean.masked * n_masked)
    with pytest.raises(ValueError):
        hubert_loss(inputs, reduction='max')


def test_negative_infinite_logits_allowed():
    logits = np.array([[0.0, -np.inf, 0.0], [1.0, 2.0, -np.inf]])
    out = hubert_loss(LossInputs(logits, np.array([0, 1]),
                                 MaskSpec(2, [0, 1])))
    assert math.isfinite(out.loss)
    assert np.isfinite(out.grad).all()
    assert out.masked == pytest.approx(
        (math.log(2) + math.log(1 + math.exp(-1))) / 2)


def test_loss_input_validation():
    logits = np.zeros((3, 4))
    with pytest.raises(ValueError):
        LossInputs(logits, np.array([0, 1, 4]), MaskSpec(3, []))
    with pytest.raises(ValueError):
        LossInputs(logits, np.array([0, 1]), MaskSpec(3, []))
    with pytest.raises(ValueError):
        LossInputs(logits, np.array([0, 1, 2]), MaskSpec(4, []))
    with pytest.raises(ValueError):
        LossInputs(logits, np.array([0, 1, 2]), MaskSpec(3, []), psi=1.5)
    bad = logits.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        LossInputs(bad, np.array([0, 1, 2]), MaskSpec(3, []))
    with pytest.raises(ValueError):
        hubert_loss(LossInputs(np.zeros((0, 4)), np.zeros(0, dtype=np.int64),
                               MaskSpec(0, [])))


def test_batch_loss_is_frame_weighted():
    rng = np.random.default_rng(6)
    a = LossInputs(rng.normal(size=(10, 3)), rng.integers(0, 3, 10),
                   MaskSpec(10, np.arange(10)))
    b = LossInputs(rng.normal(size=(30, 3)), rng.integers(0, 3, 30),
                   MaskSpec(30, np.arange(30)))
    expected = (10 * hubert_loss(a).loss + 30 * hubert_loss(b).loss) / 40
    assert batch_loss([a, b]) == pytest.approx(expected)
    with pytest.raises(ValueError):
        batch_loss([])
