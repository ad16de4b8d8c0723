from dataclasses import replace

import numpy as np
import pytest

from mhubert.scoreboard import (
    Direction,
    MetricEntry,
    normalized_scores,
    read_metrics,
    superb_score,
)

METRICS = ('task,value,direction,sota,floor,group\n'
           'PR,9.0,lower_better,5.0,25.0,content\n'
           'KS,80.0,higher_better,90.0,40.0,content\n'
           'SID,0.5,higher_better,0.9,0.1,speaker\n')


def test_reference_points():
    at_sota = MetricEntry('ASR', 3.0, Direction.LOWER_BETTER, 3.0, 30.0)
    at_floor = MetricEntry('ASR', 30.0, Direction.LOWER_BETTER, 3.0, 30.0)
    assert superb_score([at_sota]) == pytest.approx(1000.0)
    assert superb_score([at_floor]) == pytest.approx(0.0)
    ks = MetricEntry('KS', 80.0, 'higher_better', 90.0, 40.0)
    pr = MetricEntry('PR', 9.0, 'lower_better', 5.0, 25.0)
    assert superb_score([ks]) == pytest.approx(800.0)
    assert superb_score([pr]) == pytest.approx(800.0)


def test_beyond_sota_and_clipping():
    better = MetricEntry('ER', 95.0, 'higher_better', 90.0, 40.0)
    worse = MetricEntry('IC', 30.0, 'higher_better', 90.0, 40.0)
    assert superb_score([better]) == pytest.approx(1100.0)
    assert superb_score([better], clip=True) == pytest.approx(1000.0)
    assert normalized_scores([better, worse], clip=True) == {'ER': 1.0,
                                                             'IC': 0.0}
    assert normalized_scores([worse])['IC'] == pytest.approx(-0.2)


def random_table(rng: np.random.Generator) -> 'list[MetricEntry]':
    entries = []
    for i in range(int(rng.integers(1, 8))):
        sota, floor = rng.uniform(-50, 50, size=2)
        if abs(sota - floor) < 1e-3:
            floor = sota - 1.0
        direction = 'higher_better' if sota > floor else 'lower_better'
        lo, hi = sorted((sota, floor))
        entries.append(MetricEntry(f't{i}', float(rng.uniform(lo, hi)),
                                   direction, float(sota), float(floor)))
    return entries


def test_score_properties():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        entries = random_table(rng)
        score = superb_score(entries)
        assert -1e-9 <= score <= 1000 + 1e-9
        assert superb_score(entries, clip=True) == pytest.approx(score)
        at_sota = [replace(e, value=e.sota) for e in entries]
        at_floor = [replace(e, value=e.floor) for e in entries]
        assert superb_score(at_sota) == pytest.approx(1000.0)
        assert superb_score(at_floor) == pytest.approx(0.0, abs=1e-9)
        # move one entry halfway towards its state of the art
        k = int(rng.integers(0, len(entries)))
        e = entries[k]
        if abs(e.sota - e.value) > 1e-6:
            improved = list(entries)
            improved[k] = replace(e, value=(e.value + e.sota) / 2)
            assert superb_score(improved) > score


def test_score_improves_with_value():
    low = MetricEntry('KS', 60.0, 'higher_better', 90.0, 40.0)
    high = MetricEntry('KS', 70.0, 'higher_better', 90.0, 40.0)
    assert superb_score([high]) > superb_score([low])
    low_wer = MetricEntry('ASR', 20.0, 'lower_better', 3.0, 30.0)
    high_wer = MetricEntry('ASR', 25.0, 'lower_better', 3.0, 30.0)
    assert superb_score([low_wer]) > superb_score([high_wer])


def test_group_mean():
    entries = read_metrics(METRICS)
    assert superb_score(entries) == pytest.approx(1000 * (0.8 + 0.8 + 0.5) / 3)
    assert superb_score(entries, aggregate='group_mean') == \
        pytest.approx(1000 * (0.8 + 0.5) / 2)
    with pytest.raises(ValueError):
        superb_score(entries, aggregate='median')


def test_entry_errors():
    with pytest.raises(ValueError):
        MetricEntry('X', 1.0, 'higher_better', 5.0, 5.0)
    with pytest.raises(ValueError):
        MetricEntry('X', float('nan'), 'higher_better', 5.0, 1.0)
    with pytest.raises(ValueError):
        MetricEntry('X', 1.0, 'sideways', 5.0, 1.0)
    with pytest.raises(ValueError):
        superb_score([])


def test_read_metrics():
    entries = read_metrics(METRICS)
    assert [e.task for e in entries] == ['PR', 'KS', 'SID']
    assert entries[0].direction == Direction.LOWER_BETTER
    assert entries[2].group == 'speaker'
    plain = read_metrics('task,value,direction,sota,floor\n'
                         'KS,80,higher_better,90,40\n')
    assert plain[0].group is None


def test_read_metrics_errors():
    with pytest.raises(ValueError, match='columns'):
        read_metrics('task,value\nKS,80\n')
    bad = METRICS + 'ER,abc,higher_better,80,20,\n'
    with pytest.raises(ValueError, match='row 5'):
        read_metrics(bad)
    with pytest.raises(ValueError, match='row 2'):
        read_metrics('task,value,direction,sota,floor\n'
                     'KS,80,up,90,40\n')


def test_score_ignores_units_and_order():
    rng = np.random.default_rng(1)
    for _ in range(100):
        entries = random_table(rng)
        score = superb_score(entries)
        scale = float(rng.uniform(0.1, 100)) * (1 if rng.random() < 0.5 else -1)
        shift = float(rng.normal(scale=100))
        moved = []
        for e in entries:
            direction = e.direction
            if scale < 0:
                direction = (Direction.LOWER_BETTER
                             if e.direction == Direction.HIGHER_BETTER
                             else Direction.HIGHER_BETTER)
            moved.append(MetricEntry(e.task, scale * e.value + shift,
                                     direction, scale * e.sota + shift,
                                     scale * e.floor + shift))
        assert superb_score(moved) == pytest.approx(score, abs=1e-6)
        reordered = [entries[i] for i in rng.permutation(len(entries))]
        assert superb_score(reordered) == pytest.approx(score, abs=1e-9)


def test_short_and_long_rows_rejected():
    with pytest.raises(ValueError, match='row 3'):
        read_metrics('task,value,direction,sota,floor\n'
                     'KS,80,higher_better,90,40\n'
                     'PR,9,lower_better\n')
    with pytest.raises(ValueError, match='row 2'):
        read_metrics('task,value,direction,sota,floor\n'
                     'KS,80,higher_better,90,40,extra,more\n')
