"""SOTA-normalized aggregate score over evaluation tasks.

Each task value is mapped linearly so that its floor scores 0 and the state
of the art scores 1; the aggregate is 1000 times the mean. Metrics are read
from CSV with the header `task,value,direction,sota,floor[,group]`.
"""
import csv
import io
import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

_log = logging.getLogger(__name__)


class Direction(str, Enum):
    HIGHER_BETTER = 'higher_better'
    LOWER_BETTER = 'lower_better'


@dataclass(frozen=True)
class MetricEntry:
    task: str
    value: float
    direction: Direction
    sota: float
    floor: float
    group: 'str|None' = None

    def __post_init__(self):
        object.__setattr__(self, 'direction', Direction(self.direction))
        for name in ('value', 'sota', 'floor'):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f'{self.task}: {name} must be finite')
        if self.sota == self.floor:
            raise ValueError(f'{self.task}: sota equals floor ({self.sota})')

    def normalized(self) -> float:
        if self.direction == Direction.HIGHER_BETTER:
            return (self.value - self.floor) / (self.sota - self.floor)
        return (self.floor - self.value) / (self.floor - self.sota)


def normalized_scores(entries: 'list[MetricEntry]',
                      clip: bool = False,
                      ) -> 'dict[str, float]':
    """Per-task normalized values, optionally clipped to [0, 1]."""
    scores = {}
    for e in entries:
        value = e.normalized()
        scores[e.task] = min(max(value, 0.0), 1.0) if clip else value
    return scores


def superb_score(entries: 'list[MetricEntry]',
                 clip: bool = False,
                 aggregate: str = 'mean',
                 ) -> float:
    """1000 x the mean normalized value of the entries.

    Args:
        entries: Non-empty list of metrics.
        clip: Clip normalized values to [0, 1] (off by default, so a new
            state of the art scores above 1000).
        aggregate: `mean` over entries, or `group_mean` to average within
            each group first (ungrouped entries form their own group).

    Raises:
        ValueError for an empty list, an unknown aggregate or sota == floor.

    """
    if not entries:
        raise ValueError('superb_score needs at least one entry')
    values = [e.normalized() for e in entries]
    if clip:
        values = [min(max(v, 0.0), 1.0) for v in values]
    if aggregate == 'mean':
        return 1000.0 * float(np.mean(values))
    if aggregate == 'group_mean':
        groups: 'dict[str, list[float]]' = {}
        for e, v in zip(entries, values):
            groups.setdefault(e.group or e.task, []).append(v)
        return 1000.0 * float(np.mean([np.mean(g) for g in groups.values()]))
    raise ValueError(f'Unknown aggregate {aggregate}')


def read_metrics(text: str) -> 'list[MetricEntry]':
    """Parses metric CSV; errors name the offending row."""
    reader = csv.DictReader(io.StringIO(text))
    required = {'task', 'value', 'direction', 'sota', 'floor'}
    missing = required - set(reader.fieldnames or [])
    if missing:
        raise ValueError(f'Metrics CSV missing columns {sorted(missing)}')
    entries = []
    for rownum, row in enumerate(reader, start=2):
        try:
            if None in row or None in row.values():
                raise ValueError(f'expected {len(reader.fieldnames)} fields')
            entries.append(MetricEntry(task=row['task'],
                                       value=float(row['value']),
                                       direction=row['direction'].strip(),
                                       sota=float(row['sota']),
                                       floor=float(row['floor']),
                                       group=row.get('group') or None))
        except ValueError as err:
            raise ValueError(f'Metrics row {rownum}: {err}') from err
    _log.debug(f'Read {len(entries)} metric entries')
    return entries
