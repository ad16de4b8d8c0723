"""Speech/music/noise classification from external segment annotations.

Annotations are produced by an external segmenter and arrive as JSON lines::

    {"id": "utt1", "events": [{"kind": "music", "start": 0.0, "end": 2.5}]}

A file is music if any single music event lasts longer than the music
threshold, else noise if any single noise event exceeds the noise threshold
or any single noEnergy (silence) event exceeds the silence threshold, else
speech. All comparisons are strict.
"""
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from mhubert.corpus import Manifest

_log = logging.getLogger(__name__)

NOISE_BUCKETS = ((0, 5), (5, 10), (10, 15), (15, 20), (20, 30), (30, 50),
                 (50, 100))


class EventKind(str, Enum):
    MUSIC = 'music'
    NOISE = 'noise'
    NO_ENERGY = 'noEnergy'
    SPEECH = 'speech'


class FileKind(str, Enum):
    SPEECH = 'speech'
    MUSIC = 'music'
    NOISE = 'noise'
    UNANNOTATED = 'unannotated'


@dataclass(frozen=True)
class SegmentEvent:
    kind: EventKind
    start: float
    end: float

    def __post_init__(self):
        object.__setattr__(self, 'kind', EventKind(self.kind))
        if not 0 <= self.start < self.end:
            raise ValueError(f'Invalid {self.kind.value} event interval'
                             f' [{self.start}, {self.end}]')

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class SegmentAnnotation:
    """Segmenter events for one utterance (may overlap or leave gaps)."""
    utterance_id: str
    events: 'tuple[SegmentEvent, ...]' = ()

    def __post_init__(self):
        object.__setattr__(self, 'events', tuple(self.events))


@dataclass(frozen=True)
class FilterThresholds:
    """Event durations in seconds above which a file is rejected."""
    music_s: float = 2.0
    noise_s: float = 2.0
    no_energy_s: float = 5.0

    def __post_init__(self):
        if min(self.music_s, self.noise_s, self.no_energy_s) <= 0:
            raise ValueError('Filter thresholds must be positive')


@dataclass
class FilterReport:
    counts: 'dict[str, int]' = field(default_factory=dict)
    removed_ids: 'list[str]' = field(default_factory=list)

    @property
    def removed(self) -> int:
        return (self.counts.get(FileKind.MUSIC.value, 0) +
                self.counts.get(FileKind.NOISE.value, 0))


def classify_file(a: SegmentAnnotation,
                  t: FilterThresholds = FilterThresholds(),
                  ) -> FileKind:
    """Classifies one annotated file as speech, music or noise."""
    longest = Counter()
    for event in a.events:
        if event.duration > longest[event.kind]:
            longest[event.kind] = event.duration
    if longest[EventKind.MUSIC] > t.music_s:
        return FileKind.MUSIC
    if (longest[EventKind.NOISE] > t.noise_s or
        longest[EventKind.NO_ENERGY] > t.no_energy_s):
        return FileKind.NOISE
    return FileKind.SPEECH


def _annotation_lookup(m: Manifest,
                       annotations: 'list[SegmentAnnotation]',
                       ) -> 'dict[str, SegmentAnnotation]':
    """Maps utterance ids to annotations.

    Raises:
        ValueError if an id is annotated twice, or if an annotated id names
        utterances in more than one (language, source) pair.

    """
    by_id = {}
    for a in annotations:
        if a.utterance_id in by_id:
            raise ValueError(f'Duplicate annotation for {a.utterance_id}')
        by_id[a.utterance_id] = a
    pairs: 'dict[str, set]' = {}
    for u in m.utterances:
        if u.id in by_id:
            pairs.setdefault(u.id, set()).add(u.pair)
    ambiguous = sorted(uid for uid, p in pairs.items() if len(p) > 1)
    if ambiguous:
        raise ValueError(f'Annotated ids shared by several (language, source)'
                         f' pairs: {ambiguous[:5]}')
    return by_id


def filter_manifest(m: Manifest,
                    annotations: 'list[SegmentAnnotation]',
                    t: FilterThresholds = FilterThresholds(),
                    ) -> 'tuple[Manifest, FilterReport]':
    """Removes utterances classified as music or noise.

    Utterances without an annotation are kept and tallied as unannotated.
    Annotations are matched by utterance id, which must then be unambiguous
    (see `_annotation_lookup`).

    Returns:
        A tuple (kept manifest, report of counts per kind).

    """
    by_id = _annotation_lookup(m, annotations)
    report = FilterReport(counts={k.value: 0 for k in FileKind})
    kept = []
    for u in m.utterances:
        annotation = by_id.get(u.id)
        kind = (FileKind.UNANNOTATED if annotation is None
                else classify_file(annotation, t))
        report.counts[kind.value] += 1
        if kind in (FileKind.SPEECH, FileKind.UNANNOTATED):
            kept.append(u)
        else:
            report.removed_ids.append(u.id)
    _log.info(f'Segment filter kept {len(kept)}/{len(m)}: {report.counts}')
    return m.replace(kept), report


def noise_by_language(m: Manifest,
                      annotations: 'list[SegmentAnnotation]',
                      t: FilterThresholds = FilterThresholds(),
                      ) -> 'dict[str, float]':
    """Percentage of annotated utterances removed, per language."""
    by_id = _annotation_lookup(m, annotations)
    annotated = Counter()
    removed = Counter()
    for u in m.utterances:
        if u.id not in by_id:
            continue
        annotated[u.language] += 1
        if classify_file(by_id[u.id], t) != FileKind.SPEECH:
            removed[u.language] += 1
    return {lang: 100.0 * removed[lang] / n for lang, n in annotated.items()}


def bucket_noise(percentages: 'dict[str, float]') -> 'dict[str, list[str]]':
    """Groups languages into noise-percentage buckets.

    The first bucket is closed `[0,5]`, the others are `(low,high]`.

    """
    buckets = {}
    for i, (low, high) in enumerate(NOISE_BUCKETS):
        label = f'[{low},{high}]' if i == 0 else f'({low},{high}]'
        buckets[label] = sorted(
            lang for lang, pct in percentages.items()
            if (low <= pct <= high if i == 0 else low < pct <= high))
    return buckets


def read_annotations(text: str) -> 'list[SegmentAnnotation]':
    """Parses a JSON-lines annotation document."""
    annotations = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            events = tuple(SegmentEvent(e['kind'], float(e['start']),
                                        float(e['end']))
                           for e in record.get('events', []))
            annotations.append(SegmentAnnotation(str(record['id']), events))
        except (KeyError, TypeError, ValueError) as err:
            raise ValueError(f'Annotation line {lineno}: {err}') from err
    return annotations


def write_annotations(annotations: 'list[SegmentAnnotation]') -> str:
    lines = []
    for a in annotations:
        events = [{'kind': e.kind.value, 'start': e.start, 'end': e.end}
                  for e in a.events]
        lines.append(json.dumps({'id': a.utterance_id, 'events': events}))
    return ''.join(f'{line}\n' for line in lines)
