"""Manifest data model and corpus curation rules.

A manifest is a UTF-8 TSV document whose first line is the audio root
directory and whose remaining lines are
`id<TAB>path<TAB>language<TAB>source<TAB>num_samples<TAB>sample_rate`.
Label files align with manifests by position, so ordering is preserved by
every operation in this module.
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import pint

from mhubert.rng import make_rng

ureg = pint.UnitRegistry()
Q_ = ureg.Quantity

DEFAULT_SAMPLE_RATE = 16000
MIN_DURATION_S = 2.0
MAX_DURATION_S = 30.0

_log = logging.getLogger(__name__)


class ManifestError(ValueError):
    """A manifest document or manifest content is invalid.

    Attributes:
        line (int): The 1-based line number of the offending row, if known.

    """
    def __init__(self, message: str, line: 'int|None' = None) -> None:
        if line is not None:
            message = f'line {line}: {message}'
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Utterance:
    """A single corpus record."""
    id: str
    path: str
    language: str
    source: str
    num_samples: int
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.num_samples <= 0:
            raise ValueError(f'Utterance {self.id}: num_samples must be > 0'
                             f' (got {self.num_samples})')
        if self.sample_rate <= 0:
            raise ValueError(f'Utterance {self.id}: sample_rate must be > 0'
                             f' (got {self.sample_rate})')
        for name in ('id', 'path', 'language', 'source'):
            value = getattr(self, name)
            if not value or any(c in value for c in '\t\n\r'):
                raise ValueError(f'Utterance {self.id!r}: invalid {name}'
                                 f' {value!r}')
        # these name directories and files under the features tree
        for name in ('id', 'language', 'source'):
            value = getattr(self, name)
            if '/' in value or '\\' in value or value in ('.', '..'):
                raise ValueError(f'Utterance {self.id!r}: {name} {value!r}'
                                 f' must not be a path')

    @property
    def key(self) -> 'tuple[str, str, str]':
        """The (language, source, id) triple unique within a manifest."""
        return (self.language, self.source, self.id)

    @property
    def pair(self) -> 'tuple[str, str]':
        return (self.language, self.source)

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate

    def num_frames(self, frame_rate_hz: float = 50.0) -> int:
        """The number of feature frames at the given frame rate."""
        return int(math.floor(self.num_samples * frame_rate_hz /
                              self.sample_rate))


@dataclass(frozen=True)
class Manifest:
    """An ordered list of utterances under a root directory."""
    root: str
    utterances: 'tuple[Utterance, ...]' = ()

    def __post_init__(self):
        object.__setattr__(self, 'utterances', tuple(self.utterances))
        seen = set()
        for utt in self.utterances:
            if utt.key in seen:
                raise ManifestError(f'Duplicate utterance key {utt.key}')
            seen.add(utt.key)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, index: int) -> Utterance:
        return self.utterances[index]

    def replace(self, utterances) -> 'Manifest':
        """Returns a manifest with the same root and new utterances."""
        return Manifest(self.root, tuple(utterances))

    @property
    def total_hours(self) -> float:
        return sum(u.duration_s for u in self.utterances) / 3600


@dataclass
class CorpusStats:
    """Example counts per language and per (language, source) pair.

    Attributes:
        total_examples (int): N, the total number of examples.
        per_language (dict): n_l as `{ language: count }`.
        per_pair (dict): n_l(x) as `{ (language, source): count }`.
        total_hours (float): The summed duration in hours.

    """
    total_examples: int
    per_language: 'dict[str, int]'
    per_pair: 'dict[tuple[str, str], int]'
    total_hours: float = 0.0

    def __post_init__(self):
        if sum(self.per_language.values()) != self.total_examples:
            raise ValueError('Language counts do not sum to total_examples')
        if sum(self.per_pair.values()) != self.total_examples:
            raise ValueError('Pair counts do not sum to total_examples')
        for language, _ in self.per_pair:
            if language not in self.per_language:
                raise ValueError(f'Pair language {language} has no count')

    def sources(self, language: str) -> 'dict[str, int]':
        """The per-source counts n_l(x) of a language."""
        return {src: n for (lang, src), n in self.per_pair.items()
                if lang == language}


@dataclass(frozen=True)
class ConcatGroup:
    """A run of same-(language, source) utterances to be joined."""
    language: str
    source: str
    ids: 'tuple[str, ...]'
    duration_s: float
    under_target: bool = False


@dataclass(frozen=True)
class ConcatenationPlan:
    target_min_s: float
    groups: 'tuple[ConcatGroup, ...]' = field(default_factory=tuple)

    @property
    def flagged(self) -> 'list[ConcatGroup]':
        return [g for g in self.groups if g.under_target]


def parse_manifest(text: str) -> Manifest:
    """Parses a manifest TSV document.

    Args:
        text: The document, first line being the root path.

    Returns:
        A Manifest with rows in document order.

    Raises:
        `ManifestError` naming the line of a malformed or duplicate row.

    """
    lines = text.split('\n')
    if lines and lines[-1] == '':
        lines.pop()
    if not lines:
        raise ManifestError('Empty manifest document (missing root line)', 1)
    root = lines[0]
    utterances = []
    seen = {}
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.split('\t')
        if len(cols) != 6:
            raise ManifestError(f'Expected 6 tab-separated columns,'
                                f' found {len(cols)}', lineno)
        uid, path, language, source, samples, rate = cols
        try:
            num_samples = int(samples)
            sample_rate = int(rate)
        except ValueError:
            raise ManifestError(f'Non-integer num_samples/sample_rate'
                                f' {samples!r}/{rate!r}', lineno)
        try:
            utt = Utterance(uid, path, language, source, num_samples,
                            sample_rate)
        except ValueError as err:
            raise ManifestError(str(err), lineno) from err
        if utt.key in seen:
            raise ManifestError(f'Duplicate key {utt.key}'
                                f' (first on line {seen[utt.key]})', lineno)
        seen[utt.key] = lineno
        utterances.append(utt)
    return Manifest(root, tuple(utterances))


def write_manifest(m: Manifest) -> str:
    """Serializes a manifest to its TSV document."""
    rows = [m.root]
    for u in m.utterances:
        rows.append(f'{u.id}\t{u.path}\t{u.language}\t{u.source}'
                    f'\t{u.num_samples}\t{u.sample_rate}')
    return '\n'.join(rows) + '\n'


def load_manifest(path: str) -> Manifest:
    with open(path, encoding='utf-8', newline='') as f:
        return parse_manifest(f.read())


def save_manifest(path: str, m: Manifest) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(write_manifest(m))


def corpus_stats(m: Manifest) -> CorpusStats:
    """Counts examples per language and per (language, source) pair."""
    per_language = Counter(u.language for u in m.utterances)
    per_pair = Counter(u.pair for u in m.utterances)
    return CorpusStats(total_examples=len(m),
                       per_language=dict(per_language),
                       per_pair=dict(per_pair),
                       total_hours=m.total_hours)


def language_hours(m: Manifest) -> 'dict[str, float]':
    """Hours of speech per language."""
    hours = {}
    for u in m.utterances:
        hours[u.language] = hours.get(u.language, 0.0) + u.duration_s / 3600
    return hours


def filter_durations(m: Manifest,
                     min_s: float = MIN_DURATION_S,
                     max_s: float = MAX_DURATION_S,
                     ) -> 'tuple[Manifest, list[Utterance]]':
    """Keeps utterances whose duration lies within [min_s, max_s].

    Both bounds are inclusive.

    Returns:
        A tuple (kept, dropped) which together partition the input in order.

    """
    if not min_s < max_s:
        raise ValueError(f'min_s ({min_s}) must be less than max_s ({max_s})')
    kept, dropped = [], []
    for u in m.utterances:
        if min_s <= u.duration_s <= max_s:
            kept.append(u)
        else:
            dropped.append(u)
    _log.info(f'Duration filter [{min_s},{max_s}]s kept {len(kept)}'
              f' dropped {len(dropped)}')
    return m.replace(kept), dropped


def concat_short(m: Manifest,
                 target_min_s: float = MIN_DURATION_S,
                 ) -> ConcatenationPlan:
    """Plans greedy concatenation of consecutive same-pair utterances.

    Utterances are bucketed by (language, source) in order of first
    appearance. Within a bucket a group accumulates utterances until its
    duration reaches `target_min_s`. A trailing group that never reaches the
    target is flagged `under_target`.

    """
    if target_min_s <= 0:
        raise ValueError('target_min_s must be positive')
    buckets: 'dict[tuple[str, str], list[Utterance]]' = {}
    for u in m.utterances:
        buckets.setdefault(u.pair, []).append(u)
    groups = []
    for (language, source), members in buckets.items():
        ids, duration = [], 0.0
        for u in members:
            ids.append(u.id)
            duration += u.duration_s
            if duration >= target_min_s:
                groups.append(ConcatGroup(language, source, tuple(ids),
                                          duration))
                ids, duration = [], 0.0
        if ids:
            _log.warning(f'Group {language}/{source} {ids} reaches only'
                         f' {duration:.2f}s < {target_min_s}s')
            groups.append(ConcatGroup(language, source, tuple(ids), duration,
                                      under_target=True))
    return ConcatenationPlan(target_min_s, tuple(groups))


def apply_concat_plan(m: Manifest, plan: ConcatenationPlan) -> Manifest:
    """Builds the manifest of virtual utterances described by a plan.

    Each group becomes one utterance with id `a+b+c`, the path of its first
    member and the summed sample count. Groups flagged under target are
    dropped.

    """
    lookup = {u.key: u for u in m.utterances}
    joined = []
    for group in plan.groups:
        if group.under_target:
            continue
        members = [lookup[(group.language, group.source, uid)]
                   for uid in group.ids]
        rates = {u.sample_rate for u in members}
        if len(rates) != 1:
            raise ValueError(f'Mixed sample rates {sorted(rates)} in group'
                             f' {group.ids}')
        joined.append(Utterance(id='+'.join(group.ids),
                                path=members[0].path,
                                language=group.language,
                                source=group.source,
                                num_samples=sum(u.num_samples
                                                for u in members),
                                sample_rate=rates.pop()))
    return m.replace(joined)


def carve_validation(m: Manifest, per_pair: int = 5, seed: int = 0) -> Manifest:
    """Samples a validation manifest of `per_pair` utterances per pair.

    Pairs with fewer utterances contribute all of them. The selection is not
    removed from the training manifest. Selected utterances keep manifest
    order.

    """
    if per_pair < 1:
        raise ValueError(f'per_pair must be >= 1 (got {per_pair})')
    rng = make_rng(seed)
    positions: 'dict[tuple[str, str], list[int]]' = {}
    for i, u in enumerate(m.utterances):
        positions.setdefault(u.pair, []).append(i)
    selected = []
    for pair in sorted(positions):
        pool = positions[pair]
        if len(pool) <= per_pair:
            selected.extend(pool)
        else:
            chosen = rng.choice(len(pool), size=per_pair, replace=False)
            selected.extend(pool[c] for c in chosen)
    selected.sort()
    _log.info(f'Validation carve: {len(selected)} utterances from'
              f' {len(positions)} pairs')
    return m.replace(m.utterances[i] for i in selected)


def estimate_storage(hours: float,
                     feature_dim: int,
                     frame_rate_hz: float,
                     bytes_per_value: int = 4,
                     ) -> float:
    """Estimates the bytes needed to store features for `hours` of speech.

    Args:
        hours: Hours of speech (0 allowed).
        feature_dim: Values per frame e.g. 39 (MFCC) or 768 (latent).
        frame_rate_hz: Frames per second e.g. 100 (MFCC) or 50 (latent).
        bytes_per_value: 4 for float32.

    Returns:
        The size in bytes.

    """
    if hours < 0:
        raise ValueError('hours must be non-negative')
    if feature_dim <= 0 or frame_rate_hz <= 0 or bytes_per_value <= 0:
        raise ValueError('feature_dim, frame_rate_hz and bytes_per_value'
                         ' must be positive')
    seconds = Q_(hours, ureg.hour).to(ureg.second).magnitude
    return seconds * frame_rate_hz * feature_dim * bytes_per_value


def estimate_audio_storage(hours: float,
                           sample_rate: int = DEFAULT_SAMPLE_RATE,
                           bytes_per_sample: int = 2,
                           ) -> float:
    """Bytes of raw PCM audio (16-bit 16 kHz by default)."""
    return estimate_storage(hours, 1, sample_rate, bytes_per_sample)


def estimate_label_storage(hours: float,
                           frame_rate_hz: float = 50.0,
                           bytes_per_label: int = 4,
                           ) -> float:
    """Approximate bytes of text label files (digits plus separator)."""
    return estimate_storage(hours, 1, frame_rate_hz, bytes_per_label)


def estimate_labeling_time(hours: float, seconds_per_10h: float = 21.0) -> float:
    """Extrapolates label application seconds from a per-10h measurement."""
    if hours < 0 or seconds_per_10h <= 0:
        raise ValueError('hours must be >= 0 and seconds_per_10h > 0')
    return hours / 10 * seconds_per_10h


def format_storage(num_bytes: float) -> str:
    """Formats bytes as decimal terabytes with the binary equivalent."""
    size = Q_(num_bytes, ureg.byte)
    return (f'{size.to(ureg.terabyte).magnitude:.2f} TB'
            f' ({size.to(ureg.tebibyte).magnitude:.2f} TiB)')


def utterance_frames(m: Manifest, frame_rate_hz: float = 50.0) -> np.ndarray:
    """Frame counts of every utterance, in manifest order."""
    return np.array([u.num_frames(frame_rate_hz) for u in m.utterances],
                    dtype=np.int64)
