"""Feature file I/O and sharded label application.

Feature files hold one utterance's frames::

    magic       4s  b'MHFT'
    version     u32
    dim         u32
    num_frames  u64
    payload     num_frames x dim float32, little-endian, row-major

Label files are UTF-8 text, one line per manifest utterance, holding the
space-separated centroid id of every frame.
"""
import logging
import os
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from mhubert.corpus import Manifest, Utterance
from mhubert.quantizer import Index, index_assign
from mhubert.quantizer.hnsw import DEFAULT_EF_SEARCH

FEATURE_MAGIC = b'MHFT'
FEATURE_VERSION = 1
FEATURE_SUFFIX = '.mhft'
PROGRESS = os.getenv('MHUB_PROGRESS', '1') != '0'

_HEADER = struct.Struct('<4sIIQ')

_log = logging.getLogger(__name__)


class LabelingError(RuntimeError):
    """Some feature files could not be labeled.

    Attributes:
        failures (dict): `{ path: message }` for every failed file.
        partial (LabelFile): Labels of the files that succeeded; failed files
            have an empty line.

    """
    def __init__(self, failures: 'dict[str, str]', partial: 'LabelFile') -> None:
        super().__init__(f'{len(failures)} feature files failed to label')
        self.failures = failures
        self.partial = partial


@dataclass(eq=False)
class FeatureMatrix:
    """Frames of one utterance as a num_frames x dim float32 matrix."""
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError(f'Features must be num_frames x dim'
                             f' (got shape {values.shape})')
        self.values = values

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (self.values.shape == other.values.shape and
                self.values.tobytes() == other.values.tobytes())


@dataclass
class LabelingReport:
    files: int = 0
    frames: int = 0
    seconds: float = 0.0
    failures: 'dict[str, str]' = field(default_factory=dict)

    @property
    def frames_per_second(self) -> float:
        return self.frames / self.seconds if self.seconds > 0 else 0.0


@dataclass(eq=False)
class LabelFile:
    """Per-utterance label sequences in manifest order."""
    lines: 'list[np.ndarray]' = field(default_factory=list)
    report: 'LabelingReport|None' = None

    def __len__(self) -> int:
        return len(self.lines)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelFile):
            return NotImplemented
        return (len(self.lines) == len(other.lines) and
                all(np.array_equal(a, b)
                    for a, b in zip(self.lines, other.lines)))


def write_features(fm: FeatureMatrix) -> bytes:
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, fm.dim, fm.num_frames)
    return header + fm.values.astype('<f4', copy=False).tobytes()


def _read_header(data: bytes) -> 'tuple[int, int]':
    if len(data) < _HEADER.size:
        raise ValueError(f'Feature file shorter than its {_HEADER.size}-byte'
                         f' header')
    magic, version, dim, num_frames = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise ValueError('Not an MHFT feature file (bad magic)')
    if version != FEATURE_VERSION:
        raise ValueError(f'Unsupported feature file version {version}')
    return dim, num_frames


def read_features(data: bytes, nan_policy: str = 'warn') -> FeatureMatrix:
    """Parses an MHFT document.

    Args:
        data: The file bytes.
        nan_policy: `warn` replaces non-finite values by 0 with a warning,
            `reject` raises.

    Raises:
        ValueError on a bad magic or version, a payload length that does not
        match the header, or non-finite values under `reject`.

    """
    if nan_policy not in ('warn', 'reject'):
        raise ValueError(f'Unknown nan_policy {nan_policy}')
    dim, num_frames = _read_header(data)
    expected = dim * num_frames * 4
    payload = len(data) - _HEADER.size
    if payload != expected:
        raise ValueError(f'Feature payload is {payload} bytes, header implies'
                         f' {expected} ({num_frames} x {dim})')
    values = np.frombuffer(data, dtype='<f4', offset=_HEADER.size)
    values = values.reshape(num_frames, dim).astype(np.float32)
    bad = ~np.isfinite(values)
    if bad.any():
        rows = int(bad.any(axis=1).sum())
        if nan_policy == 'reject':
            raise ValueError(f'{rows} frames contain NaN or infinite values')
        _log.warning(f'{rows} frames contain NaN or infinite values;'
                     f' substituting 0')
        values[bad] = 0.0
    return FeatureMatrix(values)


def read_feature_header(path: str) -> 'tuple[int, int]':
    """(dim, num_frames) of a feature file without reading the payload."""
    with open(path, 'rb') as f:
        return _read_header(f.read(_HEADER.size))


def load_features(path: str, nan_policy: str = 'warn') -> FeatureMatrix:
    with open(path, 'rb') as f:
        return read_features(f.read(), nan_policy)


def save_features(path: str, fm: FeatureMatrix) -> None:
    with open(path, 'wb') as f:
        f.write(write_features(fm))


def feature_path(features_dir: str, u: Utterance) -> str:
    """Where the features of an utterance live: `<dir>/<lang>/<source>/<id>.mhft`."""
    return os.path.join(features_dir, u.language, u.source,
                        f'{u.id}{FEATURE_SUFFIX}')


def manifest_feature_files(m: Manifest, features_dir: str) -> 'list[str]':
    return [feature_path(features_dir, u) for u in m.utterances]


def write_labels(lf: LabelFile) -> str:
    return ''.join(' '.join(map(str, line.tolist())) + '\n' for line in lf.lines)


def read_labels(text: str, num_classes: 'int|None' = None) -> LabelFile:
    """Parses label text; values must lie in [0, num_classes) if given."""
    rows = text.split('\n')
    if rows[-1] == '':
        rows.pop()
    lines = []
    for lineno, line in enumerate(rows, start=1):
        try:
            values = np.array([int(v) for v in line.split()], dtype=np.int64)
        except ValueError as err:
            raise ValueError(f'Label line {lineno}: {err}') from err
        if len(values) and (values.min() < 0 or
                            (num_classes is not None and
                             values.max() >= num_classes)):
            raise ValueError(f'Label line {lineno}: value out of range')
        lines.append(values)
    return LabelFile(lines)


def shard(files: list,
          num_shards: int,
          sizes: 'list[int]|None' = None,
          ) -> 'list[list]':
    """Splits files into contiguous, order-preserving shards of similar size.

    A file goes to the shard whose equal-size slot contains its midpoint, so
    every shard total is within the largest file size of the mean.

    Args:
        files: The ordered items.
        num_shards: Shard count (>= 1); a shard may be empty.
        sizes: Weight of each file e.g. its frame count. Defaults to 1 each.

    """
    if num_shards < 1:
        raise ValueError(f'num_shards must be >= 1 (got {num_shards})')
    if sizes is None:
        sizes = [1] * len(files)
    if len(sizes) != len(files):
        raise ValueError('sizes must match files')
    weights = np.asarray(sizes, dtype=np.float64)
    if (weights < 0).any():
        raise ValueError('sizes must be non-negative')
    total = weights.sum()
    if total <= 0:
        weights = np.ones(len(files))
        total = float(len(files))
    shards = [[] for _ in range(num_shards)]
    if not len(files):
        return shards
    midpoints = np.cumsum(weights) - weights / 2
    slots = np.minimum((midpoints * num_shards / total).astype(np.int64),
                       num_shards - 1)
    for item, slot in zip(files, slots):
        shards[slot].append(item)
    return shards


def apply_labels(idx: Index,
                 feature_files: 'list[str]',
                 ef_search: int = DEFAULT_EF_SEARCH,
                 num_shards: 'int|None' = None,
                 threads: int = 1,
                 nan_policy: str = 'warn',
                 ) -> LabelFile:
    """Labels every feature file with the index, in input order.

    Files are split into contiguous shards processed by a thread pool; each
    worker owns its shard and results are merged in shard order, so output
    is identical for any shard or thread count.

    Returns:
        The LabelFile with `report` attached.

    Raises:
        LabelingError after all files are processed if any file failed.

    """
    files = list(feature_files)
    threads = max(1, threads)
    num_shards = num_shards or threads
    sizes = []
    for path in files:
        try:
            sizes.append(read_feature_header(path)[1])
        except (OSError, ValueError):
            sizes.append(0)
    shards = shard(list(range(len(files))), num_shards, sizes)
    lines: 'list[np.ndarray|None]' = [None] * len(files)
    failures: 'dict[str, str]' = {}
    lock = threading.Lock()
    started = time.monotonic()
    progress = tqdm(total=len(files), desc='labels', leave=False,
                    disable=None if PROGRESS else True)

    def work(positions: 'list[int]') -> 'dict[int, np.ndarray|str]':
        results = {}
        for pos in positions:
            path = files[pos]
            try:
                fm = load_features(path, nan_policy)
                results[pos] = index_assign(idx, fm.values, ef_search)
            except (OSError, ValueError) as err:
                _log.error(f'Failed to label {path}: {err}')
                results[pos] = f'{type(err).__name__}: {err}'
            with lock:
                progress.update(1)
        return results

    with ThreadPoolExecutor(max_workers=threads) as pool:
        for results in pool.map(work, shards):
            for pos, result in results.items():
                if isinstance(result, str):
                    failures[files[pos]] = result
                    lines[pos] = np.empty(0, dtype=np.int64)
                else:
                    lines[pos] = result
    progress.close()
    report = LabelingReport(files=len(files),
                            frames=int(sum(len(l) for l in lines)),
                            seconds=time.monotonic() - started,
                            failures=failures)
    _log.info(f'Labeled {report.files} files ({report.frames} frames) in'
              f' {report.seconds:.2f}s: {report.frames_per_second:.0f}'
              f' frames/s, {len(failures)} failures')
    labels = LabelFile(lines, report)
    if failures:
        raise LabelingError(failures, labels)
    return labels


def check_alignment(m: Manifest,
                    labels: LabelFile,
                    frame_rate_hz: float = 50.0,
                    tolerance_frames: int = 1,
                    ) -> 'list[str]':
    """Ids of utterances whose label count differs from their frame count.

    Raises:
        ValueError if the line count differs from the manifest size.

    """
    if len(labels) != len(m):
        raise ValueError(f'{len(labels)} label lines for {len(m)} manifest'
                         f' utterances')
    return [u.id for u, line in zip(m.utterances, labels.lines)
            if abs(len(line) - u.num_frames(frame_rate_hz)) > tolerance_frames]
