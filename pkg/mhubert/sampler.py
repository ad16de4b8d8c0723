"""Two-level language/source up-sampling and batch planning.

A language is drawn with probability proportional to `(n_l/N)**alpha`, then a
source within it proportional to `(n_l(x)/n_l)**beta`, then an utterance
uniformly from that (language, source) pool. The resulting epoch is sorted by
length (longest first) before it is cut into random-crop batches.
"""
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from mhubert.corpus import CorpusStats, Manifest, corpus_stats
from mhubert.rng import derive_seed, make_rng

DEFAULT_ALPHA = 0.7
DEFAULT_BETA = 0.9
DEFAULT_MAX_FRAMES = 2_800_000
DEFAULT_CROP_LEN = 400

_log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplingConfig:
    """Up-sampling hyper-parameters.

    Attributes:
        alpha (float): Language exponent in [0,1]; 1 means no up-sampling.
        beta (float): Source exponent in [0,1].
        seed (int): Seed of the draw.
        num_draws (int): Draws per epoch; `None` means the corpus size N.
        frame_rate_hz (float): Frame rate used to measure utterance length.
        mode (str): `two_level` or `flat` (every pair up-sampled as if it
            were its own language).

    """
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    seed: int = 0
    num_draws: 'int|None' = None
    frame_rate_hz: float = 50.0
    mode: str = 'two_level'

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError(f'alpha must be in [0,1] (got {self.alpha})')
        if not 0 <= self.beta <= 1:
            raise ValueError(f'beta must be in [0,1] (got {self.beta})')
        if self.num_draws is not None and self.num_draws < 0:
            raise ValueError('num_draws must be non-negative')
        if self.mode not in ('two_level', 'flat'):
            raise ValueError(f'Unknown sampling mode {self.mode}')


@dataclass
class LanguageDistribution:
    probs: 'dict[str, float]'


@dataclass
class SourceDistribution:
    probs: 'dict[str, dict[str, float]]'


@dataclass(eq=False)
class EpochPlan:
    """The utterances drawn for one epoch, longest first.

    Attributes:
        draws (np.ndarray): Manifest positions of the drawn utterances.
        frames (np.ndarray): Frame length of each draw.
        per_language_counts (dict): B_l, the draws per language.
        seed (int): The seed the plan was drawn with.

    """
    draws: np.ndarray
    frames: np.ndarray
    per_language_counts: 'dict[str, int]'
    seed: 'int|None' = None

    def __len__(self) -> int:
        return len(self.draws)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EpochPlan):
            return NotImplemented
        return (np.array_equal(self.draws, other.draws) and
                np.array_equal(self.frames, other.frames) and
                self.per_language_counts == other.per_language_counts)


@dataclass(frozen=True)
class Crop:
    """A window of `length` frames starting at `start` in draw `index`."""
    index: int
    start: int
    length: int


@dataclass
class BatchPlan:
    batches: 'list[list[Crop]]' = field(default_factory=list)
    max_frames: int = DEFAULT_MAX_FRAMES

    @property
    def total_frames(self) -> int:
        return sum(c.length for batch in self.batches for c in batch)


@dataclass
class PaddedBatchPlan:
    """Whole-utterance batches padded to their longest member."""
    batches: 'list[list[int]]' = field(default_factory=list)
    batch_lengths: 'list[int]' = field(default_factory=list)
    max_frames: int = DEFAULT_MAX_FRAMES
    real_frames: int = 0
    padded_frames: int = 0

    @property
    def padding_fraction(self) -> float:
        if not self.padded_frames:
            return 0.0
        return 1 - self.real_frames / self.padded_frames


def _power_normalize(counts: np.ndarray, total: float, exponent: float) -> np.ndarray:
    weights = np.power(counts / total, exponent)
    return weights / weights.sum()


def language_probs(stats: CorpusStats, alpha: float) -> LanguageDistribution:
    """P_l proportional to (n_l/N)**alpha."""
    if stats.total_examples <= 0:
        raise ValueError('Cannot compute language probabilities of an empty'
                         ' corpus')
    languages = sorted(stats.per_language)
    counts = np.array([stats.per_language[l] for l in languages], dtype=float)
    probs = _power_normalize(counts, stats.total_examples, alpha)
    return LanguageDistribution(dict(zip(languages, probs.tolist())))


def source_probs(stats: CorpusStats, beta: float) -> SourceDistribution:
    """P_x proportional to (n_l(x)/n_l)**beta, per language."""
    result = {}
    for language in sorted(stats.per_language):
        n_l = stats.per_language[language]
        if n_l <= 0:
            raise ValueError(f'Language {language} has no examples')
        sources = stats.sources(language)
        names = sorted(sources)
        counts = np.array([sources[s] for s in names], dtype=float)
        probs = _power_normalize(counts, n_l, beta)
        result[language] = dict(zip(names, probs.tolist()))
    return SourceDistribution(result)


def pair_probs(stats: CorpusStats, alpha: float) -> 'dict[tuple[str, str], float]':
    """Flat up-sampling treating every (language, source) pair as a language."""
    if stats.total_examples <= 0:
        raise ValueError('Cannot compute pair probabilities of an empty corpus')
    pairs = sorted(stats.per_pair)
    counts = np.array([stats.per_pair[p] for p in pairs], dtype=float)
    probs = _power_normalize(counts, stats.total_examples, alpha)
    return dict(zip(pairs, probs.tolist()))


def _pair_pools(m: Manifest) -> 'dict[tuple[str, str], np.ndarray]':
    pools: 'dict[tuple[str, str], list[int]]' = {}
    for i, u in enumerate(m.utterances):
        pools.setdefault(u.pair, []).append(i)
    return {pair: np.array(idx, dtype=np.int64) for pair, idx in pools.items()}


def _pair_table(stats: CorpusStats,
                cfg: SamplingConfig,
                ) -> 'tuple[list[tuple[str, str]], np.ndarray]':
    """Joint (language, source) probabilities for the configured mode."""
    if cfg.mode == 'flat':
        flat = pair_probs(stats, cfg.alpha)
        pairs = sorted(flat)
        return pairs, np.array([flat[p] for p in pairs])
    p_lang = language_probs(stats, cfg.alpha).probs
    p_src = source_probs(stats, cfg.beta).probs
    pairs, probs = [], []
    for language in sorted(p_src):
        for source, p in sorted(p_src[language].items()):
            pairs.append((language, source))
            probs.append(p_lang[language] * p)
    return pairs, np.array(probs)


def _draw_pairs(rng: np.random.Generator,
                stats: CorpusStats,
                cfg: SamplingConfig,
                size: int,
                pairs: 'list[tuple[str, str]]',
                ) -> np.ndarray:
    """Draws pair indices, language first then source within language."""
    if cfg.mode == 'flat':
        _, probs = _pair_table(stats, cfg)
        return rng.choice(len(pairs), size=size, p=probs)
    p_lang = language_probs(stats, cfg.alpha).probs
    p_src = source_probs(stats, cfg.beta).probs
    languages = sorted(p_lang)
    lang_draws = rng.choice(len(languages), size=size,
                            p=[p_lang[l] for l in languages])
    pair_index = {pair: i for i, pair in enumerate(pairs)}
    result = np.empty(size, dtype=np.int64)
    for li, language in enumerate(languages):
        where = np.flatnonzero(lang_draws == li)
        if not len(where):
            continue
        sources = sorted(p_src[language])
        src_draws = rng.choice(len(sources), size=len(where),
                               p=[p_src[language][s] for s in sources])
        lookup = np.array([pair_index[(language, s)] for s in sources])
        result[where] = lookup[src_draws]
    return result


def draw_epoch(m: Manifest, cfg: SamplingConfig = SamplingConfig()) -> EpochPlan:
    """Draws one epoch of utterances with two-level up-sampling.

    Draws are with replacement at every level. The returned draws are sorted
    by frame length, longest first, ties in manifest order.

    """
    if not len(m):
        raise ValueError('Cannot draw an epoch from an empty manifest')
    stats = corpus_stats(m)
    num_draws = stats.total_examples if cfg.num_draws is None else cfg.num_draws
    rng = make_rng(derive_seed(cfg.seed, 'epoch'))
    pools = _pair_pools(m)
    pairs, _ = _pair_table(stats, cfg)
    pair_draws = _draw_pairs(rng, stats, cfg, num_draws, pairs)
    draws = np.empty(num_draws, dtype=np.int64)
    for pi, pair in enumerate(pairs):
        where = np.flatnonzero(pair_draws == pi)
        if len(where):
            pool = pools[pair]
            draws[where] = pool[rng.integers(0, len(pool), size=len(where))]
    all_frames = np.array([u.num_frames(cfg.frame_rate_hz)
                           for u in m.utterances], dtype=np.int64)
    frames = all_frames[draws]
    order = np.lexsort((draws, -frames))
    draws, frames = draws[order], frames[order]
    languages = np.array([u.language for u in m.utterances])
    names, counts = np.unique(languages[draws], return_counts=True)
    per_language = {str(n): int(c) for n, c in zip(names, counts)}
    _log.info(f'Drew {num_draws} utterances ({cfg.mode}, alpha={cfg.alpha},'
              f' beta={cfg.beta}): {per_language}')
    return EpochPlan(draws, frames, per_language, cfg.seed)


def repeat_fraction(plan: EpochPlan, stats: 'CorpusStats|None' = None) -> float:
    """Fraction of an epoch spent on repeated draws, (N - distinct) / N."""
    if not len(plan):
        return 0.0
    if stats is not None and plan.draws.max() >= stats.total_examples:
        raise ValueError('Plan references utterances outside the corpus')
    distinct = len(np.unique(plan.draws))
    return (len(plan) - distinct) / len(plan)


def budget_sample(m: Manifest,
                  cfg: SamplingConfig,
                  budget_bytes: int,
                  feature_dim: int,
                  frame_rate_hz: float = 50.0,
                  bytes_per_value: int = 4,
                  block: int = 4096,
                  ) -> 'list[int]':
    """Samples clustering data with the training distribution under a budget.

    Pairs are drawn with the two-level distribution; within a pool utterances
    are taken without replacement in a seeded shuffled order, reshuffled
    when the pool is exhausted. Sampling stops at the first utterance whose
    features would exceed the remaining budget. Utterances shorter than one
    frame cost nothing and are never selected.

    Returns:
        Manifest positions of the selected utterances in draw order.

    """
    if budget_bytes <= 0:
        raise ValueError('budget_bytes must be positive')
    cost = np.array([u.num_frames(frame_rate_hz) * feature_dim *
                     bytes_per_value for u in m.utterances], dtype=np.int64)
    positions = np.flatnonzero(cost > 0)
    if not len(positions):
        if len(m):
            _log.warning('No utterance spans a full frame; budget sample'
                         ' is empty')
        return []
    if len(positions) < len(m):
        _log.warning(f'Skipping {len(m) - len(positions)} utterances shorter'
                     f' than one frame')
        m = m.replace(m[int(p)] for p in positions)
        cost = cost[positions]
    stats = corpus_stats(m)
    rng = make_rng(derive_seed(cfg.seed, 'budget'))
    pools = _pair_pools(m)
    pairs, _ = _pair_table(stats, cfg)
    if budget_bytes < cost.min():
        _log.warning(f'Budget {budget_bytes} B is smaller than the smallest'
                     f' utterance ({cost.min()} B)')
        return []
    queues = {pair: [] for pair in pairs}
    selected = []
    used = 0
    while True:
        for pi in _draw_pairs(rng, stats, cfg, block, pairs):
            pair = pairs[pi]
            if not queues[pair]:
                queues[pair] = list(rng.permutation(pools[pair])[::-1])
            candidate = int(queues[pair][-1])
            if used + cost[candidate] > budget_bytes:
                _log.info(f'Budget sample: {len(selected)} utterances,'
                          f' {used} of {budget_bytes} bytes')
                if not selected:
                    _log.warning('Budget sample is empty')
                return [int(positions[c]) for c in selected]
            queues[pair].pop()
            selected.append(candidate)
            used += int(cost[candidate])


def plan_batches(plan: EpochPlan,
                 max_frames: int = DEFAULT_MAX_FRAMES,
                 crop_len: int = DEFAULT_CROP_LEN,
                 seed: 'int|None' = None,
                 ) -> BatchPlan:
    """Cuts a length-sorted epoch into random-crop batches.

    Utterances longer than `crop_len` contribute a uniformly placed window of
    `crop_len` frames, shorter ones enter whole. A batch is closed when the
    next crop would take it over `max_frames`. No padding is represented.

    """
    if crop_len > max_frames:
        raise ValueError(f'crop_len ({crop_len}) exceeds max_frames'
                         f' ({max_frames})')
    if crop_len <= 0:
        raise ValueError('crop_len must be positive')
    if seed is None:
        seed = derive_seed(plan.seed or 0, 'crop')
    rng = make_rng(seed)
    frames = np.asarray(plan.frames, dtype=np.int64)
    lengths = np.minimum(frames, crop_len)
    slack = np.maximum(frames - crop_len, 0)
    starts = rng.integers(0, slack + 1)
    result = BatchPlan(max_frames=max_frames)
    batch, total = [], 0
    for i in range(len(frames)):
        length = int(lengths[i])
        if length <= 0:
            _log.debug(f'Skipping zero-length draw {i}')
            continue
        if total + length > max_frames:
            result.batches.append(batch)
            batch, total = [], 0
        batch.append(Crop(int(plan.draws[i]), int(starts[i]), length))
        total += length
    if batch:
        result.batches.append(batch)
    _log.info(f'Planned {len(result.batches)} crop batches of <= {max_frames}'
              f' frames')
    return result


def plan_padded_batches(plan: EpochPlan,
                        max_frames: int = DEFAULT_MAX_FRAMES,
                        ) -> PaddedBatchPlan:
    """Batches whole utterances, padding each batch to its longest member.

    A batch of k utterances occupies k times its longest length; utterances
    longer than `max_frames` are truncated to it.

    """
    result = PaddedBatchPlan(max_frames=max_frames)
    batch, longest = [], 0
    for i, f in enumerate(np.asarray(plan.frames, dtype=np.int64)):
        length = min(int(f), max_frames)
        if length <= 0:
            continue
        if batch and (len(batch) + 1) * max(longest, length) > max_frames:
            result.batches.append(batch)
            result.batch_lengths.append(longest)
            result.padded_frames += len(batch) * longest
            batch, longest = [], 0
        batch.append(int(plan.draws[i]))
        longest = max(longest, length)
        result.real_frames += length
    if batch:
        result.batches.append(batch)
        result.batch_lengths.append(longest)
        result.padded_frames += len(batch) * longest
    return result


def write_epoch_plan(plan: EpochPlan, m: Manifest) -> str:
    """Serializes an epoch plan as JSON lines, one draw per line."""
    lines = []
    for index, frames in zip(plan.draws.tolist(), plan.frames.tolist()):
        u = m[index]
        lines.append(json.dumps({'index': index, 'id': u.id,
                                 'language': u.language, 'source': u.source,
                                 'frames': frames}))
    return ''.join(f'{line}\n' for line in lines)


def read_epoch_plan(text: str) -> EpochPlan:
    draws, frames, counts = [], [], {}
    for line in text.splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        draws.append(int(record['index']))
        frames.append(int(record['frames']))
        counts[record['language']] = counts.get(record['language'], 0) + 1
    return EpochPlan(np.array(draws, dtype=np.int64),
                     np.array(frames, dtype=np.int64),
                     dict(sorted(counts.items())))


def write_batch_plan(bp: BatchPlan) -> str:
    """Serializes a batch plan as JSON lines, one batch per line."""
    lines = []
    for i, batch in enumerate(bp.batches):
        lines.append(json.dumps({'batch': i,
                                 'frames': sum(c.length for c in batch),
                                 'crops': [[c.index, c.start, c.length]
                                           for c in batch]}))
    return ''.join(f'{line}\n' for line in lines)


def read_batch_plan(text: str, max_frames: int = DEFAULT_MAX_FRAMES) -> BatchPlan:
    bp = BatchPlan(max_frames=max_frames)
    for line in text.splitlines():
        if line.strip():
            record = json.loads(line)
            bp.batches.append([Crop(*c) for c in record['crops']])
    return bp
