"""Pipeline configuration loaded from one TOML or JSON file.

Example TOML::

    [paths]
    manifest = "data/train.tsv"
    features_dir = "data/features"

    [sampling]
    alpha = 0.7
    seed = 42

    [index]
    config = "OPQ16_64,IVF1000_HNSW32,PQ16x4fsr"

Every section and key is optional; unknown ones are rejected.
"""
import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace

from mhubert.corpus import MAX_DURATION_S, MIN_DURATION_S
from mhubert.pretext import DEFAULT_MASK_PROB, DEFAULT_PSI, DEFAULT_SPAN_LEN
from mhubert.quantizer.index import (
    DEFAULT_INDEX_CONFIG,
    TRAIN_CAP_PER_CENTROID,
    parse_index_config,
)
from mhubert.quantizer.hnsw import DEFAULT_EF_CONSTRUCTION, DEFAULT_EF_SEARCH
from mhubert.quantizer.kmeans import DEFAULT_ITERS
from mhubert.quantizer.opq import DEFAULT_OPQ_ITERS
from mhubert.sampler import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_CROP_LEN,
    DEFAULT_MAX_FRAMES,
    SamplingConfig,
)
from mhubert.segfilter import FilterThresholds

_log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PathsConfig:
    manifest: 'str|None' = None
    features_dir: 'str|None' = None
    annotations: 'str|None' = None
    index: 'str|None' = None
    labels: 'str|None' = None
    plans: 'str|None' = None


@dataclass(frozen=True)
class SamplingSection:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    seed: int = 0
    num_draws: 'int|None' = None
    mode: str = 'two_level'
    frame_rate_hz: float = 50.0

    def __post_init__(self):
        self.sampling_config()

    def sampling_config(self, seed: 'int|None' = None) -> SamplingConfig:
        return SamplingConfig(self.alpha, self.beta,
                              self.seed if seed is None else seed,
                              self.num_draws, self.frame_rate_hz, self.mode)


@dataclass(frozen=True)
class IndexSection:
    config: str = DEFAULT_INDEX_CONFIG
    ef_search: int = DEFAULT_EF_SEARCH
    ef_construction: int = DEFAULT_EF_CONSTRUCTION
    kmeans_iters: int = DEFAULT_ITERS
    opq_iters: int = DEFAULT_OPQ_ITERS
    train_cap_per_centroid: int = TRAIN_CAP_PER_CENTROID

    def __post_init__(self):
        self.index_config()
        if self.ef_search < 1:
            raise ValueError('ef_search must be >= 1')

    def index_config(self):
        return parse_index_config(
            self.config,
            kmeans_iters=self.kmeans_iters,
            opq_iters=self.opq_iters,
            ef_construction=self.ef_construction,
            train_cap_per_centroid=self.train_cap_per_centroid)


@dataclass(frozen=True)
class ThresholdSection:
    music_s: float = 2.0
    noise_s: float = 2.0
    no_energy_s: float = 5.0
    min_duration_s: float = MIN_DURATION_S
    max_duration_s: float = MAX_DURATION_S

    def __post_init__(self):
        self.filter_thresholds()
        if not self.min_duration_s < self.max_duration_s:
            raise ValueError('min_duration_s must be less than max_duration_s')

    def filter_thresholds(self) -> FilterThresholds:
        return FilterThresholds(self.music_s, self.noise_s, self.no_energy_s)


@dataclass(frozen=True)
class BatchSection:
    max_frames: int = DEFAULT_MAX_FRAMES
    crop_len: int = DEFAULT_CROP_LEN

    def __post_init__(self):
        if not 0 < self.crop_len <= self.max_frames:
            raise ValueError('Need 0 < crop_len <= max_frames')


@dataclass(frozen=True)
class LossSection:
    psi: float = DEFAULT_PSI
    mask_prob: float = DEFAULT_MASK_PROB
    span_len: int = DEFAULT_SPAN_LEN

    def __post_init__(self):
        if not 0 <= self.psi <= 1:
            raise ValueError('psi must be in [0,1]')
        if not 0 <= self.mask_prob <= 1:
            raise ValueError('mask_prob must be in [0,1]')
        if self.span_len < 1:
            raise ValueError('span_len must be >= 1')


@dataclass(frozen=True)
class PipelineConfig:
    """All pipeline settings, one dataclass per section."""
    paths: PathsConfig = field(default_factory=PathsConfig)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    index: IndexSection = field(default_factory=IndexSection)
    thresholds: ThresholdSection = field(default_factory=ThresholdSection)
    batch: BatchSection = field(default_factory=BatchSection)
    loss: LossSection = field(default_factory=LossSection)

    @classmethod
    def from_dict(cls, data: dict) -> 'PipelineConfig':
        sections = {f.name: f.default_factory for f in fields(cls)}
        unknown = set(data) - set(sections)
        if unknown:
            raise ValueError(f'Unknown config sections {sorted(unknown)}')
        kwargs = {}
        for name, values in data.items():
            section_cls = sections[name]
            if not isinstance(values, dict):
                raise ValueError(f'Config section [{name}] must be a table')
            allowed = {f.name for f in fields(section_cls)}
            bad = set(values) - allowed
            if bad:
                raise ValueError(f'Unknown keys {sorted(bad)} in [{name}]')
            kwargs[name] = section_cls(**values)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    def override(self, section: str, **values) -> 'PipelineConfig':
        """Returns a copy with the non-None values replacing a section's."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        return replace(self, **{section: replace(getattr(self, section),
                                                 **values)})


def load_config(path: 'str|None') -> PipelineConfig:
    """Loads a `.toml` or `.json` config; `None` gives the defaults."""
    if path is None:
        return PipelineConfig()
    if not os.path.isfile(path):
        raise FileNotFoundError(f'Config file {path} not found')
    if path.endswith('.json'):
        with open(path, encoding='utf-8') as f:
            data = json.load(f)
    else:
        with open(path, 'rb') as f:
            data = tomllib.load(f)
    _log.debug(f'Loaded config {path}')
    return PipelineConfig.from_dict(data)
