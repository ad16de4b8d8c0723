from .corpus import (
    CorpusStats,
    Manifest,
    ManifestError,
    Utterance,
    carve_validation,
    concat_short,
    corpus_stats,
    estimate_storage,
    filter_durations,
    parse_manifest,
    write_manifest,
)
from .labeler import (
    FeatureMatrix,
    LabelFile,
    LabelingError,
    apply_labels,
    read_features,
    shard,
    write_features,
)
from .pretext import LossInputs, MaskSpec, gen_mask_spans, hubert_loss
from .sampler import (
    EpochPlan,
    SamplingConfig,
    budget_sample,
    draw_epoch,
    language_probs,
    plan_batches,
    repeat_fraction,
    source_probs,
)
from .scoreboard import Direction, MetricEntry, superb_score
from .segfilter import (
    FileKind,
    FilterThresholds,
    SegmentAnnotation,
    SegmentEvent,
    classify_file,
    filter_manifest,
)
