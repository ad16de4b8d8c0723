"""Command line orchestration of the labeling pipeline.

Every subcommand prints a JSON report on stdout (see `REPORT_SCHEMA`) and a
one-line summary on stderr. Exit codes: 0 success, 1 input error, 2 partial
failure, 3 internal error.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from mhubert.config import PipelineConfig, load_config
from mhubert.corpus import (
    apply_concat_plan,
    carve_validation,
    concat_short,
    corpus_stats,
    estimate_audio_storage,
    estimate_label_storage,
    estimate_labeling_time,
    estimate_storage,
    filter_durations,
    format_storage,
    language_hours,
    load_manifest,
    write_manifest,
)
from mhubert.labeler import (
    LabelingError,
    apply_labels,
    check_alignment,
    feature_path,
    load_features,
    manifest_feature_files,
    read_feature_header,
    read_labels,
    write_labels,
)
from mhubert.pretext import (
    LossInputs,
    batch_loss,
    gen_mask_spans,
    hubert_loss,
    mask_fraction,
)
from mhubert.quantizer import load_index, train_index, write_index
from mhubert.rng import derive_seed
from mhubert.sampler import (
    budget_sample,
    draw_epoch,
    plan_batches,
    plan_padded_batches,
    read_epoch_plan,
    repeat_fraction,
    write_batch_plan,
    write_epoch_plan,
)
from mhubert.scoreboard import normalized_scores, read_metrics, superb_score
from mhubert.segfilter import (
    bucket_noise,
    filter_manifest,
    noise_by_language,
    read_annotations,
)

LOG_FORMAT = ('%(asctime)s.%(msecs)03dZ,[%(levelname)s],(%(threadName)s)'
              '%(module)s.%(funcName)s:%(lineno)d, %(message)s')
MHUB_LOG_LEVEL = os.getenv('MHUB_LOG_LEVEL', 'INFO')
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')

EPOCH_PLAN = 'epoch.jsonl'
BATCH_PLAN = 'batches.jsonl'

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_PARTIAL = 2
EXIT_INTERNAL = 3

REPORT_SCHEMA = {
    '$schema': 'https://json-schema.org/draft/2020-12/schema',
    'title': 'mhubert command report',
    'type': 'object',
    'required': ['command', 'status', 'code', 'seconds', 'outputs', 'result'],
    'properties': {
        'command': {'type': 'string'},
        'status': {'enum': ['ok', 'partial', 'error']},
        'code': {'type': 'integer', 'enum': [0, 1, 2, 3]},
        'seconds': {'type': 'number', 'minimum': 0},
        'outputs': {
            'type': 'object',
            'additionalProperties': {'type': 'string',
                                     'pattern': '^[0-9a-f]{64}$'},
        },
        'result': {'type': 'object'},
        'summary': {'type': 'string'},
        'error': {'type': 'string'},
        'message': {'type': 'string'},
    },
    'additionalProperties': False,
}

_log = logging.getLogger(__name__)


@dataclass
class _Context:
    """State shared by a subcommand run."""
    cfg: PipelineConfig
    threads: int
    outputs: 'dict[str, str]' = field(default_factory=dict)
    code: int = EXIT_OK

    @property
    def seed(self) -> int:
        return self.cfg.sampling.seed

    def write(self, path: str, data: 'str|bytes') -> None:
        """Writes an output file and records its SHA-256 digest."""
        raw = data.encode('utf-8') if isinstance(data, str) else data
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(raw)
        self.outputs[path] = hashlib.sha256(raw).hexdigest()


def _input(path: 'str|None', configured: 'str|None', name: str) -> str:
    path = path or configured
    if not path:
        raise ValueError(f'Missing {name} path (flag or config)')
    if not os.path.exists(path):
        raise FileNotFoundError(f'{name} {path} not found')
    return path


def _output(path: 'str|None', name: str) -> str:
    if not path:
        raise ValueError(f'Missing --{name}')
    return path


def _plan_file(ctx: '_Context', name: str) -> 'str|None':
    """`<paths.plans>/<name>` when a plans directory is configured."""
    plans = ctx.cfg.paths.plans
    return os.path.join(plans, name) if plans else None


def _threads(requested: 'int|None') -> int:
    if requested:
        return max(1, requested)
    env = os.getenv('MHUB_THREADS')
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _manifest_validate(args, ctx: _Context):
    m = load_manifest(_input(args.manifest, ctx.cfg.paths.manifest, 'manifest'))
    stats = corpus_stats(m)
    t = ctx.cfg.thresholds
    out_of_range = sum(1 for u in m.utterances
                       if not t.min_duration_s <= u.duration_s <= t.max_duration_s)
    result = {'utterances': len(m), 'languages': len(stats.per_language),
              'pairs': len(stats.per_pair), 'hours': stats.total_hours,
              'out_of_range': out_of_range}
    return result, f'{len(m)} utterances, {len(stats.per_language)} languages'


def _manifest_filter(args, ctx: _Context):
    m = load_manifest(_input(args.manifest, ctx.cfg.paths.manifest, 'manifest'))
    cfg = ctx.cfg.override('thresholds', min_duration_s=args.min_s,
                           max_duration_s=args.max_s).thresholds
    kept, dropped = filter_durations(m, cfg.min_duration_s, cfg.max_duration_s)
    ctx.write(_output(args.out, 'out'), write_manifest(kept))
    return ({'kept': len(kept), 'dropped': len(dropped),
             'dropped_ids': [u.id for u in dropped]},
            f'kept {len(kept)} dropped {len(dropped)}')


def _manifest_concat(args, ctx: _Context):
    m = load_manifest(_input(args.manifest, ctx.cfg.paths.manifest, 'manifest'))
    target = args.target_min_s or ctx.cfg.thresholds.min_duration_s
    plan = concat_short(m, target)
    joined = apply_concat_plan(m, plan)
    ctx.write(_output(args.out, 'out'), write_manifest(joined))
    return ({'groups': len(plan.groups), 'flagged': len(plan.flagged),
             'utterances': len(joined),
             'flagged_ids': [list(g.ids) for g in plan.flagged]},
            f'{len(plan.groups)} groups, {len(plan.flagged)} under target')


def _manifest_carve(args, ctx: _Context):
    m = load_manifest(_input(args.manifest, ctx.cfg.paths.manifest, 'manifest'))
    valid = carve_validation(m, args.per_pair,
                             seed=derive_seed(ctx.seed, 'manifest', 'carve'))
    ctx.write(_output(args.out, 'out'), write_manifest(valid))
    return ({'utterances': len(valid), 'pairs': len(corpus_stats(m).per_pair)},
            f'{len(valid)} validation utterances')


def _manifest_stats(args, ctx: _Context):
    m = load_manifest(_input(args.manifest, ctx.cfg.paths.manifest, 'manifest'))
    stats = corpus_stats(m)
    result = {'total_examples': stats.total_examples,
              'total_hours': stats.total_hours,
              'per_language': dict(sorted(stats.per_language.items())),
              'per_pair': {f'{l}/{s}': n
                           for (l, s), n in sorted(stats.per_pair.items())},
              'language_hours': dict(sorted(language_hours(m).items()))}
    return result, f'{stats.total_examples} utterances, {stats.total_hours:.2f} h'


def _segfilter(args, ctx: _Context):
    m = load_manifest(_input(args.manifest, ctx.cfg.paths.manifest, 'manifest'))
    path = _input(args.annotations, ctx.cfg.paths.annotations, 'annotations')
    with open(path, encoding='utf-8') as f:
        annotations = read_annotations(f.read())
    t = ctx.cfg.override('thresholds', music_s=args.music_s,
                         noise_s=args.noise_s,
                         no_energy_s=args.no_energy_s).thresholds
    thresholds = t.filter_thresholds()
    kept, report = filter_manifest(m, annotations, thresholds)
    ctx.write(_output(args.out, 'out'), write_manifest(kept))
    noise = noise_by_language(m, annotations, thresholds)
    return ({'counts': report.counts, 'kept': len(kept),
             'removed': report.removed,
             'noise_by_language': dict(sorted(noise.items())),
             'noise_buckets': bucket_noise(noise)},
            f'kept {len(kept)}, removed {report.removed}')


def _plan_epoch(args, ctx: _Context):
    m = load_manifest(_input(args.manifest, ctx.cfg.paths.manifest, 'manifest'))
    section = ctx.cfg.override('sampling', alpha=args.alpha, beta=args.beta,
                               num_draws=args.num_draws,
                               mode=args.mode).sampling
    plan = draw_epoch(m, section.sampling_config(
        seed=derive_seed(ctx.seed, 'plan', 'epoch')))
    ctx.write(_output(args.out or _plan_file(ctx, EPOCH_PLAN), 'out'),
              write_epoch_plan(plan, m))
    fraction = repeat_fraction(plan, corpus_stats(m))
    return ({'draws': len(plan), 'per_language': plan.per_language_counts,
             'repeat_fraction': fraction, 'alpha': section.alpha,
             'beta': section.beta, 'mode': section.mode},
            f'{len(plan)} draws, repeat fraction {fraction:.3f}')


def _plan_batches(args, ctx: _Context):
    path = _input(args.epoch, _plan_file(ctx, EPOCH_PLAN), 'epoch plan')
    with open(path, encoding='utf-8') as f:
        plan = read_epoch_plan(f.read())
    batch = ctx.cfg.override('batch', max_frames=args.max_frames,
                             crop_len=args.crop_len).batch
    bp = plan_batches(plan, batch.max_frames, batch.crop_len,
                      seed=derive_seed(ctx.seed, 'plan', 'crop'))
    ctx.write(_output(args.out or _plan_file(ctx, BATCH_PLAN), 'out'),
              write_batch_plan(bp))
    padded = plan_padded_batches(plan, batch.max_frames)
    return ({'batches': len(bp.batches), 'frames': bp.total_frames,
             'max_frames': batch.max_frames, 'crop_len': batch.crop_len,
             'padded_batches': len(padded.batches),
             'padding_fraction': padded.padding_fraction},
            f'{len(bp.batches)} crop batches vs {len(padded.batches)} padded')


def _index_train(args, ctx: _Context):
    m = load_manifest(_input(args.manifest, ctx.cfg.paths.manifest, 'manifest'))
    features_dir = _input(args.features_dir, ctx.cfg.paths.features_dir,
                          'features directory')
    section = ctx.cfg.override('index', config=args.index_config).index
    files = manifest_feature_files(m, features_dir)
    positions = list(range(len(m)))
    if args.budget_bytes:
        dim = read_feature_header(files[0])[0] if files else 1
        positions = budget_sample(m, ctx.cfg.sampling.sampling_config(
            seed=derive_seed(ctx.seed, 'index', 'budget')), args.budget_bytes,
            dim, ctx.cfg.sampling.frame_rate_hz)
    data = [load_features(files[p]).values for p in positions]
    if not data:
        raise ValueError('No training features selected')
    dims = {d.shape[1] for d in data}
    if len(dims) != 1:
        raise ValueError(f'Inconsistent feature dims {sorted(dims)}')
    matrix = np.concatenate(data)
    idx = train_index(matrix, section.index_config(),
                      seed=derive_seed(ctx.seed, 'index'), threads=ctx.threads)
    out = _output(args.out or ctx.cfg.paths.index, 'out')
    ctx.write(out, write_index(idx))
    return ({'config': idx.config.describe(), 'K': idx.K, 'd_in': idx.d_in,
             'd_out': idx.d_out, 'frames': len(matrix),
             'utterances': len(positions), 'inertia': idx.coarse.inertia},
            f'trained {idx.config.describe()} on {len(matrix)} frames')


def _index_apply(args, ctx: _Context):
    m = load_manifest(_input(args.manifest, ctx.cfg.paths.manifest, 'manifest'))
    features_dir = _input(args.features_dir, ctx.cfg.paths.features_dir,
                          'features directory')
    idx = load_index(_input(args.index, ctx.cfg.paths.index, 'index'))
    ef = args.ef_search or ctx.cfg.index.ef_search
    out = _output(args.out or ctx.cfg.paths.labels, 'out')
    files = manifest_feature_files(m, features_dir)
    try:
        labels = apply_labels(idx, files, ef, num_shards=args.shards,
                              threads=ctx.threads)
    except LabelingError as err:
        labels = err.partial
        ctx.code = EXIT_PARTIAL
    ctx.write(out, write_labels(labels))
    report = labels.report
    mismatched = check_alignment(m, labels, ctx.cfg.sampling.frame_rate_hz)
    return ({'files': report.files, 'frames': report.frames,
             'frames_per_second': report.frames_per_second,
             'failures': report.failures, 'misaligned': mismatched,
             'K': idx.K, 'ef_search': ef},
            f'labeled {report.files} files, {len(report.failures)} failures,'
            f' {report.frames_per_second:.0f} frames/s')


def _loss_eval(args, ctx: _Context):
    m = load_manifest(_input(args.manifest, ctx.cfg.paths.manifest, 'manifest'))
    with open(_input(args.labels, ctx.cfg.paths.labels, 'labels'),
              encoding='utf-8') as f:
        labels = read_labels(f.read())
    logits_dir = _input(args.logits_dir, None, 'logits directory')
    loss = ctx.cfg.override('loss', psi=args.psi, mask_prob=args.mask_prob,
                            span_len=args.span_len).loss
    if len(labels) != len(m):
        raise ValueError(f'{len(labels)} label lines for {len(m)} utterances')
    batch, masked, unmasked, coverage = [], [], [], []
    max_grad_row_sum = 0.0
    for i, u in enumerate(m.utterances):
        logits = load_features(feature_path(logits_dir, u)).values
        if len(logits) != len(labels.lines[i]):
            raise ValueError(f'{u.id}: {len(logits)} logit rows for'
                             f' {len(labels.lines[i])} labels')
        if not len(logits):
            continue
        spec = gen_mask_spans(len(logits), loss.mask_prob, loss.span_len,
                              seed=derive_seed(ctx.seed, 'loss', str(i)))
        inputs = LossInputs(logits, labels.lines[i], spec, loss.psi)
        out = hubert_loss(inputs, args.reduction)
        batch.append(inputs)
        masked.append(out.masked)
        unmasked.append(out.unmasked)
        coverage.append(mask_fraction(spec))
        max_grad_row_sum = max(max_grad_row_sum,
                               float(np.abs(out.grad.sum(axis=1)).max()))
    if not batch:
        raise ValueError('No frames to evaluate')
    total = batch_loss(batch, args.reduction)
    return ({'loss': total, 'masked': float(np.mean(masked)),
             'unmasked': float(np.mean(unmasked)),
             'mask_fraction': float(np.mean(coverage)),
             'max_grad_row_sum': max_grad_row_sum, 'utterances': len(batch),
             'psi': loss.psi},
            f'loss {total:.4f}')


def _score(args, ctx: _Context):
    with open(_input(args.metrics, None, 'metrics'), encoding='utf-8') as f:
        entries = read_metrics(f.read())
    score = superb_score(entries, clip=args.clip, aggregate=args.aggregate)
    return ({'score': score,
             'normalized': normalized_scores(entries, clip=args.clip)},
            f'{score:.1f}')


def _budget_estimate(args, ctx: _Context):
    features = estimate_storage(args.hours, args.dim, args.fps,
                                args.bytes_per_value)
    audio = estimate_audio_storage(args.hours)
    labels = estimate_label_storage(args.hours)
    seconds = estimate_labeling_time(args.hours, args.seconds_per_10h)
    return ({'bytes': features, 'terabytes': features / 1e12,
             'tebibytes': features / 2**40,
             'human': format_storage(features),
             'audio_bytes': audio, 'audio_human': format_storage(audio),
             'label_bytes': labels, 'labeling_hours': seconds / 3600},
            f'features {format_storage(features)}')


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help='TOML or JSON pipeline config')
    parser.add_argument('--threads', type=int,
                        help='Worker threads (default MHUB_THREADS or CPUs)')
    parser.add_argument('--log-level', default=None,
                        help='Logging level (default MHUB_LOG_LEVEL or INFO)')
    parser.add_argument('--report', help='Also write the JSON report here')
    parser.add_argument('--seed', type=int, help='Root seed override')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='mhubert',
        description='Multilingual HuBERT data curation and labeling pipeline.')
    commands = parser.add_subparsers(dest='command', required=True)

    def leaf(group, name: str, handler, help_text: str):
        p = group.add_parser(name, help=help_text)
        _common(p)
        p.set_defaults(handler=handler)
        return p

    manifest = commands.add_parser('manifest', help='Manifest curation')
    mcmd = manifest.add_subparsers(dest='action', required=True)
    p = leaf(mcmd, 'validate', _manifest_validate, 'Parse and check a manifest')
    p.add_argument('--manifest')
    p = leaf(mcmd, 'filter', _manifest_filter, 'Drop out-of-range durations')
    p.add_argument('--manifest')
    p.add_argument('--out')
    p.add_argument('--min-s', type=float)
    p.add_argument('--max-s', type=float)
    p = leaf(mcmd, 'concat', _manifest_concat, 'Join short utterances')
    p.add_argument('--manifest')
    p.add_argument('--out')
    p.add_argument('--target-min-s', type=float)
    p = leaf(mcmd, 'carve', _manifest_carve, 'Sample a validation manifest')
    p.add_argument('--manifest')
    p.add_argument('--out')
    p.add_argument('--per-pair', type=int, default=5)
    p = leaf(mcmd, 'stats', _manifest_stats, 'Corpus statistics')
    p.add_argument('--manifest')

    p = leaf(commands, 'segfilter', _segfilter, 'Remove music and noise')
    p.add_argument('--manifest')
    p.add_argument('--annotations')
    p.add_argument('--out')
    p.add_argument('--music-s', type=float)
    p.add_argument('--noise-s', type=float)
    p.add_argument('--no-energy-s', type=float)

    plan = commands.add_parser('plan', help='Sampling plans')
    pcmd = plan.add_subparsers(dest='action', required=True)
    p = leaf(pcmd, 'epoch', _plan_epoch, 'Draw an up-sampled epoch')
    p.add_argument('--manifest')
    p.add_argument('--out')
    p.add_argument('--alpha', type=float)
    p.add_argument('--beta', type=float)
    p.add_argument('--num-draws', type=int)
    p.add_argument('--mode', choices=['two_level', 'flat'])
    p = leaf(pcmd, 'batches', _plan_batches, 'Cut an epoch into crop batches')
    p.add_argument('--epoch')
    p.add_argument('--out')
    p.add_argument('--max-frames', type=int)
    p.add_argument('--crop-len', type=int)

    index = commands.add_parser('index', help='Labeling index')
    icmd = index.add_subparsers(dest='action', required=True)
    p = leaf(icmd, 'train', _index_train, 'Train an index on features')
    p.add_argument('--manifest')
    p.add_argument('--features-dir')
    p.add_argument('--out')
    p.add_argument('--index-config')
    p.add_argument('--budget-bytes', type=int)
    p = leaf(icmd, 'apply', _index_apply, 'Label features with an index')
    p.add_argument('--manifest')
    p.add_argument('--features-dir')
    p.add_argument('--index')
    p.add_argument('--out')
    p.add_argument('--ef-search', type=int)
    p.add_argument('--shards', type=int)

    loss = commands.add_parser('loss', help='Pretext loss')
    lcmd = loss.add_subparsers(dest='action', required=True)
    p = leaf(lcmd, 'eval', _loss_eval, 'Evaluate the loss on logit files')
    p.add_argument('--manifest')
    p.add_argument('--labels')
    p.add_argument('--logits-dir')
    p.add_argument('--psi', type=float)
    p.add_argument('--mask-prob', type=float)
    p.add_argument('--span-len', type=int)
    p.add_argument('--reduction', choices=['mean', 'sum'], default='mean')

    p = leaf(commands, 'score', _score, 'SOTA-normalized aggregate score')
    p.add_argument('--metrics')
    p.add_argument('--clip', action='store_true')
    p.add_argument('--aggregate', choices=['mean', 'group_mean'],
                   default='mean')

    budget = commands.add_parser('budget', help='Storage arithmetic')
    bcmd = budget.add_subparsers(dest='action', required=True)
    p = leaf(bcmd, 'estimate', _budget_estimate, 'Estimate storage needs')
    p.add_argument('--hours', type=float, required=True)
    p.add_argument('--dim', type=int, required=True)
    p.add_argument('--fps', type=float, required=True)
    p.add_argument('--bytes-per-value', type=int, default=4)
    p.add_argument('--seconds-per-10h', type=float, default=21.0)

    p = commands.add_parser('schema', help='Print the report JSON schema')
    p.set_defaults(handler=None)
    return parser


def _command_name(args) -> str:
    action = getattr(args, 'action', None)
    return f'{args.command} {action}' if action else args.command


def run(args: argparse.Namespace) -> 'tuple[int, dict]':
    """Runs a parsed subcommand and returns (exit code, report)."""
    command = _command_name(args)
    started = time.monotonic()
    ctx = None
    try:
        cfg = load_config(args.config)
        cfg = cfg.override('sampling', seed=args.seed)
        ctx = _Context(cfg, _threads(args.threads))
        result, summary = args.handler(args, ctx)
        code = ctx.code
        report = {'command': command,
                  'status': 'ok' if code == EXIT_OK else 'partial',
                  'code': code, 'result': result, 'summary': summary}
    except (ValueError, OSError, KeyError) as err:
        _log.error(f'{command}: {err}')
        code = EXIT_INPUT
        report = {'command': command, 'status': 'error', 'code': code,
                  'result': {}, 'error': type(err).__name__,
                  'message': str(err)}
    except Exception as err:   # pylint: disable=broad-except
        _log.exception(f'{command} failed')
        code = EXIT_INTERNAL
        report = {'command': command, 'status': 'error', 'code': code,
                  'result': {}, 'error': type(err).__name__,
                  'message': str(err)}
    report['outputs'] = dict(ctx.outputs) if ctx else {}
    report['seconds'] = time.monotonic() - started
    return code, report


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f'{type(value).__name__} is not JSON serializable')


def main(argv: 'list[str]|None' = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (getattr(args, 'log_level', None) or MHUB_LOG_LEVEL).upper()
    logging.basicConfig(format=LOG_FORMAT)
    if level not in LOG_LEVELS:
        report = {'command': _command_name(args), 'status': 'error',
                  'code': EXIT_INPUT, 'seconds': 0.0, 'outputs': {},
                  'result': {}, 'error': 'ValueError',
                  'message': f'Unknown log level {level!r},'
                             f' expected one of {list(LOG_LEVELS)}'}
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_INPUT
    logging.getLogger().setLevel(level)
    if args.handler is None:
        print(json.dumps(REPORT_SCHEMA, indent=2))
        return EXIT_OK
    code, report = run(args)
    text = json.dumps(report, indent=2, sort_keys=True, default=_json_default)
    print(text)
    if args.report:
        with open(args.report, 'w', encoding='utf-8') as f:
            f.write(text + '\n')
    summary = report.get('summary') or report.get('message', '')
    print(f'{report["command"]}: {report["status"]} {summary}', file=sys.stderr)
    return code
