import json
import os

import numpy as np
import pytest

from mhubert.cli import REPORT_SCHEMA, main
from mhubert.corpus import load_manifest, save_manifest
from mhubert.labeler import FeatureMatrix, feature_path, save_features
from tests.conftest import build_manifest, write_feature_tree

PIPELINE_TOML = '''
[sampling]
seed = 7

[index]
config = "OPQ4_32,IVF50_HNSW16,PQ8x4"
kmeans_iters = 10
opq_iters = 2
ef_search = 32
'''

METRICS = ('task,value,direction,sota,floor\n'
           'KS,80,higher_better,90,40\n'
           'PR,9,lower_better,5,25\n')


def run_cli(capsys, *argv) -> 'tuple[int, dict]':
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, json.loads(out)


def check_report(report: dict) -> None:
    """Minimal structural check against the published schema."""
    assert set(REPORT_SCHEMA['required']) <= set(report)
    assert set(report) <= set(REPORT_SCHEMA['properties'])
    assert report['status'] in REPORT_SCHEMA['properties']['status']['enum']
    for digest in report['outputs'].values():
        assert len(digest) == 64


def test_schema_command(capsys):
    code, schema = run_cli(capsys, 'schema')
    assert code == 0
    assert 'command' in schema['required']


def test_budget_estimate(capsys):
    code, report = run_cli(capsys, 'budget', 'estimate', '--hours', 90430,
                           '--dim', 768, '--fps', 50)
    assert code == 0
    check_report(report)
    result = report['result']
    assert result['tebibytes'] == pytest.approx(45.48, abs=0.01)
    assert result['human'] == '50.00 TB (45.48 TiB)'
    assert report['command'] == 'budget estimate'


def test_missing_input_is_exit_1(capsys, tmp_path):
    code, report = run_cli(capsys, 'manifest', 'validate', '--manifest',
                           tmp_path / 'absent.tsv')
    assert code == 1
    check_report(report)
    assert report['status'] == 'error'
    assert report['error'] == 'FileNotFoundError'


def test_bad_manifest_is_exit_1(capsys, tmp_path):
    path = tmp_path / 'bad.tsv'
    path.write_text('/root\na\tx.wav\teng\n')
    code, report = run_cli(capsys, 'manifest', 'stats', '--manifest', path)
    assert code == 1
    assert 'line 2' in report['message']


def test_plan_digests_are_reproducible(capsys, tmp_path):
    m = build_manifest({('eng', 'cv'): 40, ('fra', 'cv'): 10},
                       seconds=lambda k: 2.0 + k % 5)
    manifest = str(tmp_path / 'train.tsv')
    save_manifest(manifest, m)
    digests = []
    for name in ('a', 'b'):
        out = str(tmp_path / f'epoch_{name}.jsonl')
        code, report = run_cli(capsys, 'plan', 'epoch', '--manifest', manifest,
                               '--out', out, '--seed', 3, '--threads', 1)
        assert code == 0
        digests.append(report['outputs'][out])
        batches = str(tmp_path / f'batches_{name}.jsonl')
        code, report = run_cli(capsys, 'plan', 'batches', '--epoch', out,
                               '--out', batches, '--max-frames', 1000,
                               '--crop-len', 200, '--seed', 3)
        assert code == 0
        digests.append(report['outputs'][batches])
    assert digests[0] == digests[2] and digests[1] == digests[3]
    code, report = run_cli(capsys, 'plan', 'epoch', '--manifest', manifest,
                           '--out', str(tmp_path / 'epoch_c.jsonl'),
                           '--seed', 4)
    assert list(report['outputs'].values())[0] != digests[0]


def test_end_to_end(capsys, tmp_path):
    m = build_manifest({('eng', 'cv'): 150, ('fra', 'vp'): 100,
                        ('swa', 'cv'): 50},
                       seconds=lambda k: 1.5 + 0.5 * (k % 10))
    manifest = str(tmp_path / 'train.tsv')
    save_manifest(manifest, m)
    features_dir = str(tmp_path / 'features')
    write_feature_tree(m, features_dir, dim=39, seed=2)
    config = tmp_path / 'pipeline.toml'
    config.write_text(PIPELINE_TOML)
    common = ['--config', config, '--threads', 2, '--log-level', 'WARNING']

    code, report = run_cli(capsys, 'manifest', 'validate', '--manifest',
                           manifest, *common)
    assert code == 0 and report['result']['utterances'] == 300
    assert report['result']['out_of_range'] == 30

    filtered = str(tmp_path / 'filtered.tsv')
    code, report = run_cli(capsys, 'manifest', 'filter', '--manifest',
                           manifest, '--out', filtered, *common)
    assert code == 0 and report['result']['kept'] == 270

    annotations = tmp_path / 'segments.jsonl'
    annotations.write_text(
        '{"id": "eng_cv_00001", "events": [{"kind": "music", "start": 0,'
        ' "end": 1.9}]}\n')
    speech = str(tmp_path / 'speech.tsv')
    code, report = run_cli(capsys, 'segfilter', '--manifest', filtered,
                           '--annotations', annotations, '--out', speech,
                           *common)
    assert code == 0 and report['result']['kept'] == 270
    assert report['result']['counts']['unannotated'] == 269

    epoch = str(tmp_path / 'epoch.jsonl')
    code, report = run_cli(capsys, 'plan', 'epoch', '--manifest', speech,
                           '--out', epoch, *common)
    assert code == 0 and report['result']['draws'] == 270

    index = str(tmp_path / 'train.mhix')
    code, report = run_cli(capsys, 'index', 'train', '--manifest', speech,
                           '--features-dir', features_dir, '--out', index,
                           *common)
    assert code == 0, report
    assert report['result']['K'] == 50 and report['result']['d_out'] == 32

    labels = str(tmp_path / 'labels.txt')
    code, report = run_cli(capsys, 'index', 'apply', '--manifest', speech,
                           '--features-dir', features_dir, '--index', index,
                           '--out', labels, '--shards', 4, *common)
    assert code == 0
    check_report(report)
    assert report['result']['misaligned'] == []
    with open(labels, encoding='utf-8') as f:
        assert f.read().count('\n') == len(load_manifest(speech))

    logits_dir = str(tmp_path / 'logits')
    rng = np.random.default_rng(0)
    for u in load_manifest(speech):
        path = feature_path(logits_dir, u)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_features(path, FeatureMatrix(rng.normal(size=(u.num_frames(),
                                                           50))))
    code, report = run_cli(capsys, 'loss', 'eval', '--manifest', speech,
                           '--labels', labels, '--logits-dir', logits_dir,
                           *common)
    assert code == 0
    assert report['result']['loss'] > 0
    assert report['result']['max_grad_row_sum'] < 1e-6
    assert 0.3 < report['result']['mask_fraction'] < 0.8

    metrics = tmp_path / 'metrics.csv'
    metrics.write_text(METRICS)
    code, report = run_cli(capsys, 'score', '--metrics', metrics, *common)
    assert code == 0
    assert report['result']['score'] == pytest.approx(800.0)


def test_partial_labeling_is_exit_2(capsys, tmp_path):
    m = build_manifest({('eng', 'cv'): 30}, seconds=3.0)
    manifest = str(tmp_path / 'train.tsv')
    save_manifest(manifest, m)
    features_dir = str(tmp_path / 'features')
    write_feature_tree(m, features_dir, dim=8, seed=1)
    index = str(tmp_path / 'small.mhix')
    code, _ = run_cli(capsys, 'index', 'train', '--manifest', manifest,
                      '--features-dir', features_dir, '--out', index,
                      '--index-config', 'IVF8_HNSW4,PQ2x4', '--threads', 1)
    assert code == 0
    os.remove(feature_path(features_dir, m[4]))
    report_path = str(tmp_path / 'report.json')
    code, report = run_cli(capsys, 'index', 'apply', '--manifest', manifest,
                           '--features-dir', features_dir, '--index', index,
                           '--out', str(tmp_path / 'labels.txt'),
                           '--report', report_path)
    assert code == 2
    assert report['status'] == 'partial'
    assert len(report['result']['failures']) == 1
    assert report['result']['misaligned'] == [m[4].id]
    with open(report_path, encoding='utf-8') as f:
        assert json.load(f)['code'] == 2


def test_bad_log_level_is_exit_1(capsys):
    code, report = run_cli(capsys, 'budget', 'estimate', '--hours', 1,
                           '--dim', 39, '--fps', 100, '--log-level', 'LOUD')
    assert code == 1
    check_report(report)
    assert 'LOUD' in report['message']


def test_short_metrics_row_is_exit_1(capsys, tmp_path):
    metrics = tmp_path / 'metrics.csv'
    metrics.write_text('task,value,direction,sota,floor\nKS,80\n')
    code, report = run_cli(capsys, 'score', '--metrics', metrics)
    assert code == 1
    assert report['error'] == 'ValueError'
    assert 'row 2' in report['message']


def test_plans_directory_from_config(capsys, tmp_path):
    m = build_manifest({('eng', 'cv'): 20, ('fra', 'cv'): 5}, seconds=3.0)
    manifest = str(tmp_path / 'train.tsv')
    save_manifest(manifest, m)
    plans = tmp_path / 'plans'
    config = tmp_path / 'pipeline.toml'
    config.write_text(f'[paths]\nmanifest = "{manifest}"\n'
                      f'plans = "{plans}"\n')
    code, report = run_cli(capsys, 'plan', 'epoch', '--config', config)
    assert code == 0
    assert list(report['outputs']) == [str(plans / 'epoch.jsonl')]
    code, report = run_cli(capsys, 'plan', 'batches', '--config', config,
                           '--max-frames', 1000, '--crop-len', 100)
    assert code == 0
    assert list(report['outputs']) == [str(plans / 'batches.jsonl')]
