"""
Tests for configuration, the run manifest, the stage runner and the command line
"""
import json

import numpy as np
import pytest

import run
from config import Config, ExperimentConfig
from models.database import RESULT_COLUMNS, RunManifest
from stages import execute, marker_current, parallel_map, pipeline, stage_key
from utils.errors import ConfigError, StageError
from utils.storage import save_json


def _row(image_id, segment, correct=True, **extra):
    row = {'image_id': image_id, 'alpha': 0.4, 'lambda': 1.0, 'edit_model': 'editor-a/null-t40',
           'segment_index': segment, 'decoded': 'RIW1', 'correct': correct, 'confidence': 0.9,
           'sem_dist': 1.0, 'vis_dist': 2.0}
    row.update(extra)
    return row


# --------------------------------------------------------------------------- config

def test_config_hash_ignores_output_location():
    a = ExperimentConfig.from_dict({'out_dir': '/tmp/a', 'jobs': 1})
    b = ExperimentConfig.from_dict({'out_dir': '/tmp/b', 'jobs': 4})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != ExperimentConfig.from_dict({'seed': 1}).config_hash()


def test_config_builds_nested_sections():
    cfg = ExperimentConfig.from_dict({
        'editors': [{'name': 'only', 'codec_seed': 5}],
        'injection': {'alpha': 0.6, 'norm': 'l1', 'eps': 3.0},
    })
    assert cfg.editors[0].name == 'only' and cfg.editors[0].codec_seed == 5
    assert cfg.injection.norm == 'l1'


@pytest.mark.parametrize('data', [
    {'unknown': 1},
    {'corpus': {'n_tain': 3}},
    {'editors': {'name': 'x'}},
    {'editors': [{'name': 'a'}, {'name': 'a'}]},
    {'watermark': {'text': 'TOOLONG'}},
    {'corpus': {'height': 32, 'width': 32}},
    {'extract': {'recognizer_mode': 'ocr'}},
    {'metrics': ['d_all', 'd_bits']},
    {'injection': {'mu': 0.5, 'eps': 0.1}},
    {'injection': {'lam': -0.5}},
    {'sweep': {'lambda_grid': [1.0, -1.0]}},
])
def test_invalid_config_raises(data):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_zero_lambda_config_is_accepted():
    cfg = ExperimentConfig.from_dict({'injection': {'lam': 0.0}, 'sweep': {'lambda_grid': [0.0, 1.0]}})
    assert cfg.injection.lam == 0.0


def test_load_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(str(tmp_path / 'nope.json'))
    bad = tmp_path / 'bad.json'
    bad.write_text('{"seed": ')
    with pytest.raises(ConfigError):
        ExperimentConfig.load(str(bad))


def test_environment_overrides(tmp_path, monkeypatch):
    path = tmp_path / 'cfg.json'
    path.write_text(json.dumps({'seed': 1}))
    monkeypatch.setenv('RIW_SEED', '9')
    monkeypatch.setenv('RIW_OUT', str(tmp_path / 'out'))
    cfg = ExperimentConfig.load(str(path))
    assert cfg.seed == 9
    assert cfg.out_dir == str(tmp_path / 'out')
    monkeypatch.setenv('RIW_JOBS', 'many')
    with pytest.raises(ConfigError):
        ExperimentConfig.load(str(path))


# --------------------------------------------------------------------------- manifest

def test_stage_runs_are_recorded_in_order(tmp_path):
    manifest = RunManifest(tmp_path / 'manifest.db')
    manifest.record_stage('codec', 'abc', 'failed', 1.0, 'boom')
    manifest.record_stage('codec', 'abc', 'ok', 2.0)
    manifest.record_stage('inject', 'def', 'skipped', 0.0)
    assert [r.message for r in manifest.stage_runs('codec')] == ['boom', None]
    assert {r.config_hash for r in manifest.stage_runs()} == {'abc', 'def'}
    assert [r.status for r in manifest.stage_runs('codec')] == ['failed', 'ok']


def test_artifact_verification_detects_changes(tmp_path):
    manifest = RunManifest(tmp_path / 'manifest.db')
    path = save_json({'a': 1}, tmp_path / 'eval' / 'x.json')
    manifest.record_artifact(path, 'eval', 'json', 'abc')
    assert manifest.verify() == []
    assert manifest.artifacts('eval')[0].path == 'eval/x.json'
    path.write_text('{"a": 2}')
    assert manifest.verify() == ['hash mismatch: eval/x.json']
    path.unlink()
    assert manifest.verify() == ['missing: eval/x.json']


def test_eval_rows_replace_and_export(tmp_path):
    manifest = RunManifest(tmp_path / 'manifest.db')
    manifest.replace_eval_rows('riw', 'main', [_row('img_0001', 1), _row('img_0000', 0)])
    manifest.replace_eval_rows('riw', 'main', [_row('img_0001', 1), _row('img_0000', 0),
                                               _row('img_0000', 0, reconstructed=True)])
    frame = manifest.eval_frame('riw')
    assert len(frame) == 3
    assert list(frame[~frame['reconstructed'].astype(bool)]['image_id']) == ['img_0000', 'img_0001']
    path = manifest.export_results(tmp_path / 'results.csv')
    header = path.read_text().splitlines()[0]
    assert header.split(',') == RESULT_COLUMNS
    assert len(path.read_text().splitlines()) == 3


def test_failures_are_recorded(tmp_path):
    manifest = RunManifest(tmp_path / 'manifest.db')
    manifest.record_failure('inject', 'img_0003', 'bad pixel')
    assert [(f.image_id, f.message) for f in manifest.failures('inject')] == [('img_0003', 'bad pixel')]


# --------------------------------------------------------------------------- stage runner

def test_execute_wraps_unexpected_errors(lab):
    def boom():
        raise RuntimeError('disk full')

    with pytest.raises(StageError) as info:
        execute(lab, 'inject', 'k1', boom)
    assert info.value.stage == 'inject'
    assert lab.manifest.stage_runs('inject')[-1].status == 'failed'


def test_execute_skips_on_cache_hit(lab):
    calls = []
    execute(lab, 'edit', 'k2', lambda: calls.append(1), done=lambda: True)
    assert calls == []
    assert lab.manifest.stage_runs('edit')[-1].status == 'skipped'
    execute(lab, 'edit', 'k2', lambda: calls.append(1), done=lambda: False)
    assert calls == [1]


def test_stage_key_tracks_named_sections(lab):
    base = stage_key(lab, 'codec')
    assert base == stage_key(lab, 'codec')
    assert base != stage_key(lab, 'codec', run='main')
    lab.cfg.injection.alpha = 0.9
    assert base == stage_key(lab, 'codec')
    lab.cfg.codec.epochs += 1
    assert base != stage_key(lab, 'codec')


def test_marker_current(tmp_path):
    marker = save_json({'config_hash': 'abc'}, tmp_path / 'marker.json')
    assert marker_current(marker, 'abc')
    assert not marker_current(marker, 'def')
    assert not marker_current(tmp_path / 'missing.json', 'abc')


def test_parallel_map_keeps_order():
    assert parallel_map(3, lambda v: v * v, range(10)) == [v * v for v in range(10)]
    assert parallel_map(1, str, [1, 2]) == ['1', '2']


def test_lab_corpus_splits(lab):
    splits = lab.corpus()
    assert [len(splits[k]) for k in ('train', 'eval', 'aux')] == [4, 3, 2]
    ids = [i for k in ('train', 'eval', 'aux') for i, _ in splits[k]]
    assert len(set(ids)) == 9
    assert lab.path('corpus', 'corpus.json').exists()
    # 8-bit read back
    x = lab.images('eval')[0]
    assert np.array_equal(np.round(x * 255) / 255, x)


def test_lab_watermark_matches_layout(lab):
    w = lab.watermark()
    assert w.shape == (64, 64, 3)
    assert set(np.unique(w)) <= {0.0, 1.0}
    assert lab.layout().k == 9


def test_missing_checkpoint_is_stage_error(lab):
    with pytest.raises(StageError):
        lab.get_codec()


# --------------------------------------------------------------------------- command line

def test_cli_config_error_exit_code(tmp_path):
    assert run.main(['train', '--config', str(tmp_path / 'missing.json')]) == 2


def test_cli_unknown_training_stage(tmp_path):
    assert run.main(['train', '--out', str(tmp_path / 'out'), '--stage-filter', 'nothing', '--debug']) == 2


def test_cli_eval_without_results_writes_nothing(tmp_path):
    out = tmp_path / 'out'
    assert run.main(['eval', '--out', str(out), '--debug']) == 3
    assert not (out / 'eval' / 'results.csv').exists()


@pytest.mark.parametrize('verb', ['eval', 'game', 'all'])
def test_cli_rejects_stage_filter_for_unfiltered_verbs(tmp_path, verb):
    assert run.main([verb, '--out', str(tmp_path / 'out'), '--stage-filter', 'main', '--debug']) == 2


def test_cli_unknown_run_filter(tmp_path):
    assert run.main(['inject', '--out', str(tmp_path / 'out'), '--stage-filter', 'beta', '--debug']) == 2


def test_extract_filter_selects_runs_or_baselines(lab, monkeypatch):
    calls = []
    monkeypatch.setattr(pipeline, 'extract_run', lambda lab, r: calls.append(r.name))
    monkeypatch.setattr(pipeline, 'run_baselines', lambda lab: calls.append('baselines'))
    pipeline.run_extract(lab, 'baselines')
    assert calls == ['baselines']
    calls.clear()
    pipeline.run_extract(lab, 'alpha')
    assert calls == ['alpha-0', 'alpha-1']
    calls.clear()
    pipeline.run_extract(lab)
    assert calls == ['main', 'alpha-0', 'alpha-1', 'lambda-0', 'lambda-1', 'baselines']
    with pytest.raises(ConfigError):
        pipeline.run_extract(lab, 'beta')


# --------------------------------------------------------------------------- end to end

TINY = {
    'seed': 0,
    'jobs': 1,
    'corpus': {'n_train': 4, 'n_eval': 3, 'n_aux': 6, 'height': 64, 'width': 64},
    'codec': {'epochs': 1, 'latent_channels': 4, 'hidden': 8},
    'editors': [{'name': 'editor-a', 'codec_epochs': 1, 'denoiser_epochs': 1, 't_max': 10}],
    'edits': [{'prompt': 'null', 't_edit': 4}],
    'injection': {'steps': 2},
    'sweep': {'images': 2, 'alpha_grid': [0.2, 0.6], 'lambda_grid': [1.0]},
    'extract': {'reconstructor_epochs': 1, 'reconstructor_images': 6},
    'baselines': {'ae_epochs': 1, 'finetune_epochs': 1},
    'game': {'trials': 4, 'calibration_trials': 2, 'distinguisher_epochs': 1, 'distinguisher_images': 6},
    'patch': {'images': 6, 'classifier_epochs': 1},
}


@pytest.fixture
def tiny_config(tmp_path, monkeypatch):
    """Tiny experiment whose one-epoch trainers are accepted whatever their held-out metric"""
    for name in ('CODEC_RMSE_THRESHOLD', 'DENOISER_LOSS_THRESHOLD', 'RECONSTRUCTOR_RMSE_THRESHOLD',
                 'AE_BIT_ERROR_THRESHOLD'):
        monkeypatch.setattr(Config, name, float('inf'))
    for name in ('RIW_SEED', 'RIW_OUT', 'RIW_JOBS'):
        monkeypatch.delenv(name, raising=False)
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps(TINY))
    return str(path)


def test_full_pipeline_is_reproducible(tmp_path, tiny_config):
    outs = [tmp_path / 'a', tmp_path / 'b']
    for out in outs:
        assert run.main(['all', '--config', tiny_config, '--out', str(out), '--debug']) == 0

    a, b = (out / 'eval' / 'results.csv' for out in outs)
    assert a.read_text().splitlines()[0].split(',') == RESULT_COLUMNS
    assert len(a.read_text().splitlines()) == 1 + (3 + 2 * 2 + 2 * 1) * 9
    assert a.read_bytes() == b.read_bytes()

    summary = json.loads((outs[0] / 'eval' / 'summary.json').read_text())
    assert summary['checks']
    assert all(set(c) == {'passed', 'detail'} for c in summary['checks'].values())
    assert {'budget', 'd_word', 'baseline_margin', 'distinguisher_auc', 'control_auc',
            'shuffled_auc'} <= set(summary['checks'])
    assert summary['checks']['budget']['passed']
    assert set(summary['main']) == {'editor-a/null-t4'}
    assert 'shuffled_holdout_auc' in summary['distinguisher']
    assert {row['scheme'] for row in summary['baselines']} == {'riw', 'dct', 'ae', 'ae-adv', 'ae-ft'}

    # Everything is cached on a second pass
    assert run.main(['all', '--config', tiny_config, '--out', str(outs[0]), '--debug']) == 0
    assert a.read_bytes() == b.read_bytes()

    assert run.main(['game', '--config', tiny_config, '--out', str(outs[0]), '--debug']) == 0
    game = json.loads((outs[0] / 'eval' / 'game.json').read_text())
    assert {'default', 'identity', 'noise'} <= set(game)
    assert all(game[name]['trials'] == 4 for name in ('default', 'identity', 'noise'))


def test_eval_refuses_tampered_outputs(tmp_path, tiny_config):
    out = tmp_path / 'run'
    assert run.main(['all', '--config', tiny_config, '--out', str(out), '--debug']) == 0
    assert run.main(['eval', '--config', tiny_config, '--out', str(out), '--debug']) == 0
    scores = out / 'extract' / 'main' / 'scores.csv'
    scores.write_text(scores.read_text() + '\n')
    assert run.main(['eval', '--config', tiny_config, '--out', str(out), '--debug']) == 3


def test_eval_before_upstream_stages_is_stage_error(tmp_path, tiny_config):
    assert run.main(['eval', '--config', tiny_config, '--out', str(tmp_path / 'empty'), '--debug']) == 3
