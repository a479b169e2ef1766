"""配置、预设继承与运行清单"""
import dataclasses
import logging

import pytest
import yaml

from config import AlignConfig, ConfigError, apply_log_level, setup_logger, worker_threads
from manifest import MANIFEST_NAME, SNAPSHOT_NAME, RunManifest
from presets import DEFAULT_PRESET, PresetRegistry, deep_merge


def test_defaults_are_valid():
    assert AlignConfig().validate() == (True, '')


def test_unknown_keys_report_dotted_path():
    with pytest.raises(ConfigError, match='model.embed_size'):
        AlignConfig.from_dict({'model': {'embed_size': 3}})
    with pytest.raises(ConfigError, match='sigma'):
        AlignConfig.from_dict({'sigma': 1.0})


def test_values_are_coerced_by_field_type():
    config = AlignConfig.from_dict({'sigma_e': 2, 'epochs': 3.0, 'freeze_critic': 'yes',
                                    'eval': {'grid_step': 100}})
    assert config.sigma_e == 2.0 and isinstance(config.sigma_e, float)
    assert config.epochs == 3 and isinstance(config.epochs, int)
    assert config.freeze_critic is True
    assert config.eval.grid_step == 100.0
    with pytest.raises(ConfigError):
        AlignConfig.from_dict({'epochs': 2.5})
    with pytest.raises(ConfigError):
        AlignConfig.from_dict({'lambda_e': 'lots'})


@pytest.mark.parametrize('overrides', [
    {'sigma_e': -0.1},
    {'lambda_e': -1.0},
    {'delta_rtg': -1.0},
    {'gamma': 0.0},
    {'alpha': 1.5},
    {'context_len': 0},
    {'noise_mode': 'laplace'},
    {'indicator_mode': 'both'},
    {'penalty_mode': 'cubic'},
    {'rtg_scale': 0.0},
])
def test_invalid_values_are_rejected(overrides):
    config = dataclasses.replace(AlignConfig(), **overrides)
    valid, message = config.validate()
    assert not valid and message
    with pytest.raises(ConfigError):
        config.ensure_valid()


def test_nested_sections_are_validated():
    config = AlignConfig.from_dict({'model': {'embed_dim': 10, 'n_heads': 4}})
    assert not config.validate()[0]
    config = AlignConfig.from_dict({'data': {'episodes': 0}})
    assert 'data.episodes' in config.validate()[1]


def test_iql_pretraining_is_refused_with_explanation():
    config = AlignConfig.from_dict({'critic': {'pretrain_method': 'iql'}})
    valid, message = config.validate()
    assert not valid
    assert 'iql' in message and 'double_q' in message


def test_worker_threads_reads_environment(monkeypatch):
    monkeypatch.setenv('RCSL_ALIGN_THREADS', '3')
    assert worker_threads() == 3
    monkeypatch.setenv('RCSL_ALIGN_THREADS', 'many')
    with pytest.raises(ConfigError):
        worker_threads()


def test_log_level_override_updates_existing_loggers():
    logger = setup_logger('ConfigTestLogger')
    apply_log_level('ERROR')
    try:
        assert logger.level == logging.ERROR
        assert setup_logger('ConfigTestLogger2').level == logging.ERROR
    finally:
        apply_log_level(None)


def test_deep_merge_replaces_leaves_and_merges_sections():
    base = {'a': 1, 'model': {'embed_dim': 8, 'n_heads': 2}}
    merged = deep_merge(base, {'model': {'embed_dim': 16}, 'b': [1]})
    assert merged == {'a': 1, 'b': [1], 'model': {'embed_dim': 16, 'n_heads': 2}}
    assert base['model']['embed_dim'] == 8


@pytest.fixture
def registry(tmp_path):
    (tmp_path / 'base.yaml').write_text('description: base\nsigma_e: 2.0\nmodel:\n  embed_dim: 16\n',
                                        encoding='utf-8')
    (tmp_path / 'child.yaml').write_text('extends: base\nlambda_e: 3.0\nmodel:\n  n_heads: 4\n',
                                         encoding='utf-8')
    (tmp_path / 'doc.yaml').write_text('extends: base\ndocumentation_only: true\ndescription: doc\n',
                                       encoding='utf-8')
    (tmp_path / 'from-doc.yaml').write_text('extends: doc\n', encoding='utf-8')
    (tmp_path / 'loop-a.yaml').write_text('extends: loop-b\n', encoding='utf-8')
    (tmp_path / 'loop-b.yaml').write_text('extends: loop-a\n', encoding='utf-8')
    return PresetRegistry(tmp_path)


def test_extends_merges_parent(registry):
    config = registry.load('child')
    assert config.sigma_e == 2.0 and config.lambda_e == 3.0
    assert config.model.embed_dim == 16 and config.model.n_heads == 4
    assert config.description == ''


def test_documentation_flag_is_not_inherited(registry):
    assert registry.load('doc').documentation_only
    assert not registry.load('from-doc').documentation_only


def test_extends_cycle_is_rejected(registry):
    with pytest.raises(ConfigError, match='循环'):
        registry.load('loop-a')


def test_unknown_preset(registry):
    with pytest.raises(ConfigError):
        registry.load('missing')


def test_resolve_keeps_file_bytes(registry, tmp_path):
    resolved = registry.resolve('child')
    assert resolved.source == 'preset:child'
    assert resolved.snapshot == (tmp_path / 'child.yaml').read_bytes()

    user = tmp_path / 'mine.yml'
    user.write_bytes('extends: base   # 注释保留\nseed: 9\n'.encode('utf-8'))
    resolved = registry.resolve_file(user)
    assert resolved.config.seed == 9 and resolved.config.sigma_e == 2.0
    assert resolved.snapshot == user.read_bytes()


def test_shipped_presets_all_load():
    registry = PresetRegistry()
    names = registry.names()
    assert DEFAULT_PRESET in names
    for name in names:
        registry.load(name)
    listing = registry.list_presets()
    assert listing[DEFAULT_PRESET]['documentation_only'] is False
    assert listing['reference-eval-protocol']['documentation_only'] is True


def test_runnable_presets_validate():
    registry = PresetRegistry()
    for name, info in registry.list_presets().items():
        if not info['documentation_only']:
            registry.load(name).ensure_valid()


def test_reference_hyperparameters():
    registry = PresetRegistry()
    cheetah = registry.load('reference-halfcheetah-medium')
    assert (cheetah.sigma_e, cheetah.lambda_e, cheetah.delta_rtg) == (15.0, 5.0, 10.0)
    assert cheetah.rtg_scale == 1000.0 and cheetah.documentation_only
    maze = registry.load('reference-antmaze-umaze')
    assert maze.noise_mode == 'half_normal' and maze.lambda_e == 100.0
    assert not maze.validate()[0]
    protocol = registry.load('reference-eval-protocol')
    assert (protocol.eval.grid_step, protocol.eval.rollouts) == (100.0, 30)


def test_desk_default_matches_desk_reproduction_scale():
    config = PresetRegistry().load(DEFAULT_PRESET)
    assert config.data.env_id == 'pointmass' and config.data.episodes == 2000
    assert config.model.embed_dim == 64
    assert (config.sigma_e, config.lambda_e, config.delta_rtg) == (1.0, 1.0, 1.0)
    assert config.epochs * config.steps_per_epoch == 10_000
    assert (config.eval.n_targets, config.eval.rollouts, config.eval.n_seeds) == (12, 20, 3)


def test_describe_is_yaml_of_merged_config():
    text = PresetRegistry().describe('ablation-half-normal')
    data = yaml.safe_load(text)
    assert data['noise_mode'] == 'half_normal'
    assert data['data']['env_id'] == 'chain-5'


def test_manifest_records_snapshot_and_artifacts(tmp_path):
    manifest = RunManifest.open(tmp_path)
    manifest.begin('gen-data', seed=5, env_id='chain-5')
    raw = 'sigma_e: 1   # 原样保留\n'.encode('utf-8')
    manifest.snapshot('preset:x', raw)
    manifest.add('dataset', tmp_path / 'dataset.qds')
    manifest.add_checkpoint('policy', tmp_path / 'checkpoints' / 'policy.ckpt', partial=True)
    manifest.finish()

    assert (tmp_path / SNAPSHOT_NAME).read_bytes() == raw
    data = yaml.safe_load((tmp_path / MANIFEST_NAME).read_text(encoding='utf-8'))
    assert data['seed'] == 5 and data['env_id'] == 'chain-5'
    assert data['artifacts']['dataset'] == 'dataset.qds'
    assert data['artifacts']['policy_descriptor'] == 'checkpoints/policy.ckpt.yaml'
    assert 'checkpoints/policy.ckpt' in data['partial']
    assert data['commands'][0]['status'] == 'ok'


def test_manifest_accumulates_commands(tmp_path):
    first = RunManifest.open(tmp_path)
    first.begin('gen-data', seed=1)
    first.add_checkpoint('critic', tmp_path / 'critic.ckpt', partial=True)
    first.finish()

    second = RunManifest.open(tmp_path)
    second.begin('pretrain', seed=1)
    second.add_checkpoint('critic', tmp_path / 'critic.ckpt')
    second.finish('failed')
    data = yaml.safe_load((tmp_path / MANIFEST_NAME).read_text(encoding='utf-8'))
    assert [c['command'] for c in data['commands']] == ['gen-data', 'pretrain']
    assert data['commands'][1]['status'] == 'failed'
    assert data['partial'] == []
