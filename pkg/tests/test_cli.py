"""命令行：退出码、输出文件、运行清单与最终输出行"""
import pytest
import yaml

from config import QAlignError
from main import RuntimeFailure, main, runtime_stage
from manifest import MANIFEST_NAME, SNAPSHOT_NAME, RunManifest

TINY = """\
extends: desk-chain
context_len: 4
batch_size: 4
epochs: 2
steps_per_epoch: 2
checkpoint_every: 1
model:
  embed_dim: 8
  n_blocks: 1
  n_heads: 2
  conv_window: 3
  max_timestep: 32
critic:
  hidden_width: 8
  hidden_layers: 2
  pretrain_steps: 3
  pretrain_batch: 8
data:
  episodes: 12
eval:
  n_targets: 2
  rollouts: 1
"""


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / 'tiny.yaml'
    path.write_text(TINY, encoding='utf-8')
    return str(path)


def last_line(capsys) -> str:
    return capsys.readouterr().out.strip().splitlines()[-1]


def parse_pairs(line: str) -> dict:
    return dict(item.split('=', 1) for item in line.split())


def test_gen_data_is_reproducible(tmp_path, tiny_yaml, capsys):
    for name in ('a', 'b'):
        assert main(['gen-data', '-c', tiny_yaml, '--seed', '5', '--out', str(tmp_path / name), '-q']) == 0
    stats = parse_pairs(last_line(capsys))
    assert stats['episodes'] == '12'
    assert (tmp_path / 'a' / 'dataset.qds').read_bytes() == (tmp_path / 'b' / 'dataset.qds').read_bytes()
    assert (tmp_path / 'a' / SNAPSHOT_NAME).read_text(encoding='utf-8') == TINY
    manifest = yaml.safe_load((tmp_path / 'a' / MANIFEST_NAME).read_text(encoding='utf-8'))
    assert manifest['seed'] == 5 and manifest['env_id'] == 'chain-5'
    assert manifest['artifacts']['dataset'] == 'dataset.qds'


def test_zero_episodes_fails_validation_without_output(tmp_path, tiny_yaml):
    out = tmp_path / 'never'
    assert main(['gen-data', '-c', tiny_yaml, '--episodes', '0', '--out', str(out), '-q']) == 1
    assert not out.exists()


def test_unknown_env_fails_validation(tmp_path):
    out = tmp_path / 'never'
    assert main(['gen-data', '--env', 'halfcheetah-medium', '--out', str(out), '-q']) == 1
    assert not out.exists()


def test_config_and_preset_are_exclusive(tmp_path, tiny_yaml):
    assert main(['gen-data', '-c', tiny_yaml, '-p', 'desk-chain', '--out', str(tmp_path / 'x'), '-q']) == 1


def test_bad_arguments_exit_with_validation_code():
    with pytest.raises(SystemExit) as err:
        main(['gen-data', '--seed', '-3'])
    assert err.value.code == 1
    with pytest.raises(SystemExit) as err:
        main(['gen-data', '--quiet', '--verbose'])
    assert err.value.code == 1


def test_full_pipeline(tmp_path, tiny_yaml, capsys):
    out = str(tmp_path / 'run')
    data = str(tmp_path / 'run' / 'dataset.qds')
    assert main(['gen-data', '-c', tiny_yaml, '--out', out, '-q']) == 0

    assert main(['pretrain', '-c', tiny_yaml, '--dataset', data, '--out', out, '-q']) == 0
    loss = parse_pairs(last_line(capsys))['final_td_loss']
    assert float(loss) >= 0

    assert main(['train', '-c', tiny_yaml, '--dataset', data, '--critic', str(tmp_path / 'run' / 'critic.ckpt'),
                 '--out', out, '-q']) == 0
    summary = parse_pairs(last_line(capsys))
    assert summary['epochs'] == '2' and summary['steps'] == '4'
    run_dir = tmp_path / 'run'
    for name in ('policy.ckpt', 'policy.ckpt.yaml', 'critic_final.ckpt', 'metrics.csv',
                 'checkpoints/policy_epoch0001.ckpt', 'checkpoints/critic_epoch0002.ckpt'):
        assert (run_dir / name).exists(), name
    assert len((run_dir / 'metrics.csv').read_text(encoding='utf-8').splitlines()) == 3

    assert main(['eval-align', '-c', tiny_yaml, '--model', str(run_dir / 'policy.ckpt'), '--env', 'chain-5',
                 '--targets', '0,0.5,1', '--out', out, '-q']) == 0
    m = float(parse_pairs(last_line(capsys))['M'])
    assert m >= 0
    assert (run_dir / 'report.txt').exists()
    assert (run_dir / 'report.csv').read_text(encoding='utf-8').startswith('target,mean,std,count')

    manifest = yaml.safe_load((run_dir / MANIFEST_NAME).read_text(encoding='utf-8'))
    assert [c['command'] for c in manifest['commands']] == ['gen-data', 'pretrain', 'train', 'eval-align']
    assert all(c['status'] == 'ok' for c in manifest['commands'])
    assert manifest['partial'] == []
    assert manifest['artifacts']['policy'] == 'policy.ckpt'


def test_pretrain_zero_steps_reports_nan(tmp_path, tiny_yaml, capsys):
    out = str(tmp_path / 'run')
    assert main(['gen-data', '-c', tiny_yaml, '--out', out, '-q']) == 0
    assert main(['pretrain', '-c', tiny_yaml, '--dataset', str(tmp_path / 'run' / 'dataset.qds'),
                 '--steps', '0', '--out', out, '-q']) == 0
    assert last_line(capsys) == 'final_td_loss=nan'
    assert (tmp_path / 'run' / 'critic.ckpt').exists()


def test_documentation_presets_cannot_train(tmp_path):
    out = tmp_path / 'never'
    code = main(['train', '-p', 'reference-halfcheetah-medium', '--dataset', 'missing.qds',
                 '--critic', 'missing.ckpt', '--out', str(out), '-q'])
    assert code == 1
    assert not out.exists()


def test_dimension_mismatch_fails_validation(tmp_path, tiny_yaml):
    chain, point = str(tmp_path / 'chain'), str(tmp_path / 'point')
    assert main(['gen-data', '-c', tiny_yaml, '--out', chain, '-q']) == 0
    assert main(['gen-data', '-c', tiny_yaml, '--env', 'pointmass', '--out', point, '-q']) == 0
    assert main(['pretrain', '-c', tiny_yaml, '--dataset', point + '/dataset.qds', '--out', point, '-q']) == 0
    code = main(['train', '-c', tiny_yaml, '--dataset', chain + '/dataset.qds',
                 '--critic', point + '/critic.ckpt', '--out', str(tmp_path / 'mixed'), '-q'])
    assert code == 1
    assert not (tmp_path / 'mixed').exists()


def test_corrupt_dataset_is_a_runtime_failure(tmp_path, tiny_yaml):
    bad = tmp_path / 'bad.qds'
    bad.write_bytes(b'QALNDATA' + b'\x00' * 10)
    assert main(['pretrain', '-c', tiny_yaml, '--dataset', str(bad), '--out', str(tmp_path / 'x'), '-q']) == 2


def test_verify_counting_suite(capsys):
    code = main(['verify', '--suite', 'counting', '--max-states', '2', '--max-levels', '2',
                 '--max-actions', '2', '-q'])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert all(' PASS ' in line for line in lines[:-1])
    summary = parse_pairs(lines[-1])
    assert summary['failed'] == '0' and summary['checks'] == str(len(lines) - 1)


def test_verify_refuses_oversized_enumeration(capsys):
    assert main(['verify', '--suite', 'counting', '--max-levels', '12', '--max-actions', '12',
                 '--cap', '1000', '-q']) == 1


def test_presets_listing_and_description(capsys):
    assert main(['presets']) == 0
    text = capsys.readouterr().out
    assert 'desk-default' in text and 'reference-eval-protocol' in text and '[仅文档]' in text
    assert main(['presets', 'desk-chain']) == 0
    described = yaml.safe_load(capsys.readouterr().out)
    assert described['data']['env_id'] == 'chain-5'
    assert main(['presets', 'no-such-preset', '-q']) == 1


def test_train_refuses_critic_with_other_discount(tmp_path, tiny_yaml):
    out = str(tmp_path / 'run')
    data = str(tmp_path / 'run' / 'dataset.qds')
    assert main(['gen-data', '-c', tiny_yaml, '--out', out, '-q']) == 0
    assert main(['pretrain', '-c', tiny_yaml, '--dataset', data, '--out', out, '-q']) == 0
    other = tmp_path / 'other.yaml'
    other.write_text(TINY + 'gamma: 0.9\n', encoding='utf-8')
    code = main(['train', '-c', str(other), '--dataset', data, '--critic', str(tmp_path / 'run' / 'critic.ckpt'),
                 '--out', str(tmp_path / 'trained'), '-q'])
    assert code == 1
    assert not (tmp_path / 'trained').exists()


def test_runtime_failure_marks_interim_artifacts_partial(tmp_path):
    manifest = RunManifest.open(tmp_path)
    manifest.begin('train', 3)
    (tmp_path / 'metrics.csv').write_text('epoch\n', encoding='utf-8')
    manifest.add('metrics', tmp_path / 'metrics.csv')
    with pytest.raises(RuntimeFailure):
        with runtime_stage(manifest, ['metrics']):
            raise QAlignError('boom')
    saved = yaml.safe_load((tmp_path / MANIFEST_NAME).read_text(encoding='utf-8'))
    assert saved['partial'] == ['metrics.csv']
    assert saved['commands'][-1]['status'] == 'failed'


def test_compare_writes_rows_and_reports_the_criterion(tmp_path, tiny_yaml, capsys):
    out = tmp_path / 'study'
    code = main(['compare', '-c', tiny_yaml, '--study', 'alignment', '--seeds', '4', '--out', str(out), '-q'])
    line = last_line(capsys)
    pairs = parse_pairs(line)
    assert pairs['study'] == 'alignment'
    assert code == (0 if pairs['passed'] == 'true' else 2)
    assert (out / 'compare_runs.csv').exists()
    assert line in (out / 'compare_summary.txt').read_text(encoding='utf-8')
    manifest = yaml.safe_load((out / MANIFEST_NAME).read_text(encoding='utf-8'))
    assert manifest['artifacts']['compare_runs'] == 'compare_runs.csv'
    assert manifest['commands'][-1]['status'] != 'failed'


def test_compare_unknown_study_exits_with_validation_code(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(['compare', '--study', 'nope', '--out', str(tmp_path / 'x')])
    assert err.value.code == 1


def test_compare_refuses_documentation_presets(tmp_path):
    out = tmp_path / 'never'
    assert main(['compare', '-p', 'reference-hopper-medium', '--study', 'drtg', '--out', str(out), '-q']) == 1
    assert not out.exists()
