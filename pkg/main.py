#!/usr/bin/env python3
"""
Q引导RTG对齐工具
生成行为数据、预训练评论家、协同训练序列策略、评估回报对齐、运行精确验证

使用方法:
    python main.py gen-data --preset desk-chain --out runs/chain
    python main.py pretrain --dataset runs/chain/dataset.qds --out runs/chain
    python main.py train --dataset runs/chain/dataset.qds --critic runs/chain/critic.ckpt --out runs/chain
    python main.py eval-align --model runs/chain/policy.ckpt --dataset runs/chain/dataset.qds --out runs/chain
    python main.py compare --study alignment --preset desk-chain --out runs/study
    python main.py verify --suite all
"""
import argparse
import dataclasses
import sys
import traceback
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

import numpy as np

import numkit as nk
from config import AlignConfig, ConfigError, QAlignError, apply_log_level
from critic import CriticPair, CriticSpec, pretrain
from evalkit import alignment_sweep, default_grid, emit_report, grid_from_config, stepped_grid
from exporter import MetricsLogger, write_study_rows
from manifest import RunManifest
from oracles import SUITES, EnumerationBudgetError, run_suites
from policy import PolicyModel, PolicySpec
from presets import DEFAULT_PRESET, PresetRegistry, ResolvedConfig
from studies import STUDIES, StudyRunner
from trainer import check_critic_matches, train
from worldkit import Dataset, UnknownEnvError, generate, load_dataset, make_behavior, make_env, save_dataset

DATASET_FILE = 'dataset.qds'
CRITIC_FILE = 'critic.ckpt'
POLICY_FILE = 'policy.ckpt'
FINAL_CRITIC_FILE = 'critic_final.ckpt'
METRICS_FILE = 'metrics.csv'
REPORT_TABLE_FILE = 'report.txt'
REPORT_ROWS_FILE = 'report.csv'
STUDY_ROWS_FILE = 'compare_runs.csv'
STUDY_SUMMARY_FILE = 'compare_summary.txt'
CHECKPOINT_DIR = 'checkpoints'

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

VALIDATION_ERRORS = (ConfigError, UnknownEnvError, nk.ShapeError, EnumerationBudgetError, ValueError)
RUNTIME_ERRORS = (QAlignError, OSError, ValueError, FloatingPointError)


class RuntimeFailure(Exception):
    """执行阶段（校验通过之后）的失败"""


class CliParser(argparse.ArgumentParser):
    """参数错误按校验失败处理（退出码1）"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: 错误: {message}\n")


def _u64(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"种子必须是整数: {text!r}")
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"种子必须在 [0, 2^64) 内: {value}")
    return value


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的数值: {text!r}")


def _int_list(text: str) -> List[int]:
    return [_u64(x) for x in text.split(',') if x.strip()]


def _common_options() -> argparse.ArgumentParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", "-c", type=str, help="YAML配置文件（可 extends 某个预设）")
    common.add_argument("--preset", "-p", type=str, help=f"预设名（默认 {DEFAULT_PRESET}）")
    common.add_argument("--seed", type=_u64, help="覆盖配置中的种子")
    common.add_argument("--out", "-o", type=str, default="runs/default", help="输出目录（默认: runs/default）")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--quiet", "-q", action="store_true", help="只输出警告和最终结果")
    verbosity.add_argument("--verbose", "-v", action="store_true", help="显示详细日志")
    return common


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """解析命令行参数"""
    parser = CliParser(
        description="Q引导RTG对齐工具（桌面规模）",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例:
  python main.py gen-data --preset desk-chain --episodes 500 --out runs/chain
  python main.py pretrain --dataset runs/chain/dataset.qds --steps 5000 --out runs/chain
  python main.py train --preset ablation-fixed-critic --dataset runs/chain/dataset.qds \\
                       --critic runs/chain/critic.ckpt --out runs/fixed
  python main.py eval-align --model runs/chain/policy.ckpt --env chain-5 --targets 0,0.5,1 --out runs/chain
  python main.py verify --suite counting --max-states 3 --max-levels 4 --max-actions 4
  python main.py compare --study drtg --preset desk-chain --seeds 0,1,2 --out runs/drtg
  python main.py presets                          # 列出所有预设

退出码: 0=成功, 1=校验失败, 2=运行失败
        """
    )
    common = _common_options()
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("gen-data", parents=[common], help="用行为策略生成数据集")
    p.add_argument("--env", type=str, help="环境id（chain-<N> / grid-5x5 / pointmass）")
    p.add_argument("--episodes", type=int, help="回合数")
    p.add_argument("--epsilon", type=float, help="行为策略的 ε")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="双Q评论家预训练")
    p.add_argument("--dataset", type=str, required=True, help="数据集文件")
    p.add_argument("--steps", type=int, help="预训练步数")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="策略与评论家协同训练")
    p.add_argument("--dataset", type=str, required=True, help="数据集文件")
    p.add_argument("--critic", type=str, required=True, help="预训练评论家检查点")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval-align", parents=[common], help="回报对齐扫描")
    p.add_argument("--model", type=str, required=True, help="策略检查点")
    p.add_argument("--env", type=str, help="环境id（默认取配置 data.env_id）")
    p.add_argument("--targets", type=_float_list, help="逗号分隔的目标回报")
    p.add_argument("--dataset", type=str, help="用数据集回报范围生成目标网格")
    p.add_argument("--grid-step", type=float, help="网格步长（从最小回报开始递增）")
    p.add_argument("--n-targets", type=int, help="均匀网格的目标数")
    p.add_argument("--rollouts", type=int, help="每个种子每个目标的rollout数")
    p.add_argument("--seeds", type=_int_list, help="逗号分隔的种子")
    p.set_defaults(handler=cmd_eval_align)

    p = sub.add_parser("verify", parents=[common], help="小规模MDP上的精确验证")
    p.add_argument("--suite", choices=sorted(SUITES) + ['all'], default='all', help="验证套件")
    p.add_argument("--max-states", type=int, help="计数套件 |S| 上限")
    p.add_argument("--max-levels", type=int, help="计数套件 |G| 上限")
    p.add_argument("--max-actions", type=int, help="计数套件 |A| 上限")
    p.add_argument("--instances", type=int, help="随机实例数")
    p.add_argument("--cap", type=int, help="单个实例的穷举上限")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("compare", parents=[common], help="对照实验：同一数据与评论家上比较配置变体")
    p.add_argument("--study", choices=sorted(STUDIES), required=True, help="实验名")
    p.add_argument("--seeds", type=_int_list, help="逗号分隔的种子（默认 seed 起连续 eval.n_seeds 个）")
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("presets", parents=[common], help="列出预设或显示某个预设的完整配置")
    p.add_argument("name", nargs='?', help="预设名")
    p.set_defaults(handler=cmd_presets)

    return parser.parse_args(argv)


def setup_logging(args: argparse.Namespace):
    """设置全局日志"""
    if args.quiet:
        apply_log_level('WARNING')
    elif args.verbose:
        apply_log_level('DEBUG')
    else:
        apply_log_level(None)


def _say(args: argparse.Namespace, message: str = ""):
    """进度信息写到标准错误"""
    if not args.quiet:
        print(message, file=sys.stderr)


def _banner(args: argparse.Namespace, title: str):
    _say(args, f"\n{'=' * 70}")
    _say(args, title)
    _say(args, '=' * 70)


@contextmanager
def runtime_stage(manifest: RunManifest, interim: Optional[List[str]] = None):
    """失败时把中间产物标为不完整，并记录失败状态"""
    try:
        yield
    except RUNTIME_ERRORS as e:
        manifest.mark_partial(interim or [])
        manifest.finish('failed')
        raise RuntimeFailure(str(e)) from e


# ---------------------------------------------------------------- 配置

def resolve_config(args: argparse.Namespace) -> ResolvedConfig:
    """按 --config / --preset 解析配置，并应用 --seed"""
    if args.config and args.preset:
        raise ConfigError("--config 与 --preset 只能指定一个")
    registry = PresetRegistry()
    if args.config:
        resolved = registry.resolve_file(Path(args.config))
    else:
        resolved = registry.resolve(args.preset or DEFAULT_PRESET)
    if args.seed is not None:
        resolved.config.seed = args.seed
    return resolved


def _open_run(args, resolved: ResolvedConfig, command: str, env_id: str) -> RunManifest:
    """校验全部通过后才创建输出目录"""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.open(out)
    manifest.begin(command, resolved.config.seed, env_id)
    manifest.snapshot(resolved.source, resolved.snapshot)
    return manifest


def _check_dims(what: str, state_dim: int, action_dim: int, dataset_or_env) -> None:
    expected = (dataset_or_env.state_dim, dataset_or_env.action_dim)
    if (state_dim, action_dim) != expected:
        raise nk.ShapeError(what, f"维度 ({state_dim}, {action_dim}) 与 {dataset_or_env.env_id} 的 {expected} 不符")


def _load_dataset(path: str, config: AlignConfig) -> Dataset:
    dataset = load_dataset(path)
    if config.rtg_scale:
        dataset = dataclasses.replace(dataset, rtg_scale=config.rtg_scale)
    return dataset


# ---------------------------------------------------------------- 命令

def cmd_gen_data(args) -> int:
    resolved = resolve_config(args)
    config = resolved.config
    if args.env:
        config.data.env_id = args.env
    if args.episodes is not None:
        config.data.episodes = args.episodes
    if args.epsilon is not None:
        config.data.epsilon = args.epsilon
    config.ensure_valid()
    env = make_env(config.data.env_id, config.data.epsilon)

    manifest = _open_run(args, resolved, 'gen-data', env.env_id)
    _banner(args, f"📦 生成数据: {env.env_id}  回合 {config.data.episodes}  ε={config.data.epsilon:g}  种子 {config.seed}")
    with runtime_stage(manifest):
        dataset = generate(env, make_behavior(env, config.data.epsilon), config.data.episodes, config.seed,
                           rtg_scale=config.rtg_scale)
        path = Path(args.out) / DATASET_FILE
        save_dataset(dataset, path)
        manifest.add('dataset', path)
    manifest.finish()

    stats = dataset.stats
    _say(args, f"✅ 数据集已保存: {path}")
    print(f"episodes={stats.count} rejected={stats.rejected} return_min={stats.return_min:.6g} "
          f"return_max={stats.return_max:.6g} return_mean={stats.return_mean:.6g}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    resolved = resolve_config(args)
    config = resolved.config
    if args.steps is not None:
        config.critic.pretrain_steps = args.steps
    config.ensure_valid()
    dataset = _load_dataset(args.dataset, config)
    registered = make_env(dataset.env_id)
    _check_dims('pretrain', dataset.state_dim, dataset.action_dim, registered)

    manifest = _open_run(args, resolved, 'pretrain', dataset.env_id)
    steps = config.critic.pretrain_steps
    _banner(args, f"🎯 评论家预训练: {dataset.env_id}  {steps} 步  批 {config.critic.pretrain_batch}")
    with runtime_stage(manifest):
        spec = CriticSpec.from_config(config.critic, dataset.state_dim, dataset.action_dim,
                                      config.gamma, config.alpha)
        critic = CriticPair(spec, seed=config.seed, learning_rate=config.critic.learning_rate)
        losses = pretrain(critic, dataset, steps, config.critic.pretrain_batch, seed=config.seed)
        path = Path(args.out) / CRITIC_FILE
        critic.save(path)
        manifest.add_checkpoint('critic', path)
    manifest.finish()

    final = losses[-1] if losses else float('nan')
    _say(args, f"✅ 评论家已保存: {path}")
    print(f"final_td_loss={final:.17g}")
    return EXIT_OK


def cmd_train(args) -> int:
    resolved = resolve_config(args)
    config = resolved.config
    config.ensure_valid()
    if config.documentation_only:
        raise ConfigError(f"{resolved.source} 仅用于文档对照（原始规模超参数），不能在桌面规模训练")
    dataset = _load_dataset(args.dataset, config)
    critic = CriticPair.load(args.critic, learning_rate=config.critic_learning_rate,
                             target_noise_std=config.target_noise_std)
    _check_dims('train', critic.spec.state_dim, critic.spec.action_dim, dataset)
    check_critic_matches(critic, config)
    spec = PolicySpec.from_config(config.model, dataset.state_dim, dataset.action_dim,
                                  config.context_len, dataset.n_actions)
    model = PolicyModel(spec, seed=config.seed)

    out = Path(args.out)
    manifest = _open_run(args, resolved, 'train', dataset.env_id)
    metrics = MetricsLogger(out / METRICS_FILE)
    manifest.add('metrics', metrics.path, partial=True)
    manifest.write()
    interim: List[str] = ['metrics']

    def save_interval(epoch: int, model: PolicyModel, critic: CriticPair):
        done = epoch + 1
        if not config.checkpoint_every or done % config.checkpoint_every:
            return
        for name, obj in (('policy', model), ('critic', critic)):
            key = f'{name}_epoch{done:04d}'
            path = out / CHECKPOINT_DIR / f'{key}.ckpt'
            path.parent.mkdir(parents=True, exist_ok=True)
            obj.save(path)
            manifest.add_checkpoint(key, path, partial=True)
            interim.extend([key, f'{key}_descriptor'])
        manifest.write()
        _say(args, f"💾 第 {done} 个epoch的检查点已保存")

    _banner(args, f"🚀 协同训练: {dataset.env_id}  σ={config.sigma_e:g} λ={config.lambda_e:g} "
                  f"ΔRTG={config.delta_rtg:g}  {config.epochs}×{config.steps_per_epoch} 步")
    with runtime_stage(manifest, interim):
        result = train(model, critic, dataset, config, epoch_callback=save_interval, metrics=metrics)
        model.save(out / POLICY_FILE)
        critic.save(out / FINAL_CRITIC_FILE)
        manifest.add_checkpoint('policy', out / POLICY_FILE)
        manifest.add_checkpoint('critic_final', out / FINAL_CRITIC_FILE)
        for name in interim:
            manifest.add(name, out / manifest.artifacts[name])
    manifest.finish()

    _say(args, f"✅ 训练完成，输出目录: {out}")
    if result.rows:
        last = result.rows[-1]
        print(f"epochs={config.epochs} steps={last['step']} l_sl={last['l_sl']:.6g} "
              f"l_align={last['l_align']:.6g} l_q={last['l_q']:.6g}")
    else:
        print("epochs=0 steps=0")
    return EXIT_OK


def _targets(args, config: AlignConfig) -> np.ndarray:
    if args.targets:
        return np.asarray(args.targets, dtype=np.float64)
    if not args.dataset:
        raise ConfigError("需要 --targets 或 --dataset 来确定目标网格")
    dataset = _load_dataset(args.dataset, config)
    if args.grid_step:
        return stepped_grid(dataset.stats.return_min, dataset.stats.return_max, args.grid_step)
    if args.n_targets:
        return default_grid(dataset, args.n_targets)
    return grid_from_config(config.eval, dataset)


def cmd_eval_align(args) -> int:
    resolved = resolve_config(args)
    config = resolved.config
    if args.rollouts is not None:
        config.eval.rollouts = args.rollouts
    config.ensure_valid()
    model = PolicyModel.load(args.model)
    env = make_env(args.env or config.data.env_id, config.data.epsilon)
    if config.rtg_scale:
        env.rtg_scale = config.rtg_scale
    _check_dims('eval-align', model.spec.state_dim, model.spec.action_dim, env)
    targets = _targets(args, config)
    if targets.size == 0 or np.any(np.diff(targets) <= 0) or not np.all(np.isfinite(targets)):
        raise ValueError(f"目标网格必须非空、有限且严格递增: {targets}")
    seeds = args.seeds or [config.seed + i for i in range(config.eval.n_seeds)]

    manifest = _open_run(args, resolved, 'eval-align', env.env_id)
    _banner(args, f"📊 对齐评估: {env.env_id}  {targets.size} 个目标 × {config.eval.rollouts} rollout × "
                  f"{len(seeds)} 种子")
    with runtime_stage(manifest):
        report = alignment_sweep(model, env, targets, config.eval.rollouts, seeds)
        out = Path(args.out)
        emit_report(report, out / REPORT_TABLE_FILE, 'table')
        emit_report(report, out / REPORT_ROWS_FILE, 'rows')
        manifest.add('report_table', out / REPORT_TABLE_FILE)
        manifest.add('report_rows', out / REPORT_ROWS_FILE)
    manifest.finish()

    _say(args, f"✅ 报告已保存: {out / REPORT_TABLE_FILE}, {out / REPORT_ROWS_FILE}")
    print(f"M={report.m:.17g}")
    return EXIT_OK


def cmd_verify(args) -> int:
    caps = {
        'max_states': args.max_states,
        'max_levels': args.max_levels,
        'max_actions': args.max_actions,
        'instances': args.instances,
        'cap': args.cap,
    }
    seed = args.seed if args.seed is not None else 0

    _banner(args, f"🔍 精确验证: {args.suite}  种子 {seed}")
    try:
        results = run_suites(args.suite, seed=seed, **caps)
    except EnumerationBudgetError:
        raise
    except RUNTIME_ERRORS as e:
        raise RuntimeFailure(str(e)) from e

    for result in results:
        print(result.line())
    failed = [r for r in results if not r.passed]
    print(f"checks={len(results)} passed={len(results) - len(failed)} failed={len(failed)}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_compare(args) -> int:
    resolved = resolve_config(args)
    config = resolved.config
    config.ensure_valid()
    if config.documentation_only:
        raise ConfigError(f"{resolved.source} 仅用于文档对照（原始规模超参数），不能在桌面规模训练")
    seeds = args.seeds or [config.seed + i for i in range(config.eval.n_seeds)]
    study = STUDIES[args.study]
    runner = StudyRunner(study, config, seeds)

    manifest = _open_run(args, resolved, 'compare', runner.env.env_id)
    _banner(args, f"⚖️ 对照实验: {study.name}  变体 {', '.join(runner.configs)}  种子 {seeds}")
    with runtime_stage(manifest):
        outcome = runner.run()
        out = Path(args.out)
        write_study_rows(outcome.rows(), out / STUDY_ROWS_FILE)
        (out / STUDY_SUMMARY_FILE).write_text(outcome.render(), encoding='utf-8')
        manifest.add('compare_runs', out / STUDY_ROWS_FILE)
        manifest.add('compare_summary', out / STUDY_SUMMARY_FILE)
    manifest.finish()

    _say(args, f"{'✅' if outcome.passed else '❌'} {study.description}")
    print(outcome.line())
    return EXIT_OK if outcome.passed else EXIT_RUNTIME


def cmd_presets(args) -> int:
    registry = PresetRegistry()
    if args.name:
        print(registry.describe(args.name), end='')
        return EXIT_OK
    print("=" * 70)
    print("📚 可用预设")
    print("=" * 70)
    for name, info in registry.list_presets().items():
        flag = "  [仅文档]" if info['documentation_only'] else ""
        print(f"  {name:36s} - {info['description']}{flag}")
    print("=" * 70)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """主函数"""
    args = parse_args(argv)
    setup_logging(args)
    try:
        return args.handler(args)
    except RuntimeFailure as e:
        print(f"❌ 运行失败: {e}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_RUNTIME
    except VALIDATION_ERRORS as e:
        print(f"❌ 校验失败: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (QAlignError, OSError) as e:
        print(f"❌ 运行失败: {e}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
