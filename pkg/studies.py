#!/usr/bin/env python3
"""
对照实验模块
同一批数据与预训练评论家上训练若干配置变体，逐一做对齐扫描，再按各自的判据汇总
"""
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import numkit as nk
from analyzer import BAND_NAMES, AlignmentAnalyzer
from config import AlignConfig, ConfigError, setup_logger
from critic import CriticPair, CriticSpec, pretrain
from evalkit import AlignmentReport, alignment_sweep, grid_from_config
from policy import PolicyModel, PolicySpec
from presets import PresetRegistry, deep_merge
from trainer import train
from worldkit import generate, make_behavior, make_env

ALIGNMENT_MIN_REDUCTION = 0.30


@dataclass(frozen=True)
class Variant:
    """实验中的一个配置；preset 为 None 时就是基准配置本身"""
    name: str
    preset: Optional[str] = None


@dataclass(frozen=True)
class StudySpec:
    name: str
    description: str
    variants: Tuple[Variant, ...]


STUDIES: Dict[str, StudySpec] = {
    'alignment': StudySpec(
        'alignment', f'完整方法的对齐误差 M 比 λ_e = 0 基线至少低 {ALIGNMENT_MIN_REDUCTION:.0%}',
        (Variant('full'), Variant('no-align', 'ablation-no-align')),
    ),
    'drtg': StudySpec(
        'drtg', 'ΔRTG 从 0 增大时最高目标处的实际回报不下降，且大偏移比 0 高出一个标准误以上',
        (Variant('drtg-zero', 'ablation-drtg-zero'), Variant('base'), Variant('drtg-large', 'ablation-drtg-large')),
    ),
    'fixed-critic': StudySpec(
        'fixed-critic', '固定评论家的 M 高于协同训练，且多出的偏差集中在目标网格的低段',
        (Variant('co-trained'), Variant('fixed-critic', 'ablation-fixed-critic')),
    ),
}


@dataclass
class VariantRun:
    variant: str
    seed: int
    report: AlignmentReport

    @property
    def high_mean(self) -> float:
        return float(self.report.means[-1])

    @property
    def high_std_error(self) -> float:
        return float(self.report.stds[-1] / np.sqrt(max(int(self.report.counts[-1]), 1)))


@dataclass
class StudyOutcome:
    study: str
    passed: bool
    summary: Dict[str, object]
    runs: List[VariantRun] = field(default_factory=list)

    def line(self) -> str:
        """最终输出行：key=value，最后是 passed"""
        parts = [f"study={self.study}"]
        for key, value in self.summary.items():
            parts.append(f"{key}={value:.6g}" if isinstance(value, float) else f"{key}={value}")
        parts.append(f"passed={'true' if self.passed else 'false'}")
        return ' '.join(parts)

    def rows(self) -> List[Dict[str, object]]:
        rows = []
        for run in self.runs:
            bands = AlignmentAnalyzer(run.report).bands()
            rows.append({
                'study': self.study,
                'variant': run.variant,
                'seed': run.seed,
                'm': run.report.m,
                'high_target': float(run.report.targets[-1]),
                'high_mean': run.high_mean,
                'band_low': bands['low'],
                'band_middle': bands['middle'],
                'band_high': bands['high'],
            })
        return rows

    def render(self) -> str:
        """按变体汇总的文本表"""
        df = pd.DataFrame(self.rows())
        lines = [
            "=" * 70,
            f"对照实验: {self.study}",
            STUDIES[self.study].description if self.study in STUDIES else '',
            "=" * 70,
            "",
        ]
        if not df.empty:
            table = df.groupby('variant', sort=False)[['m', 'high_mean', 'band_low', 'band_middle', 'band_high']].mean()
            lines.append(table.to_string(float_format=lambda v: f"{v:.6g}"))
            lines.append("")
        lines.append(self.line())
        lines.append("")
        return "\n".join(lines)


def variant_configs(study: StudySpec, base: AlignConfig,
                    registry: Optional[PresetRegistry] = None) -> Dict[str, AlignConfig]:
    """
    各变体的完整配置：基准配置叠加消融预设文件自己声明的键

    Raises:
        ConfigError: 某个变体配置不合法
    """
    registry = registry or PresetRegistry()
    base_raw = base.to_dict()
    configs = {}
    for variant in study.variants:
        raw = base_raw if variant.preset is None else deep_merge(base_raw, registry.overrides(variant.preset))
        config = AlignConfig.from_dict(raw)
        config.ensure_valid()
        configs[variant.name] = config
    return configs


def _by_variant(runs: Sequence[VariantRun]) -> Dict[str, List[VariantRun]]:
    grouped: Dict[str, List[VariantRun]] = {}
    for run in runs:
        grouped.setdefault(run.variant, []).append(run)
    return grouped


def _mean_m(runs: Sequence[VariantRun]) -> float:
    return float(np.mean([r.report.m for r in runs]))


def judge_alignment(runs: Sequence[VariantRun]) -> Tuple[bool, Dict[str, object]]:
    grouped = _by_variant(runs)
    m_full, m_plain = _mean_m(grouped['full']), _mean_m(grouped['no-align'])
    reduction = 1.0 - m_full / m_plain if m_plain > 0 else 0.0
    return reduction >= ALIGNMENT_MIN_REDUCTION, {'m_full': m_full, 'm_no_align': m_plain, 'reduction': reduction}


def judge_drtg(runs: Sequence[VariantRun]) -> Tuple[bool, Dict[str, object]]:
    grouped = _by_variant(runs)
    order = ('drtg-zero', 'base', 'drtg-large')
    highs = {name: float(np.mean([r.high_mean for r in grouped[name]])) for name in order}
    trend = all(a <= b for a, b in zip([highs[n] for n in order[:-1]], [highs[n] for n in order[1:]]))

    zero = sorted(grouped['drtg-zero'], key=lambda r: r.seed)
    large = sorted(grouped['drtg-large'], key=lambda r: r.seed)
    margin = highs['drtg-large'] - highs['drtg-zero']
    if len(zero) >= 2:
        diffs = np.array([b.high_mean - a.high_mean for a, b in zip(zero, large)])
        std_error = float(diffs.std(ddof=1) / np.sqrt(diffs.size))
    else:
        # 单种子时用rollout层面的标准误
        std_error = float(np.hypot(zero[0].high_std_error, large[0].high_std_error))
    summary = {'high_zero': highs['drtg-zero'], 'high_base': highs['base'], 'high_large': highs['drtg-large'],
               'margin': margin, 'std_error': std_error}
    return trend and margin > std_error, summary


def judge_fixed_critic(runs: Sequence[VariantRun]) -> Tuple[bool, Dict[str, object]]:
    grouped = _by_variant(runs)
    co_trained = {r.seed: r for r in grouped['co-trained']}
    excess = pd.DataFrame([
        AlignmentAnalyzer(fixed.report).excess_over(AlignmentAnalyzer(co_trained[fixed.seed].report))
        for fixed in grouped['fixed-critic']
    ], columns=list(BAND_NAMES)).mean(skipna=True)
    finite = {name: float(excess[name]) for name in BAND_NAMES if np.isfinite(excess[name])}
    band = max(finite, key=finite.get) if finite else 'none'

    m_co, m_fixed = _mean_m(grouped['co-trained']), _mean_m(grouped['fixed-critic'])
    summary: Dict[str, object] = {'m_co_trained': m_co, 'm_fixed': m_fixed}
    summary.update({f'excess_{name}': float(excess[name]) for name in BAND_NAMES})
    summary['band'] = band
    return m_fixed > m_co and band == 'low', summary


JUDGES: Dict[str, Callable[[Sequence[VariantRun]], Tuple[bool, Dict[str, object]]]] = {
    'alignment': judge_alignment,
    'drtg': judge_drtg,
    'fixed-critic': judge_fixed_critic,
}


class StudyRunner:
    """对照实验执行器"""

    def __init__(self, study: StudySpec, base: AlignConfig, seeds: Sequence[int],
                 registry: Optional[PresetRegistry] = None, workers: Optional[int] = None):
        """
        初始化执行器（只做校验，不运行）

        Args:
            study: 实验定义
            base: 基准配置
            seeds: 种子；每个种子单独生成数据并预训练评论家
            workers: 扫描线程数

        Raises:
            ConfigError: 变体配置不合法或种子为空
            UnknownEnvError: 环境未注册
        """
        if not seeds:
            raise ConfigError("对照实验至少需要一个种子")
        self.study = study
        self.base = base
        self.seeds = [int(s) for s in seeds]
        self.workers = workers
        self.configs = variant_configs(study, base, registry)
        self.env = make_env(base.data.env_id, base.data.epsilon)
        if base.rtg_scale:
            self.env.rtg_scale = base.rtg_scale
        self.logger = setup_logger(self.__class__.__name__)

    def run_seed(self, seed: int) -> List[VariantRun]:
        """一个种子：生成数据 -> 预训练评论家 -> 每个变体从同一评论家副本出发训练并扫描"""
        base = self.base
        dataset = generate(self.env, make_behavior(self.env, base.data.epsilon), base.data.episodes, seed,
                           workers=self.workers, rtg_scale=base.rtg_scale)
        critic_spec = CriticSpec.from_config(base.critic, dataset.state_dim, dataset.action_dim,
                                             base.gamma, base.alpha)
        critic = CriticPair(critic_spec, seed=seed, learning_rate=base.critic.learning_rate)
        pretrain(critic, dataset, base.critic.pretrain_steps, base.critic.pretrain_batch, seed=seed)
        self.logger.info(f"种子 {seed}: {len(dataset)} 条轨迹，评论家预训练 {base.critic.pretrain_steps} 步")

        runs = []
        for name, config in self.configs.items():
            config = dataclasses.replace(config, seed=seed)
            variant_critic = critic.copy()
            variant_critic.optim = nk.OptimState(learning_rate=config.critic_learning_rate)
            spec = PolicySpec.from_config(config.model, dataset.state_dim, dataset.action_dim,
                                          config.context_len, dataset.n_actions)
            model = PolicyModel(spec, seed=seed)
            train(model, variant_critic, dataset, config)
            targets = grid_from_config(config.eval, dataset)
            report = alignment_sweep(model, self.env, targets, config.eval.rollouts, [seed], workers=self.workers)
            self.logger.info(f"种子 {seed} 变体 {name}: M = {report.m:.6g}")
            runs.append(VariantRun(variant=name, seed=seed, report=report))
        return runs

    def run(self) -> StudyOutcome:
        runs = [run for seed in self.seeds for run in self.run_seed(seed)]
        passed, summary = JUDGES[self.study.name](runs)
        outcome = StudyOutcome(study=self.study.name, passed=passed, summary=summary, runs=runs)
        self.logger.info(outcome.line())
        return outcome
