#!/usr/bin/env python3
"""
评估模块
RTG条件rollout、对齐扫描、RMSE指标与报告输出
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from analyzer import AlignmentAnalyzer
from config import EvalConfig, QAlignError, setup_logger, worker_threads
from exporter import read_report_rows, write_report_rows
from policy import ContextWindow, PolicyModel, act
from worldkit import Dataset, Trajectory, annotate_rtg

REPORT_FORMATS = ('table', 'rows')

logger = setup_logger('evalkit')


class RolloutError(QAlignError):
    """rollout 中途环境出错；携带已走过的部分轨迹和 (目标, rollout编号) 坐标"""

    def __init__(self, message: str, partial: Optional[Trajectory] = None,
                 target: Optional[float] = None, rollout_index: Optional[int] = None):
        super().__init__(message)
        self.partial = partial
        self.target = target
        self.rollout_index = rollout_index


@dataclass
class RolloutResult:
    episode_return: float
    trajectory: Trajectory
    rtg_tokens: np.ndarray
    progress: np.ndarray


@dataclass
class AlignmentReport:
    """对齐扫描结果：每个目标的实际回报均值/标准差/次数，以及 M"""
    targets: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    counts: np.ndarray
    env_id: str = ''
    seeds: List[int] = field(default_factory=list)
    m: float = float('nan')

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.isnan(self.m) and self.targets.size:
            self.m = rmse(self)

    def body(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.targets, self.means, self.stds, self.counts

    def same_body(self, other: 'AlignmentReport') -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.body(), other.body()))


def _partial_trajectory(states, actions, rewards, env_id: str, seed: int) -> Trajectory:
    if not rewards:
        empty = np.zeros(0)
        return Trajectory(states=np.zeros((0, 0)), actions=np.zeros((0, 0)), rewards=empty, rtgs=empty,
                          seed=seed, env_id=env_id, behavior_id='policy')
    rewards = np.array(rewards)
    return Trajectory(states=np.array(states), actions=np.array(actions), rewards=rewards,
                      rtgs=annotate_rtg(rewards), seed=seed, env_id=env_id, behavior_id='policy')


def _rolling_window(rtgs: List[float], states: List[np.ndarray], actions: List[np.ndarray],
                    k: int, state_dim: int, action_dim: int) -> ContextWindow:
    """最近 k 步（当前步的动作槽位为零）"""
    t = len(states) - 1
    lo = max(0, t - k + 1)
    pad = k - (t + 1 - lo)
    window = ContextWindow(
        rtgs=np.zeros(k), states=np.zeros((k, state_dim)), actions=np.zeros((k, action_dim)),
        timesteps=np.zeros(k, dtype=np.int64), valid_mask=np.zeros(k, dtype=bool),
    )
    window.rtgs[pad:] = rtgs[lo:]
    window.states[pad:] = states[lo:]
    if t > lo:
        window.actions[pad:k - 1] = actions[lo:t]
    window.timesteps[pad:] = np.arange(lo, t + 1)
    window.valid_mask[pad:] = True
    return window


def conditioned_rollout(model: PolicyModel, env, target_rtg: float, seed: int) -> RolloutResult:
    """
    以目标回报为条件跑一个回合

    初始rtg token = target_rtg / rtg_scale，每步观测到奖励 r 后减去 r / rtg_scale（不截断到0）。

    Args:
        model: 策略（只读）
        env: 环境实例（本函数独占使用）
        target_rtg: 目标回报（原始奖励单位）
        seed: 环境随机数种子

    Returns:
        RolloutResult: 未折扣的原始奖励之和与轨迹
    """
    if not np.isfinite(target_rtg):
        raise ValueError(f"目标回报必须有限: {target_rtg}")
    rng = np.random.default_rng(seed)
    spec = model.spec
    state = env.reset(rng)
    token = target_rtg / env.rtg_scale
    rtgs: List[float] = []
    states: List[np.ndarray] = []
    actions: List[np.ndarray] = []
    rewards: List[float] = []
    progress: List[float] = []

    for _ in range(env.horizon):
        rtgs.append(token)
        states.append(np.asarray(state, dtype=np.float64))
        window = _rolling_window(rtgs, states, actions, spec.context_len, spec.state_dim, spec.action_dim)
        action = act(model, window)
        try:
            result = env.step(action)
        except Exception as e:
            partial = _partial_trajectory(states[:-1], actions, rewards, env.env_id, seed)
            raise RolloutError(f"{env.env_id} 第 {len(rewards)} 步出错: {e}", partial=partial)
        if not (np.all(np.isfinite(result.state)) and np.isfinite(result.reward)):
            partial = _partial_trajectory(states[:-1], actions, rewards, env.env_id, seed)
            raise RolloutError(f"{env.env_id} 第 {len(rewards)} 步返回非有限值", partial=partial)
        actions.append(np.asarray(action, dtype=np.float64))
        rewards.append(result.reward)
        progress.append(result.progress)
        token = token - result.reward / env.rtg_scale
        state = result.state
        if result.done:
            break

    trajectory = _partial_trajectory(states, actions, rewards, env.env_id, seed)
    return RolloutResult(episode_return=float(np.sum(rewards)), trajectory=trajectory,
                         rtg_tokens=np.array(rtgs), progress=np.array(progress))


def rollout_seed(seed: int, target_index: int, rollout_index: int) -> int:
    """由 (种子, 目标编号, rollout编号) 派生的环境种子"""
    return int(np.random.SeedSequence([seed, target_index, rollout_index]).generate_state(1)[0])


def alignment_sweep(model: PolicyModel, env, targets: Sequence[float], rollouts: int,
                    seeds: Sequence[int], workers: Optional[int] = None) -> AlignmentReport:
    """
    对齐扫描：对每个目标跑 rollouts × len(seeds) 个回合，记录实际回报均值/标准差

    rollout 的随机数流只由坐标派生，并发与串行执行结果一致。

    Args:
        model: 策略（并发只读）
        env: 环境模板（每个rollout用 spawn() 得到独立实例）
        targets: 严格递增的目标回报网格
        rollouts: 每个种子每个目标的回合数 >= 1
        seeds: 种子集合
        workers: 线程数，默认 RCSL_ALIGN_THREADS

    Returns:
        AlignmentReport
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size == 0:
        raise ValueError("目标网格为空")
    if np.any(np.diff(targets) <= 0):
        raise ValueError("目标网格必须严格递增")
    if rollouts < 1 or not seeds:
        raise ValueError("rollout数必须 >= 1 且至少一个种子")

    tasks = [(j, i, s, r) for j in range(targets.size) for i, s in enumerate(seeds) for r in range(rollouts)]

    def run(task) -> float:
        j, i, s, r = task
        index = i * rollouts + r
        try:
            return conditioned_rollout(model, env.spawn(), float(targets[j]), rollout_seed(s, j, r)).episode_return
        except RolloutError as e:
            raise RolloutError(f"目标 {targets[j]:g} 的第 {index} 个rollout失败: {e}",
                               partial=e.partial, target=float(targets[j]), rollout_index=index)

    with ThreadPoolExecutor(max_workers=workers or worker_threads()) as executor:
        returns = list(executor.map(run, tasks))

    per_target = np.array(returns).reshape(targets.size, len(seeds) * rollouts)
    report = AlignmentReport(
        targets=targets,
        means=per_target.mean(axis=1),
        stds=per_target.std(axis=1),
        counts=np.full(targets.size, per_target.shape[1]),
        env_id=env.env_id,
        seeds=[int(s) for s in seeds],
    )
    logger.info(f"{env.env_id}: {targets.size} 个目标 × {per_target.shape[1]} 次rollout，M = {report.m:.6g}")
    return report


def rmse(report: AlignmentReport) -> float:
    """M = sqrt(mean_j (实际均值_j - 目标_j)²)"""
    if report.targets.size < 1:
        raise ValueError("报告至少需要一个目标")
    deviations = report.means - report.targets
    return float(np.sqrt(np.mean(deviations * deviations)))


def default_grid(dataset: Dataset, n: int = 12) -> np.ndarray:
    """数据集最小到最大回报之间均匀取 n 个目标"""
    lo, hi = dataset.stats.return_min, dataset.stats.return_max
    if hi <= lo:
        return np.array([lo])
    return np.linspace(lo, hi, n)


def stepped_grid(lo: float, hi: float, step: float = 100.0) -> np.ndarray:
    """从 lo 开始按固定步长递增到不超过 hi"""
    if step <= 0:
        raise ValueError(f"步长必须 > 0: {step}")
    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(max(count, 1))


def grid_from_config(eval_config: EvalConfig, dataset: Dataset) -> np.ndarray:
    if eval_config.grid_step:
        return stepped_grid(dataset.stats.return_min, dataset.stats.return_max, eval_config.grid_step)
    return default_grid(dataset, eval_config.n_targets)


def emit_report(report: AlignmentReport, path: Union[str, Path], format: str = 'rows'):
    """
    写出报告

    Args:
        report: 对齐报告
        path: 输出路径
        format: table（对齐的可读汇总 + M）或 rows（每个目标一行 target,mean,std,count）
    """
    if format not in REPORT_FORMATS:
        raise ValueError(f"未知的报告格式: {format}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == 'rows':
        write_report_rows(report, path)
    else:
        path.write_text(AlignmentAnalyzer(report).render_table(), encoding='utf-8')


def parse_report_rows(path: Union[str, Path]) -> AlignmentReport:
    """读回 rows 格式的报告主体（env_id 与种子不在该格式中）"""
    frame = read_report_rows(path)
    return AlignmentReport(targets=frame["target"].to_numpy(), means=frame["mean"].to_numpy(),
                           stds=frame["std"].to_numpy(), counts=frame["count"].to_numpy())
