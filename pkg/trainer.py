#!/usr/bin/env python3
"""
训练模块
策略与评论家的协同训练：监督损失 + 对齐损失的Actor更新、带ΔRTG扰动目标的评论家更新、目标网络维护
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

import numkit as nk
from config import AlignConfig, ConfigError, QAlignError, setup_logger
from critic import CriticPair, polyak_update
from policy import ContextWindow, PolicyModel, PolicyOutput, shift_rtg
from worldkit import Dataset, sample_windows

METRIC_COLUMNS = ('epoch', 'step', 'l_sl', 'l_align', 'l_q', 'indicator_rate',
                  'actor_grad_norm', 'critic_grad_norm')


class TrainingError(QAlignError):
    """损失出现非有限值等导致本步中止"""


@dataclass
class RngStreams:
    """互相独立的随机数流：窗口采样、δ/目标噪声、dropout"""
    sampler: np.random.Generator
    noise: np.random.Generator
    dropout: np.random.Generator


def derive_streams(seed: int) -> RngStreams:
    sampler, noise, dropout = np.random.SeedSequence(seed).spawn(3)
    return RngStreams(sampler=np.random.default_rng(sampler),
                      noise=np.random.default_rng(noise),
                      dropout=np.random.default_rng(dropout))


def sample_delta(sigma_e: float, mode: str, rng: np.random.Generator) -> float:
    """
    序列级RTG噪声 δ

    无论 σ_e 取值都会消耗一次标准正态抽样，使随机流的推进与 σ_e 无关。

    Args:
        sigma_e: 标准差 >= 0
        mode: gaussian 或 half_normal（取绝对值，δ >= 0）
        rng: 噪声流

    Returns:
        float: δ
    """
    eps = float(rng.standard_normal())
    if sigma_e == 0:
        return 0.0
    delta = sigma_e * eps
    if mode == 'half_normal':
        return abs(delta)
    if mode != 'gaussian':
        raise ValueError(f"未知的噪声模式: {mode}")
    return delta


def supervised_loss(output: PolicyOutput, window: ContextWindow) -> nk.Tensor:
    """L_SL = Σ_有效槽位 ‖s_i - ŝ_i‖² + ‖a_i - â_i‖²（批内求和）"""
    mask = window.valid_mask.astype(np.float64)
    state_err = nk.sum_(nk.square(nk.sub(output.predicted_states, window.states)), axis=-1)
    action_err = nk.sum_(nk.square(nk.sub(output.predicted_actions, window.actions)), axis=-1)
    return nk.sum_(nk.mul(nk.add(state_err, action_err), mask))


def alignment_penalty(q_shifted: nk.Tensor, q_reference: np.ndarray, delta, valid: np.ndarray,
                      indicator_mode: str = 'asymmetric',
                      penalty_mode: str = 'absolute') -> Tuple[nk.Tensor, np.ndarray]:
    """
    逐槽位的对齐惩罚

    asymmetric: sgn(δ)(Q^δ - Q) < 0 的槽位计 |Q^δ - Q|（squared 时为平方），其余为0；
    symmetric: 其余有效槽位系数为 -1（δ = 0 时没有槽位触发，全部计 -1）。

    Args:
        q_shifted: Q(s_i, â_i^δ)，形状 [..., k]
        q_reference: 梯度屏障后的 Q(s_i, â_i)
        delta: 标量或每个窗口一个 δ
        valid: 有效槽位

    Returns:
        (惩罚总和 Tensor, 指示函数触发的布尔数组)
    """
    sign = np.sign(np.asarray(delta, dtype=np.float64))
    if sign.ndim == 1:
        sign = sign[:, None]
    diff = nk.sub(q_shifted, q_reference)
    ordered_gap = sign * diff.value
    fired = (ordered_gap < 0) & valid
    magnitude = nk.abs_(diff) if penalty_mode == 'absolute' else nk.square(diff)
    if indicator_mode == 'asymmetric':
        coefficient = fired.astype(np.float64)
    else:
        holds = valid & ~fired
        coefficient = fired.astype(np.float64) - holds.astype(np.float64)
    return nk.sum_(nk.mul(magnitude, coefficient)), fired


def _critic_q(critic: CriticPair, states, actions, use_min: bool) -> nk.Tensor:
    q1 = critic.evaluate('online1', states, actions)
    if not use_min:
        return q1
    q2 = critic.evaluate('online2', states, actions)
    pick_first = (q1.value <= q2.value).astype(np.float64)
    return nk.add(nk.mul(q1, pick_first), nk.mul(q2, 1.0 - pick_first))


@dataclass
class AlignmentTerms:
    loss: nk.Tensor
    fired: np.ndarray
    valid_slots: int

    @property
    def indicator_rate(self) -> float:
        return float(self.fired.sum()) / self.valid_slots if self.valid_slots else 0.0


def alignment_loss(model: PolicyModel, critic: CriticPair, window: ContextWindow, delta,
                   indicator_mode: str = 'asymmetric', penalty_mode: str = 'absolute',
                   use_min_q: bool = False, rng: Optional[np.random.Generator] = None,
                   output: Optional[PolicyOutput] = None) -> AlignmentTerms:
    """
    对齐损失 L_Align

    参考分支 Q(s_i, â_i) 经梯度屏障，梯度只经过扰动分支 Q(s_i, â_i^δ) 流向策略参数。

    Args:
        model: 策略
        critic: 评论家（其参数在Actor更新中视为常量）
        window: 单窗口或窗口批
        delta: 标量或每个窗口一个 δ
        output: 已算好的未扰动预测（可选，复用监督损失的前向）

    Returns:
        AlignmentTerms
    """
    if output is None:
        output = model.predict(window, rng)
    shifted = model.predict(shift_rtg(window, delta), rng)
    reference_actions = nk.stop_gradient(output.predicted_actions)
    q_reference = nk.stop_gradient(_critic_q(critic, window.states, reference_actions, use_min_q)).value
    q_shifted = _critic_q(critic, window.states, shifted.predicted_actions, use_min_q)
    loss, fired = alignment_penalty(q_shifted, q_reference, delta, window.valid_mask,
                                    indicator_mode, penalty_mode)
    return AlignmentTerms(loss=loss, fired=fired, valid_slots=int(window.valid_mask.sum()))


@dataclass
class ActorStepResult:
    l_sl: float
    l_align: float
    l_total: float
    indicator_rate: float
    grad_norm: float


def actor_step(model: PolicyModel, critic: CriticPair, windows: ContextWindow, config: AlignConfig,
               optim: nk.OptimState, streams: RngStreams) -> ActorStepResult:
    """
    一步Actor更新：L_total = (L_SL + λ_e·L_Align) / B

    每个窗口抽一个新的 δ。只更新策略参数，评论家参数不参与求导。
    """
    batch = windows.rtgs.shape[0]
    deltas = np.array([sample_delta(config.sigma_e, config.noise_mode, streams.noise) for _ in range(batch)])
    dropout_rng = streams.dropout if model.spec.dropout > 0 else None
    record: Dict[str, Union[float, AlignmentTerms]] = {}

    def objective():
        output = model.predict(windows, dropout_rng)
        sl = supervised_loss(output, windows)
        record['l_sl'] = sl.item()
        if config.lambda_e == 0:
            return nk.scale(sl, 1.0 / batch)
        terms = alignment_loss(model, critic, windows, deltas, config.indicator_mode, config.penalty_mode,
                               config.align_with_min_q, dropout_rng, output=output)
        record['align'] = terms
        return nk.scale(nk.add(sl, nk.scale(terms.loss, config.lambda_e)), 1.0 / batch)

    try:
        total = nk.grad(objective, model.params)
        if config.lambda_e == 0:
            # 权重为0时对齐项只做遥测，不进入梯度
            record['align'] = alignment_loss(model, critic, windows, deltas, config.indicator_mode,
                                             config.penalty_mode, config.align_with_min_q, dropout_rng)
    except nk.NonFiniteError as e:
        model.params.zero_grad()
        raise TrainingError(f"Actor损失出现非有限值，本步中止: {e}")
    if not np.isfinite(total):
        model.params.zero_grad()
        raise TrainingError(f"Actor总损失非有限: {total}")

    grad_norm = model.params.grad_norm()
    nk.adam_step(model.params, optim)
    model.params.zero_grad()
    terms = record['align']
    return ActorStepResult(
        l_sl=record['l_sl'] / batch,
        l_align=terms.loss.item() / batch,
        l_total=total,
        indicator_rate=terms.indicator_rate,
        grad_norm=grad_norm,
    )


def critic_targets(critic: CriticPair, target_policy: PolicyModel, windows: ContextWindow,
                   config: AlignConfig, rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    ΔRTG扰动的TD目标

    槽位 i 的目标 y'_i = r_i + γ min_m Q_ψm'(s_{i+1}, â'_{i+1})，其中 â' 是目标策略在
    shift_rtg(window, ΔRTG) 上的预测；终止槽位 y'_i = r_i。窗口最后一个非终止槽位没有后继，权重为0。

    Returns:
        (targets [B, k], weights [B, k])
    """
    if windows.rewards is None or windows.dones is None:
        raise TrainingError("评论家更新需要带 rewards/dones 的窗口")
    valid = windows.valid_mask
    dones = windows.dones & valid
    batch, k = windows.rtgs.shape
    targets = windows.rewards.astype(np.float64).copy()
    weights = dones.astype(np.float64)
    if k > 1:
        shifted = shift_rtg(windows, config.delta_rtg)
        next_actions = target_policy.predict(shifted).predicted_actions.value[:, 1:]
        bootstrap = critic.bootstrap_value(windows.states[:, 1:], next_actions, rng)
        pair = valid[:, :-1] & valid[:, 1:] & ~dones[:, :-1]
        targets[:, :-1] = np.where(pair, windows.rewards[:, :-1] + config.gamma * bootstrap, targets[:, :-1])
        weights[:, :-1] = np.maximum(weights[:, :-1], pair.astype(np.float64))
    return targets, weights


@dataclass
class CriticStepResult:
    loss: float
    grad_norm: float


def critic_step(critic: CriticPair, target_policy: PolicyModel, windows: ContextWindow, config: AlignConfig,
                rng: Optional[np.random.Generator] = None) -> Optional[CriticStepResult]:
    """
    一步评论家更新；freeze_critic 时整步跳过（返回 None）
    """
    if config.freeze_critic:
        return None
    targets, weights = critic_targets(critic, target_policy, windows, config, rng)
    if not np.all(np.isfinite(targets)):
        raise TrainingError("评论家TD目标出现非有限值，本步中止")
    if weights.sum() == 0:
        return CriticStepResult(loss=0.0, grad_norm=0.0)
    try:
        loss = critic.regress(windows.states, windows.actions, targets, weights)
    except nk.NonFiniteError as e:
        critic.online.zero_grad()
        raise TrainingError(f"评论家损失出现非有限值，本步中止: {e}")
    return CriticStepResult(loss=loss, grad_norm=critic.last_grad_norm)


@dataclass
class TrainResult:
    model: PolicyModel
    critic: CriticPair
    target_policy: PolicyModel
    rows: List[Dict[str, float]] = field(default_factory=list)


EpochCallback = Callable[[int, PolicyModel, CriticPair], None]


def check_critic_matches(critic: CriticPair, config: AlignConfig):
    """评论家检查点里的 γ/α 必须与训练配置一致，否则TD目标与预训练时的定义不同"""
    mismatched = [f"{name}: 检查点 {stored} / 配置 {wanted}"
                  for name, stored, wanted in (('gamma', critic.spec.gamma, config.gamma),
                                               ('alpha', critic.spec.alpha, config.alpha))
                  if not np.isclose(stored, wanted, rtol=0.0, atol=1e-12)]
    if mismatched:
        raise ConfigError(f"评论家与训练配置不一致（{'; '.join(mismatched)}），请用同一配置重新预训练")


def train(model: PolicyModel, critic: CriticPair, dataset: Dataset, config: AlignConfig,
          epoch_callback: Optional[EpochCallback] = None, metrics=None) -> TrainResult:
    """
    协同训练主循环

    每步: 采样窗口批 -> 评论家更新 -> Actor更新 -> 目标策略与目标评论家按 α 做Polyak更新。
    每个epoch结束写一行指标。

    Args:
        model: 策略（原地更新）
        critic: 预训练好的评论家（原地更新）
        dataset: 行为数据集
        config: 训练配置（先校验，不合法直接拒绝）
        epoch_callback: 每个epoch结束后调用 (epoch, model, critic)
        metrics: 带 append(row) 的指标记录器

    Returns:
        TrainResult
    """
    config.ensure_valid()
    if len(dataset) == 0:
        raise TrainingError("数据集为空")
    if (model.spec.state_dim, model.spec.action_dim) != (dataset.state_dim, dataset.action_dim):
        raise nk.ShapeError('train', f"策略维度与数据集 ({dataset.state_dim}, {dataset.action_dim}) 不符")
    if (critic.spec.state_dim, critic.spec.action_dim) != (dataset.state_dim, dataset.action_dim):
        raise nk.ShapeError('train', f"评论家维度与数据集 ({dataset.state_dim}, {dataset.action_dim}) 不符")
    check_critic_matches(critic, config)

    logger = setup_logger('Trainer')
    streams = derive_streams(config.seed)
    critic.target_noise_std = config.target_noise_std
    target_policy = model.clone()
    optim = nk.OptimState(learning_rate=config.learning_rate)
    result = TrainResult(model=model, critic=critic, target_policy=target_policy)

    step = 0
    for epoch in range(config.epochs):
        sums = dict.fromkeys(METRIC_COLUMNS[2:], 0.0)
        for _ in range(config.steps_per_epoch):
            windows = sample_windows(dataset, streams.sampler, config.context_len, config.batch_size)
            critic_result = critic_step(critic, target_policy, windows, config, streams.noise)
            actor = actor_step(model, critic, windows, config, optim, streams)
            target_policy.params.polyak_from(model.params, config.alpha)
            if not config.freeze_critic:
                polyak_update(critic, config.alpha)
            step += 1

            sums['l_sl'] += actor.l_sl
            sums['l_align'] += actor.l_align
            sums['indicator_rate'] += actor.indicator_rate
            sums['actor_grad_norm'] += actor.grad_norm
            if critic_result is not None:
                sums['l_q'] += critic_result.loss
                sums['critic_grad_norm'] += critic_result.grad_norm

        row = {'epoch': epoch, 'step': step}
        row.update({name: value / config.steps_per_epoch for name, value in sums.items()})
        result.rows.append(row)
        if metrics is not None:
            metrics.append(row)
        logger.info(f"epoch {epoch + 1}/{config.epochs}  L_SL {row['l_sl']:.5g}  "
                    f"L_Align {row['l_align']:.5g}  L_Q {row['l_q']:.5g}  触发率 {row['indicator_rate']:.3f}")
        if epoch_callback is not None:
            epoch_callback(epoch, model, critic)
    return result
