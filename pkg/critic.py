#!/usr/bin/env python3
"""
双Q评论家模块
两个在线Q网络 + 目标副本：Q值评估、行为数据上的SARSA式双Q预训练、Polyak目标更新
"""
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import yaml

import numkit as nk
from config import CriticConfig, QAlignError, setup_logger

WHICH = ('online1', 'online2', 'target1', 'target2', 'target_min')
NETS = ('q1', 'q2')


class CriticError(QAlignError):
    """评论家输入或训练目标不合法"""


@dataclass
class CriticSpec:
    """评论家结构描述，随检查点保存"""
    state_dim: int
    action_dim: int
    hidden_width: int = 64
    hidden_layers: int = 3
    gamma: float = 0.99
    alpha: float = 0.005

    @classmethod
    def from_config(cls, critic: CriticConfig, state_dim: int, action_dim: int,
                    gamma: float, alpha: float) -> 'CriticSpec':
        return cls(state_dim=state_dim, action_dim=action_dim,
                   hidden_width=critic.hidden_width, hidden_layers=critic.hidden_layers,
                   gamma=gamma, alpha=alpha)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TransitionBatch:
    """(s, a, r, s', a', done) 批；done 的行 s'/a' 仅占位"""
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return int(self.rewards.shape[0])


class CriticPair:
    """Q_ψ1, Q_ψ2 及其目标网络"""

    def __init__(self, spec: CriticSpec, seed: Optional[int] = 0, learning_rate: float = 3e-4,
                 target_noise_std: float = 0.0, online: Optional[nk.ParamStore] = None,
                 target: Optional[nk.ParamStore] = None):
        self.spec = spec
        self.online = online if online is not None else self._init_params(np.random.default_rng(seed))
        self.target = target if target is not None else self.online.copy()
        self.optim = nk.OptimState(learning_rate=learning_rate)
        self.target_noise_std = target_noise_std
        self.last_grad_norm = 0.0
        self.logger = setup_logger(self.__class__.__name__)

    @property
    def gamma(self) -> float:
        return self.spec.gamma

    @property
    def alpha(self) -> float:
        return self.spec.alpha

    def _init_params(self, rng: np.random.Generator) -> nk.ParamStore:
        s = self.spec
        store = nk.ParamStore()
        for net in NETS:
            fan_in = s.state_dim + s.action_dim
            for layer in range(s.hidden_layers):
                bound = 1.0 / np.sqrt(fan_in)
                store.add(f'{net}.hidden{layer}.w', rng.uniform(-bound, bound, size=(fan_in, s.hidden_width)))
                store.add(f'{net}.hidden{layer}.b', np.zeros(s.hidden_width))
                fan_in = s.hidden_width
            bound = 1.0 / np.sqrt(fan_in)
            store.add(f'{net}.out.w', rng.uniform(-bound, bound, size=(fan_in, 1)))
            store.add(f'{net}.out.b', np.zeros(1))
        return store

    def _mlp(self, store: nk.ParamStore, net: str, states, actions) -> nk.Tensor:
        x = nk.concat([states, actions], axis=-1)
        for layer in range(self.spec.hidden_layers):
            x = nk.add(nk.matmul(x, store[f'{net}.hidden{layer}.w']), store[f'{net}.hidden{layer}.b'])
            x = nk.gelu(x)
        out = nk.add(nk.matmul(x, store[f'{net}.out.w']), store[f'{net}.out.b'])
        return nk.reshape(out, out.shape[:-1])

    def evaluate(self, which: str, states, actions) -> nk.Tensor:
        """
        批量Q值（可对动作求导）

        Args:
            which: online1/online2/target1/target2/target_min
            states: [..., state_dim]
            actions: [..., action_dim]，可以是策略输出的 Tensor

        Returns:
            nk.Tensor: 形状 [...]
        """
        if which not in WHICH:
            raise CriticError(f"未知的Q网络选择: {which}")
        states = nk.as_tensor(states)
        actions = nk.as_tensor(actions)
        if states.shape[-1] != self.spec.state_dim or actions.shape[-1] != self.spec.action_dim:
            raise nk.ShapeError('q_value', f"输入维度 ({states.shape[-1]}, {actions.shape[-1]}) 与评论家 "
                                           f"({self.spec.state_dim}, {self.spec.action_dim}) 不符")
        if which == 'target_min':
            q1 = self._mlp(self.target, 'q1', states, actions)
            q2 = self._mlp(self.target, 'q2', states, actions)
            return nk.Tensor(np.minimum(q1.value, q2.value), op='target_min')
        store = self.online if which.startswith('online') else self.target
        return self._mlp(store, 'q' + which[-1], states, actions)

    def bootstrap_value(self, next_states, next_actions, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """min_m Q_ψm'(s', a')，可选叠加目标噪声"""
        value = self.evaluate('target_min', next_states, next_actions).value
        if self.target_noise_std > 0:
            if rng is None:
                raise CriticError("target_noise_std > 0 时必须提供随机数流")
            value = value + rng.normal(0.0, self.target_noise_std, size=value.shape)
        return value

    def regress(self, states: np.ndarray, actions: np.ndarray, targets: np.ndarray,
                weights: Optional[np.ndarray] = None) -> float:
        """
        两个在线网络对目标 y 做平方误差回归并走一步Adam

        Args:
            weights: 逐样本权重（为0的样本不参与），默认全1

        Returns:
            float: 两个网络的加权平均平方误差之和
        """
        if not np.all(np.isfinite(targets)):
            bad = int(np.sum(~np.isfinite(targets)))
            raise CriticError(f"TD目标出现 {bad} 个非有限值，已中止本步")
        if weights is None:
            weights = np.ones_like(targets)
        total_weight = float(np.sum(weights))
        if total_weight <= 0:
            raise CriticError("回归批为空")

        def td_loss():
            loss = None
            for net in NETS:
                q = self._mlp(self.online, net, states, actions)
                err = nk.mul(nk.square(nk.sub(q, targets)), weights)
                term = nk.scale(nk.sum_(err), 1.0 / total_weight)
                loss = term if loss is None else nk.add(loss, term)
            return loss

        value = nk.grad(td_loss, self.online)
        self.last_grad_norm = self.online.grad_norm()
        nk.adam_step(self.online, self.optim)
        self.online.zero_grad()
        return value

    def copy(self) -> 'CriticPair':
        clone = CriticPair(self.spec, learning_rate=self.optim.learning_rate,
                           target_noise_std=self.target_noise_std,
                           online=self.online.copy(), target=self.target.copy())
        return clone

    def save(self, path: Union[str, Path]):
        """在线与目标网络一起写入检查点，结构描述写到 <path>.yaml"""
        path = Path(path)
        combined = nk.ParamStore()
        for prefix, store in (('online', self.online), ('target', self.target)):
            for name, tensor in store.items():
                combined.add(f'{prefix}.{name}', tensor.value)
        nk.save_checkpoint(combined, path)
        descriptor = {'kind': 'critic', 'spec': self.spec.to_dict()}
        Path(str(path) + '.yaml').write_text(yaml.safe_dump(descriptor, sort_keys=True), encoding='utf-8')

    @classmethod
    def load(cls, path: Union[str, Path], learning_rate: float = 3e-4,
             target_noise_std: float = 0.0) -> 'CriticPair':
        path = Path(path)
        descriptor = yaml.safe_load(Path(str(path) + '.yaml').read_text(encoding='utf-8'))
        if descriptor.get('kind') != 'critic':
            raise CriticError(f"{path} 不是评论家检查点")
        spec = CriticSpec(**descriptor['spec'])
        combined = nk.load_checkpoint(path)
        online, target = nk.ParamStore(), nk.ParamStore()
        for name, tensor in combined.items():
            prefix, _, rest = name.partition('.')
            (online if prefix == 'online' else target).add(rest, tensor.value)
        expected = cls(spec, seed=0).online
        if online.names() != expected.names() or target.names() != expected.names():
            raise CriticError(f"检查点参数与结构描述不一致: {path}")
        return cls(spec, learning_rate=learning_rate, target_noise_std=target_noise_std,
                   online=online, target=target)


def q_value(critic: CriticPair, s: np.ndarray, a: np.ndarray, which: str = 'online1') -> float:
    """单个 (s, a) 的Q值"""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.ndim != 1 or a.ndim != 1:
        raise nk.ShapeError('q_value', "q_value 只接受单个状态与动作向量")
    return float(critic.evaluate(which, s[None, :], a[None, :]).value[0])


def pretrain_step(critic: CriticPair, batch: TransitionBatch,
                  rng: Optional[np.random.Generator] = None) -> float:
    """
    一步双Q预训练

    y = r + γ(1 - done) min_m Q_ψm'(s', a')，其中 a' 取自数据（SARSA式目标）。
    更新在线网络后按 α 做一次目标网络Polyak更新。

    Returns:
        float: 两个网络的平均平方误差之和
    """
    if len(batch) == 0:
        raise CriticError("预训练批为空")
    targets = td_targets(critic, batch, rng)
    loss = critic.regress(batch.states, batch.actions, targets)
    polyak_update(critic)
    return loss


def td_targets(critic: CriticPair, batch: TransitionBatch,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    bootstrap = critic.bootstrap_value(batch.next_states, batch.next_actions, rng)
    not_done = 1.0 - batch.dones.astype(np.float64)
    # 终止步不自举（γ=0时同样只剩r）
    return batch.rewards + np.where(not_done > 0, critic.gamma * not_done * bootstrap, 0.0)


def polyak_update(critic: CriticPair, rate: Optional[float] = None):
    """目标参数 <- α·在线 + (1-α)·目标"""
    critic.target.polyak_from(critic.online, critic.alpha if rate is None else rate)


def sample_transitions(dataset, rng: np.random.Generator, batch_size: int) -> TransitionBatch:
    """
    从数据集均匀采样转移（按全部时间步的扁平索引）

    每条轨迹的最后一步视为终止（无论是真实终止还是到达时限）。
    """
    index = dataset.flat_index()
    if len(index) == 0:
        raise CriticError("数据集为空，无法采样转移")
    picks = rng.integers(0, len(index), size=batch_size)
    states, actions, rewards, next_states, next_actions, dones = [], [], [], [], [], []
    for pick in picks:
        traj_id, t = index[pick]
        traj = dataset.trajectories[traj_id]
        last = t == len(traj) - 1
        states.append(traj.states[t])
        actions.append(traj.actions[t])
        rewards.append(traj.rewards[t])
        next_states.append(traj.states[t] if last else traj.states[t + 1])
        next_actions.append(traj.actions[t] if last else traj.actions[t + 1])
        dones.append(last)
    return TransitionBatch(
        states=np.array(states), actions=np.array(actions), rewards=np.array(rewards, dtype=np.float64),
        next_states=np.array(next_states), next_actions=np.array(next_actions),
        dones=np.array(dones, dtype=bool),
    )


def pretrain(critic: CriticPair, dataset, steps: int, batch_size: int = 64, seed: int = 0,
             log_every: int = 500) -> List[float]:
    """
    固定步数预算的双Q预训练

    Args:
        critic: 评论家
        dataset: worldkit.Dataset
        steps: 步数（0 则参数保持初始化值）
        batch_size: 每步转移数
        seed: 采样与目标噪声的种子

    Returns:
        List[float]: 每步TD损失
    """
    streams = np.random.SeedSequence(seed).spawn(2)
    sampler = np.random.default_rng(streams[0])
    noise = np.random.default_rng(streams[1])
    losses = []
    for step in range(steps):
        batch = sample_transitions(dataset, sampler, batch_size)
        losses.append(pretrain_step(critic, batch, noise))
        if log_every and (step + 1) % log_every == 0:
            critic.logger.info(f"预训练 {step + 1}/{steps}  TD损失 {losses[-1]:.6g}")
    return losses
