#!/usr/bin/env python3
"""
环境与数据模块
玩具环境（链式MDP、5x5网格、一维质点）、行为策略数据生成、RTG标注、窗口采样、数据集持久化
"""
import hashlib
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from config import QAlignError, setup_logger, worker_threads
from policy import ContextWindow

logger = setup_logger('worldkit')

ROW_TOLERANCE = 1e-12


class DatasetFormatError(QAlignError):
    """数据集文件不可用；reason 取 magic/version/truncation/checksum"""

    def __init__(self, reason: str, message: str):
        super().__init__(f"[{reason}] {message}")
        self.reason = reason


class TrajectoryRejected(QAlignError):
    """环境返回非有限值等原因导致的轨迹作废"""


class UnknownEnvError(QAlignError):
    """环境id未注册"""


# ---------------------------------------------------------------- 编码

def encode_one_hot(index: int, n: int) -> np.ndarray:
    vec = np.zeros(n)
    vec[int(index)] = 1.0
    return vec


def decode_one_hot(vector: np.ndarray) -> int:
    """取最大分量的下标（并列取较小下标）"""
    return int(np.argmax(np.asarray(vector)))


# ---------------------------------------------------------------- 表格MDP

@dataclass
class TabularMDP:
    """
    有限MDP

    P[s, a, s'] 为转移概率，R[s, a] 为即时奖励，terminal[s, a] 表示执行后回合结束，
    beta[s, a] 为行为策略。
    """
    P: np.ndarray
    R: np.ndarray
    terminal: np.ndarray
    horizon: int
    init: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.init = np.asarray(self.init, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        S, A = self.R.shape
        if self.P.shape != (S, A, S) or self.terminal.shape != (S, A) or self.beta.shape != (S, A):
            raise ValueError(f"表格形状不一致: P{self.P.shape} R{self.R.shape} beta{self.beta.shape}")
        if self.init.shape != (S,):
            raise ValueError(f"初始分布形状应为 ({S},): {self.init.shape}")
        if np.any(np.abs(self.P.sum(axis=2) - 1.0) > ROW_TOLERANCE):
            raise ValueError("转移分布存在和不为1的行")
        if np.any(np.abs(self.beta.sum(axis=1) - 1.0) > ROW_TOLERANCE):
            raise ValueError("行为策略存在和不为1的行")
        if abs(self.init.sum() - 1.0) > ROW_TOLERANCE:
            raise ValueError("初始分布和不为1")
        if not np.all(np.isfinite(self.R)):
            raise ValueError("奖励表含非有限值")
        if self.horizon < 1:
            raise ValueError(f"horizon 必须 >= 1: {self.horizon}")

    @property
    def n_states(self) -> int:
        return self.R.shape[0]

    @property
    def n_actions(self) -> int:
        return self.R.shape[1]

    def with_behavior(self, beta: np.ndarray) -> 'TabularMDP':
        return TabularMDP(P=self.P, R=self.R, terminal=self.terminal, horizon=self.horizon,
                          init=self.init, beta=beta)


def epsilon_greedy(controller: np.ndarray, n_actions: int, epsilon: float) -> np.ndarray:
    """围绕确定性控制器的 ε-贪心行为表"""
    beta = np.full((len(controller), n_actions), epsilon / n_actions)
    beta[np.arange(len(controller)), controller] += 1.0 - epsilon
    return beta


def chain_mdp(n: int, epsilon: float = 0.2, horizon: Optional[int] = None) -> TabularMDP:
    """
    N状态链：动作0后退、动作1前进；在终点状态执行任意动作获得奖励1并结束
    """
    if n < 2:
        raise ValueError(f"链长度至少为2: {n}")
    P = np.zeros((n, 2, n))
    R = np.zeros((n, 2))
    terminal = np.zeros((n, 2), dtype=bool)
    for s in range(n - 1):
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, s + 1] = 1.0
    P[n - 1, :, n - 1] = 1.0
    R[n - 1, :] = 1.0
    terminal[n - 1, :] = True
    init = encode_one_hot(0, n)
    beta = epsilon_greedy(np.ones(n, dtype=np.int64), 2, epsilon)
    return TabularMDP(P=P, R=R, terminal=terminal, horizon=horizon or 4 * n, init=init, beta=beta)


GRID_SIZE = 5
GRID_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # 上 下 左 右
GRID_STEP_REWARD = -1.0
GRID_GOAL_REWARD = 10.0


def grid_mdp(epsilon: float = 0.2, horizon: int = 20) -> TabularMDP:
    """5x5网格：左上出发，每步 -1，进入右下目标 +10 并结束；出界原地不动"""
    n = GRID_SIZE * GRID_SIZE
    goal = n - 1
    P = np.zeros((n, 4, n))
    R = np.full((n, 4), GRID_STEP_REWARD)
    terminal = np.zeros((n, 4), dtype=bool)
    for s in range(n):
        row, col = divmod(s, GRID_SIZE)
        for a, (dr, dc) in enumerate(GRID_MOVES):
            if s == goal:
                P[s, a, s] = 1.0
                R[s, a] = 0.0
                terminal[s, a] = True
                continue
            nr = min(max(row + dr, 0), GRID_SIZE - 1)
            nc = min(max(col + dc, 0), GRID_SIZE - 1)
            nxt = nr * GRID_SIZE + nc
            P[s, a, nxt] = 1.0
            if nxt == goal:
                R[s, a] = GRID_GOAL_REWARD
                terminal[s, a] = True
    init = encode_one_hot(0, n)
    beta = epsilon_greedy(grid_controller(), 4, epsilon)
    return TabularMDP(P=P, R=R, terminal=terminal, horizon=horizon, init=init, beta=beta)


def grid_controller() -> np.ndarray:
    """最短路控制器：先向右，到最右列后向下"""
    controller = np.zeros(GRID_SIZE * GRID_SIZE, dtype=np.int64)
    for s in range(GRID_SIZE * GRID_SIZE):
        _, col = divmod(s, GRID_SIZE)
        controller[s] = 3 if col < GRID_SIZE - 1 else 1
    return controller


def random_tabular_mdp(rng: np.random.Generator, n_states: int = 4, n_actions: int = 3,
                       horizon: int = 20, support_prob: float = 1.0) -> TabularMDP:
    """
    随机表格MDP（无终止转移），用于理论验证

    Args:
        support_prob: 每个动作进入行为策略支撑集的概率；每个状态至少保留一个动作

    Returns:
        TabularMDP
    """
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    P = P / P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    terminal = np.zeros((n_states, n_actions), dtype=bool)
    mask = rng.random((n_states, n_actions)) < support_prob
    mask[np.arange(n_states), rng.integers(0, n_actions, size=n_states)] = True
    weights = rng.uniform(0.1, 1.0, size=(n_states, n_actions)) * mask
    beta = weights / weights.sum(axis=1, keepdims=True)
    init = np.full(n_states, 1.0 / n_states)
    return TabularMDP(P=P, R=R, terminal=terminal, horizon=horizon, init=init, beta=beta)


# ---------------------------------------------------------------- 环境

@dataclass
class StepResult:
    state: np.ndarray
    reward: float
    done: bool
    progress: float = 0.0


class TabularEnv:
    """表格MDP的环境包装，状态与动作以one-hot向量交互"""

    def __init__(self, env_id: str, mdp: TabularMDP, rtg_scale: float = 1.0,
                 controller: Optional[np.ndarray] = None):
        self.env_id = env_id
        self.mdp = mdp
        self.rtg_scale = rtg_scale
        self.controller = controller
        self._rng: Optional[np.random.Generator] = None
        self._state = 0

    @property
    def state_dim(self) -> int:
        return self.mdp.n_states

    @property
    def action_dim(self) -> int:
        return self.mdp.n_actions

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    @property
    def horizon(self) -> int:
        return self.mdp.horizon

    def spawn(self) -> 'TabularEnv':
        return TabularEnv(self.env_id, self.mdp, self.rtg_scale, self.controller)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._rng = rng
        self._state = int(rng.choice(self.mdp.n_states, p=self.mdp.init))
        return encode_one_hot(self._state, self.mdp.n_states)

    def step(self, action: np.ndarray) -> StepResult:
        if self._rng is None:
            raise RuntimeError("step 之前必须先 reset")
        s = self._state
        a = decode_one_hot(action)
        reward = float(self.mdp.R[s, a])
        done = bool(self.mdp.terminal[s, a])
        self._state = int(self._rng.choice(self.mdp.n_states, p=self.mdp.P[s, a]))
        return StepResult(state=encode_one_hot(self._state, self.mdp.n_states),
                          reward=reward, done=done, progress=float(self._state))

    def behavior_table(self, epsilon: float) -> np.ndarray:
        if self.controller is None:
            return self.mdp.beta
        return epsilon_greedy(self.controller, self.mdp.n_actions, epsilon)


class PointMassEnv:
    """
    一维质点：状态 (位置, 速度)，连续加速度动作 u ∈ [-1, 1]

    v' = v + dt(2u - 0.5v)，x' = x + dt·v'，奖励 v' - c·u²
    """

    def __init__(self, horizon: int = 50, dt: float = 0.1, ctrl_cost: float = 0.1, rtg_scale: float = 32.0):
        self.env_id = 'pointmass'
        self.horizon = horizon
        self.dt = dt
        self.ctrl_cost = ctrl_cost
        self.rtg_scale = rtg_scale
        self.state_dim = 2
        self.action_dim = 1
        self.n_actions = None
        self._state = np.zeros(2)

    def spawn(self) -> 'PointMassEnv':
        return PointMassEnv(self.horizon, self.dt, self.ctrl_cost, self.rtg_scale)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._state = np.zeros(2)
        return self._state.copy()

    def step(self, action: np.ndarray) -> StepResult:
        u = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        x, v = self._state
        v_next = v + self.dt * (2.0 * u - 0.5 * v)
        x_next = x + self.dt * v_next
        self._state = np.array([x_next, v_next])
        reward = v_next - self.ctrl_cost * u * u
        return StepResult(state=self._state.copy(), reward=float(reward), done=False, progress=float(v_next))


# ---------------------------------------------------------------- 行为策略

class TabularBehavior:
    """按 β[s] 采样动作"""

    def __init__(self, beta: np.ndarray, policy_id: str):
        self.beta = beta
        self.policy_id = policy_id

    def start(self, rng: np.random.Generator) -> 'TabularBehavior':
        return self

    def act(self, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        s = decode_one_hot(state)
        a = int(rng.choice(self.beta.shape[1], p=self.beta[s]))
        return encode_one_hot(a, self.beta.shape[1])


class PointMassBehavior:
    """
    慢/快两类目标速度的混合，P控制器 + ε 随机动作

    每个回合开始时抽一个目标速度：一半回合取 [0, 1]，一半取 [2, 3]。
    """

    SLOW = (0.0, 1.0)
    FAST = (2.0, 3.0)

    def __init__(self, epsilon: float = 0.2, gain: float = 1.0):
        self.epsilon = epsilon
        self.gain = gain
        self.policy_id = f'pointmass-mixture-eps{epsilon:g}'
        self.target_speed = 0.0

    def start(self, rng: np.random.Generator) -> 'PointMassBehavior':
        episode = PointMassBehavior(self.epsilon, self.gain)
        lo, hi = self.SLOW if rng.random() < 0.5 else self.FAST
        episode.target_speed = float(rng.uniform(lo, hi))
        return episode

    def act(self, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if rng.random() < self.epsilon:
            return np.array([rng.uniform(-1.0, 1.0)])
        v = state[1]
        u = self.target_speed / 4.0 + self.gain * (self.target_speed - v)
        return np.array([float(np.clip(u, -1.0, 1.0))])


# ---------------------------------------------------------------- 注册表

CHAIN_PATTERN = re.compile(r'^chain-(\d+)$')
CHAIN_RTG_SCALE = 1.0
GRID_RTG_SCALE = 8.0


def list_envs() -> List[str]:
    return ['chain-<N>', 'grid-5x5', 'pointmass']


def make_env(env_id: str, epsilon: float = 0.2):
    """
    按id构造环境

    Args:
        env_id: chain-<N> / grid-5x5 / pointmass
        epsilon: 表格环境中 mdp.beta 的 ε

    Returns:
        TabularEnv | PointMassEnv
    """
    match = CHAIN_PATTERN.match(env_id)
    if match and int(match.group(1)) >= 2:
        n = int(match.group(1))
        return TabularEnv(env_id, chain_mdp(n, epsilon), CHAIN_RTG_SCALE,
                          controller=np.ones(n, dtype=np.int64))
    if env_id == 'grid-5x5':
        return TabularEnv(env_id, grid_mdp(epsilon), GRID_RTG_SCALE, controller=grid_controller())
    if env_id == 'pointmass':
        return PointMassEnv()
    raise UnknownEnvError(f"未知环境: {env_id}（可用: {', '.join(list_envs())}）")


def make_behavior(env, epsilon: float = 0.2):
    if isinstance(env, TabularEnv):
        return TabularBehavior(env.behavior_table(epsilon), f'{env.env_id}-eps{epsilon:g}')
    return PointMassBehavior(epsilon)


# ---------------------------------------------------------------- 轨迹与数据集

def annotate_rtg(rewards) -> np.ndarray:
    """
    未折扣的后缀和 rtg_t = r_t + rtg_{t+1}，单次反向扫描

    Args:
        rewards: 非空奖励序列

    Returns:
        np.ndarray: 与 rewards 等长
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or rewards.size == 0:
        raise TrajectoryRejected("奖励序列必须是非空一维序列")
    if not np.all(np.isfinite(rewards)):
        raise TrajectoryRejected("奖励序列含非有限值")
    rtgs = np.empty_like(rewards)
    running = 0.0
    for t in range(rewards.size - 1, -1, -1):
        running = rewards[t] + running
        rtgs[t] = running
    return rtgs


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    rtgs: np.ndarray
    seed: int = 0
    env_id: str = ''
    behavior_id: str = ''
    terminal: bool = False

    def __post_init__(self):
        lengths = {len(self.states), len(self.actions), len(self.rewards), len(self.rtgs)}
        if len(lengths) != 1:
            raise TrajectoryRejected(f"轨迹各数组长度不一致: {sorted(lengths)}")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(self.rtgs[0])

    def equals(self, other: 'Trajectory') -> bool:
        arrays = ('states', 'actions', 'rewards', 'rtgs')
        meta = ('seed', 'env_id', 'behavior_id', 'terminal')
        return (all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and all(getattr(self, m) == getattr(other, m) for m in meta))


@dataclass
class DatasetStats:
    count: int
    return_min: float
    return_max: float
    return_mean: float
    rejected: int = 0

    @classmethod
    def compute(cls, trajectories: List[Trajectory], rejected: int = 0) -> 'DatasetStats':
        returns = np.array([t.episode_return for t in trajectories])
        if returns.size == 0:
            return cls(count=0, return_min=0.0, return_max=0.0, return_mean=0.0, rejected=rejected)
        return cls(count=len(trajectories), return_min=float(returns.min()), return_max=float(returns.max()),
                   return_mean=float(returns.mean()), rejected=rejected)


@dataclass
class Dataset:
    """行为数据集 𝒟（加载后视为只读）"""
    trajectories: List[Trajectory]
    rtg_scale: float
    env_id: str
    state_dim: int
    action_dim: int
    n_actions: Optional[int] = None
    stats: Optional[DatasetStats] = None
    _flat: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.stats is None:
            self.stats = DatasetStats.compute(self.trajectories)

    def __len__(self) -> int:
        return len(self.trajectories)

    def flat_index(self) -> np.ndarray:
        """所有 (轨迹编号, 时间步) 对，形状 [N, 2]"""
        if self._flat is None:
            pairs = [(i, t) for i, traj in enumerate(self.trajectories) for t in range(len(traj))]
            self._flat = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        return self._flat

    def equals(self, other: 'Dataset') -> bool:
        header = ('rtg_scale', 'env_id', 'state_dim', 'action_dim', 'n_actions', 'stats')
        return (all(getattr(self, h) == getattr(other, h) for h in header)
                and len(self) == len(other)
                and all(a.equals(b) for a, b in zip(self.trajectories, other.trajectories)))


def run_episode(env, behavior, rng: np.random.Generator, seed: int = 0) -> Trajectory:
    """在行为策略下模拟一个回合"""
    episode = behavior.start(rng)
    state = env.reset(rng)
    states, actions, rewards = [], [], []
    terminal = False
    for _ in range(env.horizon):
        action = episode.act(state, rng)
        result = env.step(action)
        if not (np.all(np.isfinite(result.state)) and np.isfinite(result.reward)):
            raise TrajectoryRejected(f"{env.env_id} 第 {len(rewards)} 步返回非有限值 (seed={seed})")
        states.append(state)
        actions.append(np.asarray(action, dtype=np.float64))
        rewards.append(result.reward)
        state = result.state
        if result.done:
            terminal = True
            break
    rewards = np.array(rewards)
    return Trajectory(states=np.array(states), actions=np.array(actions), rewards=rewards,
                      rtgs=annotate_rtg(rewards), seed=seed, env_id=env.env_id,
                      behavior_id=behavior.policy_id, terminal=terminal)


def generate(env, behavior, episodes: int, seed: int, workers: Optional[int] = None,
             rtg_scale: Optional[float] = None) -> Dataset:
    """
    生成行为数据集

    每个回合的随机数流由 (seed, 回合编号) 派生，结果按编号放置，与线程调度无关。

    Args:
        env: 环境（每个回合用 spawn() 得到独立实例）
        behavior: 行为策略
        episodes: 回合数 >= 1
        seed: 种子
        workers: 线程数，默认 RCSL_ALIGN_THREADS
        rtg_scale: 覆盖环境默认的RTG缩放

    Returns:
        Dataset
    """
    if episodes < 1:
        raise ValueError(f"episodes 必须 >= 1: {episodes}")

    def simulate(index: int) -> Optional[Trajectory]:
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        try:
            return run_episode(env.spawn(), behavior, rng, seed=index)
        except TrajectoryRejected as e:
            logger.warning(f"轨迹作废: {e}")
            return None

    workers = workers or worker_threads()
    results: List[Optional[Trajectory]] = [None] * episodes
    with ThreadPoolExecutor(max_workers=workers) as executor:
        for index, traj in enumerate(executor.map(simulate, range(episodes))):
            results[index] = traj

    kept = [t for t in results if t is not None]
    if not kept:
        raise TrajectoryRejected("所有回合都被作废，数据集为空")
    return Dataset(trajectories=kept, rtg_scale=rtg_scale or env.rtg_scale, env_id=env.env_id,
                   state_dim=env.state_dim, action_dim=env.action_dim, n_actions=env.n_actions,
                   stats=DatasetStats.compute(kept, rejected=episodes - len(kept)))


# ---------------------------------------------------------------- 窗口采样

def window_at(dataset: Dataset, traj_id: int, t: int, k: int) -> ContextWindow:
    """
    以时间步 t 结尾的 k 步窗口，episode 开头不足处左侧填充

    rtg 已除以 rtg_scale；dones 仅在轨迹最后一步为 True。
    """
    traj = dataset.trajectories[traj_id]
    start = t - k + 1
    pad = max(0, -start)
    lo = max(0, start)

    rtgs = np.zeros(k)
    states = np.zeros((k, dataset.state_dim))
    actions = np.zeros((k, dataset.action_dim))
    timesteps = np.zeros(k, dtype=np.int64)
    mask = np.zeros(k, dtype=bool)
    rewards = np.zeros(k)
    dones = np.zeros(k, dtype=bool)

    rtgs[pad:] = traj.rtgs[lo:t + 1] / dataset.rtg_scale
    states[pad:] = traj.states[lo:t + 1]
    actions[pad:] = traj.actions[lo:t + 1]
    timesteps[pad:] = np.arange(lo, t + 1)
    mask[pad:] = True
    rewards[pad:] = traj.rewards[lo:t + 1]
    dones[pad:] = np.arange(lo, t + 1) == len(traj) - 1
    return ContextWindow(rtgs=rtgs, states=states, actions=actions, timesteps=timesteps,
                         valid_mask=mask, rewards=rewards, dones=dones)


def sample_window(dataset: Dataset, rng: np.random.Generator, k: int) -> ContextWindow:
    """在 (轨迹, 结束时间步) 上均匀采样一个窗口"""
    index = dataset.flat_index()
    if len(index) == 0:
        raise ValueError("数据集为空，无法采样窗口")
    traj_id, t = index[rng.integers(0, len(index))]
    return window_at(dataset, int(traj_id), int(t), k)


def sample_windows(dataset: Dataset, rng: np.random.Generator, k: int, batch_size: int) -> ContextWindow:
    return ContextWindow.stack([sample_window(dataset, rng, k) for _ in range(batch_size)])


# ---------------------------------------------------------------- 数据集文件

DATASET_MAGIC = b'QALNDATA'
DATASET_VERSION = 1
_DIGEST_SIZE = 32


def _pack_str(text: str) -> bytes:
    encoded = text.encode('utf-8')
    return struct.pack('<I', len(encoded)) + encoded


def save_dataset(dataset: Dataset, path: Union[str, Path]):
    """
    保存数据集

    布局: magic(8) | version u16 | env_id | rtg_scale f8 | state_dim u32 | action_dim u32 |
    n_actions i32(-1表示连续) | count u32 | min/max/mean f8 | rejected u32 |
    每条轨迹 [len u32, seed u64, terminal u8, env_id, behavior_id, states, actions, rewards, rtgs] |
    sha256(32)；字符串为 u32长度 + UTF-8
    """
    stats = dataset.stats
    body = bytearray(DATASET_MAGIC)
    body += struct.pack('<H', DATASET_VERSION)
    body += _pack_str(dataset.env_id)
    body += struct.pack('<dIIiI', dataset.rtg_scale, dataset.state_dim, dataset.action_dim,
                        -1 if dataset.n_actions is None else dataset.n_actions, len(dataset))
    body += struct.pack('<dddI', stats.return_min, stats.return_max, stats.return_mean, stats.rejected)
    for traj in dataset.trajectories:
        body += struct.pack('<IQB', len(traj), traj.seed, int(traj.terminal))
        body += _pack_str(traj.env_id) + _pack_str(traj.behavior_id)
        for array in (traj.states, traj.actions, traj.rewards, traj.rtgs):
            body += np.ascontiguousarray(array, dtype='<f8').tobytes()
    body += hashlib.sha256(bytes(body)).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(body))


class _Reader:
    def __init__(self, body: bytes, offset: int):
        self.body = body
        self.offset = offset

    def unpack(self, fmt: str) -> Tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.body):
            raise DatasetFormatError('truncation', "记录在文件末尾被截断")
        values = struct.unpack_from(fmt, self.body, self.offset)
        self.offset += size
        return values

    def string(self) -> str:
        (length,) = self.unpack('<I')
        if self.offset + length > len(self.body):
            raise DatasetFormatError('truncation', "字符串在文件末尾被截断")
        text = self.body[self.offset:self.offset + length].decode('utf-8')
        self.offset += length
        return text

    def floats(self, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        if self.offset + 8 * count > len(self.body):
            raise DatasetFormatError('truncation', "数组在文件末尾被截断")
        values = np.frombuffer(self.body, dtype='<f8', count=count, offset=self.offset)
        self.offset += 8 * count
        return values.reshape(shape).astype(np.float64)


def load_dataset(path: Union[str, Path]) -> Dataset:
    raw = Path(path).read_bytes()
    header = len(DATASET_MAGIC) + 2
    if len(raw) < header + _DIGEST_SIZE:
        raise DatasetFormatError('truncation', f"文件过短: {path}")
    if raw[:len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DatasetFormatError('magic', f"不是数据集文件: {path}")
    (version,) = struct.unpack_from('<H', raw, len(DATASET_MAGIC))
    if version != DATASET_VERSION:
        raise DatasetFormatError('version', f"数据集版本 {version} 不受支持（期望 {DATASET_VERSION}）")
    body, digest = raw[:-_DIGEST_SIZE], raw[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise DatasetFormatError('checksum', f"数据集校验和不符: {path}")

    reader = _Reader(body, header)
    env_id = reader.string()
    rtg_scale, state_dim, action_dim, n_actions, count = reader.unpack('<dIIiI')
    return_min, return_max, return_mean, rejected = reader.unpack('<dddI')
    trajectories = []
    for _ in range(count):
        length, seed, terminal = reader.unpack('<IQB')
        traj_env = reader.string()
        behavior_id = reader.string()
        trajectories.append(Trajectory(
            states=reader.floats((length, state_dim)),
            actions=reader.floats((length, action_dim)),
            rewards=reader.floats((length,)),
            rtgs=reader.floats((length,)),
            seed=seed, env_id=traj_env, behavior_id=behavior_id, terminal=bool(terminal),
        ))
    if reader.offset != len(body):
        raise DatasetFormatError('truncation', f"文件末尾有 {len(body) - reader.offset} 字节多余数据")
    stats = DatasetStats(count=count, return_min=return_min, return_max=return_max,
                         return_mean=return_mean, rejected=rejected)
    return Dataset(trajectories=trajectories, rtg_scale=rtg_scale, env_id=env_id,
                   state_dim=state_dim, action_dim=action_dim,
                   n_actions=None if n_actions < 0 else n_actions, stats=stats)
