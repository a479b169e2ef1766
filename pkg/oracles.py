#!/usr/bin/env python3
"""
精确验证模块
小规模离散MDP上的穷举/精确计算：单调策略类计数、高RTG下的贪心等价、ΔRTG评论家迭代的极限与单调性
"""
import inspect
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from config import QAlignError, setup_logger
from worldkit import Dataset, TabularEnv, TabularMDP, decode_one_hot, generate, make_behavior, random_tabular_mdp

logger = setup_logger('oracles')

DEFAULT_ENUMERATION_CAP = 10 ** 7
CONVERGENCE_TOL = 1e-13
MONOTONE_TOL = 1e-12
LOG_BOUND_SLACK = 1e-9


class OracleError(QAlignError):
    """理论前提不满足（支撑集为空、R* 不够大等）"""


class EnumerationBudgetError(OracleError):
    def __init__(self, required: int, cap: int):
        super().__init__(f"穷举需要 {required} 次检查，超过上限 {cap}")
        self.required = required
        self.cap = cap


# ---------------------------------------------------------------- 计数

def count_free(n_states: int, n_levels: int, n_actions: int) -> int:
    """|Π_free| = |A|^(|S||G|)，任意精度整数"""
    _check_sizes(n_states, n_levels, n_actions)
    return n_actions ** (n_states * n_levels)


def count_mono(n_states: int, n_levels: int, n_actions: int) -> int:
    """|Π_mono| = C(|G|+|A|-1, |G|)^|S|（每个状态一个多重集系数）"""
    _check_sizes(n_states, n_levels, n_actions)
    return math.comb(n_levels + n_actions - 1, n_levels) ** n_states


def _check_sizes(*sizes: int):
    if any(int(s) < 1 for s in sizes):
        raise ValueError(f"规模必须 >= 1: {sizes}")


@dataclass
class CountingInstance:
    """|S|, |G|, |A| 及可选的逐状态Q表（诱导动作次序）"""
    n_states: int
    n_levels: int
    n_actions: int
    q: Optional[np.ndarray] = None
    cap: int = DEFAULT_ENUMERATION_CAP

    def __post_init__(self):
        _check_sizes(self.n_states, self.n_levels, self.n_actions)
        if self.q is not None:
            self.q = np.asarray(self.q, dtype=np.float64)
            if self.q.shape != (self.n_states, self.n_actions):
                raise ValueError(f"Q表形状应为 ({self.n_states}, {self.n_actions}): {self.q.shape}")

    @property
    def budget(self) -> int:
        return self.n_states * self.n_actions ** self.n_levels


def action_ranks(q_row: Optional[np.ndarray], n_actions: int) -> np.ndarray:
    """
    动作在 ⪯_s 下的名次：按Q值升序，Q相同时编号小者在前

    Returns:
        np.ndarray: rank[a]
    """
    if q_row is None:
        return np.arange(n_actions)
    order = np.lexsort((np.arange(n_actions), q_row))
    ranks = np.empty(n_actions, dtype=np.int64)
    ranks[order] = np.arange(n_actions)
    return ranks


def enumerate_mono(instance: CountingInstance) -> int:
    """
    穷举计数：每个状态的动作序列 (π(s, g_1), ..., π(s, g_|G|)) 在 ⪯_s 下非降

    约束逐状态独立，所以对每个状态枚举 A^G 个序列，再把各状态的计数相乘。
    """
    if instance.budget > instance.cap:
        raise EnumerationBudgetError(instance.budget, instance.cap)
    total = 1
    for s in range(instance.n_states):
        ranks = action_ranks(None if instance.q is None else instance.q[s], instance.n_actions)
        count = 0
        for sequence in itertools.product(range(instance.n_actions), repeat=instance.n_levels):
            r = ranks[list(sequence)]
            if np.all(r[:-1] <= r[1:]):
                count += 1
        total *= count
    return total


@dataclass
class BoundCheck:
    lhs: float
    rhs: float
    rhs_log_form: float
    holds: bool


def log_bound_check(instance: CountingInstance) -> BoundCheck:
    """
    log|Π_mono| <= |S||G| log((|G|+|A|-1)/|G|) + |S||G|

    同时记录等价的 |S||G| log(e(|G|+|A|-1)/|G|) 形式。
    """
    S, G, A = instance.n_states, instance.n_levels, instance.n_actions
    lhs = math.log(count_mono(S, G, A))
    ratio = (G + A - 1) / G
    rhs = S * G * math.log(ratio) + S * G
    rhs_log_form = S * G * math.log(math.e * ratio)
    return BoundCheck(lhs=lhs, rhs=rhs, rhs_log_form=rhs_log_form, holds=lhs <= rhs + LOG_BOUND_SLACK)


# ---------------------------------------------------------------- 支撑集

@dataclass
class SupportQ:
    """限制在数据支撑集上的Q表；支撑集外为 NaN"""
    values: np.ndarray
    mask: np.ndarray

    @classmethod
    def restrict(cls, q: np.ndarray, mask: np.ndarray) -> 'SupportQ':
        return cls(values=np.where(mask, q, np.nan), mask=mask.copy())

    def gap(self, other: np.ndarray) -> float:
        """支撑集上的最大绝对差"""
        other = other.values if isinstance(other, SupportQ) else other
        return float(np.max(np.abs(self.values[self.mask] - other[self.mask])))

    def greedy(self) -> np.ndarray:
        """支撑集内的贪心动作（并列取小编号）；无支撑动作的状态记 -1"""
        filled = np.where(self.mask, self.values, -np.inf)
        policy = np.argmax(filled, axis=1)
        policy[~self.mask.any(axis=1)] = -1
        return policy


def support_from_behavior(beta: np.ndarray) -> np.ndarray:
    return np.asarray(beta) > 0


def support_from_dataset(dataset: Dataset, n_states: int, n_actions: int) -> np.ndarray:
    return empirical_action_counts(dataset, n_states, n_actions) > 0


def empirical_action_counts(dataset: Dataset, n_states: int, n_actions: int) -> np.ndarray:
    counts = np.zeros((n_states, n_actions))
    for traj in dataset.trajectories:
        for state, action in zip(traj.states, traj.actions):
            counts[decode_one_hot(state), decode_one_hot(action)] += 1
    return counts


def empirical_action_probs(dataset: Dataset, n_states: int, n_actions: int) -> np.ndarray:
    """数据中各状态的动作频率；未访问状态整行为0"""
    counts = empirical_action_counts(dataset, n_states, n_actions)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def _check_reachable_support(mdp: TabularMDP, mask: np.ndarray):
    """从初始分布沿支撑动作可达的状态都必须至少有一个支撑动作"""
    frontier = list(np.flatnonzero(mdp.init > 0))
    seen = set(frontier)
    while frontier:
        s = frontier.pop()
        actions = np.flatnonzero(mask[s])
        if actions.size == 0:
            raise OracleError(f"可达状态 {s} 没有支撑动作")
        for a in actions:
            if mdp.terminal[s, a]:
                continue
            for nxt in np.flatnonzero(mdp.P[s, a] > 0):
                if nxt not in seen:
                    seen.add(int(nxt))
                    frontier.append(int(nxt))


def _masked_max(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    filled = np.where(mask, q, -np.inf).max(axis=1)
    return np.where(mask.any(axis=1), filled, 0.0)


# ---------------------------------------------------------------- Bellman 算子

def _backup(mdp: TabularMDP, gamma: float, values: np.ndarray) -> np.ndarray:
    """R + γ(1 - terminal) Σ_s' P V(s')"""
    continuation = np.where(mdp.terminal, 0.0, mdp.P @ values)
    return mdp.R + gamma * continuation


def _optimal_operator(mdp: TabularMDP, mask: np.ndarray, gamma: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda q: _backup(mdp, gamma, _masked_max(q, mask))


def _behavior_operator(mdp: TabularMDP, beta: np.ndarray, gamma: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda q: _backup(mdp, gamma, np.sum(beta * q, axis=1))


def _solve(operator: Callable[[np.ndarray], np.ndarray], start: np.ndarray, gamma: float,
           horizon: int, max_iterations: int = 100000) -> np.ndarray:
    """γ = 1 时做 horizon 步反向归纳（返回 t=0 的Q）；γ < 1 时迭代到不动点"""
    q = start
    if gamma >= 1.0:
        for _ in range(horizon):
            q = operator(q)
        return q
    for _ in range(max_iterations):
        nxt = operator(q)
        if np.max(np.abs(nxt - q)) < CONVERGENCE_TOL:
            return nxt
        q = nxt
    raise OracleError(f"{max_iterations} 次迭代内未收敛")


@dataclass
class ValueResult:
    q: SupportQ
    policy: np.ndarray


def value_iteration(mdp: TabularMDP, support: Optional[np.ndarray] = None, gamma: float = 0.99) -> ValueResult:
    """
    支撑集约束的最优Q*

    Q*(s, a) = R(s, a) + γ E_s'[max_{a': 支撑} Q*(s', a')]

    Args:
        mdp: 表格MDP
        support: 布尔掩码 [S, A]，默认全部动作
        gamma: 折扣；为1时按 mdp.horizon 做有限步反向归纳

    Returns:
        ValueResult: 支撑集上的Q*与贪心策略π*
    """
    mask = np.ones_like(mdp.R, dtype=bool) if support is None else np.asarray(support, dtype=bool)
    _check_reachable_support(mdp, mask)
    q = _solve(_optimal_operator(mdp, mask, gamma), np.zeros_like(mdp.R), gamma, mdp.horizon)
    restricted = SupportQ.restrict(q, mask)
    return ValueResult(q=restricted, policy=restricted.greedy())


def policy_evaluation(mdp: TabularMDP, beta: Optional[np.ndarray] = None, gamma: float = 0.99) -> np.ndarray:
    """行为策略的精确Q_β（全部 (s, a)）"""
    beta = mdp.beta if beta is None else np.asarray(beta, dtype=np.float64)
    _check_reachable_support(mdp, support_from_behavior(beta))
    return _solve(_behavior_operator(mdp, beta, gamma), np.zeros_like(mdp.R), gamma, mdp.horizon)


def behavior_value(mdp: TabularMDP, beta: Optional[np.ndarray] = None, gamma: float = 1.0) -> float:
    """初始分布下的期望回报 E_{s0, a0~β}[Q_β(s0, a0)]"""
    beta = mdp.beta if beta is None else beta
    q = policy_evaluation(mdp, beta, gamma)
    return float(mdp.init @ np.sum(beta * q, axis=1))


ALIGN_MODES = ('zero', 'large')


def exact_align_iteration(mdp: TabularMDP, support: Optional[np.ndarray] = None, mode: str = 'zero',
                          iterations: int = 1000, gamma: float = 0.9) -> List[np.ndarray]:
    """
    ΔRTG评论家更新的精确Bellman迭代

    zero: 目标动作取行为策略（无扰动），从 Q ≡ 0 出发，极限为 Q_β；
    large: 目标动作取支撑集内对当前Q的贪心动作（高RTG条件策略的理想化极限），
    从 Q_β 出发，迭代单调不降并收敛到支撑集约束的 Q*。

    Returns:
        List[np.ndarray]: Q_0, Q_1, ...（达到精确不动点时提前结束）
    """
    if mode not in ALIGN_MODES:
        raise ValueError(f"未知的模式: {mode}")
    mask = support_from_behavior(mdp.beta) if support is None else np.asarray(support, dtype=bool)
    _check_reachable_support(mdp, mask)
    beta = np.where(mask, mdp.beta, 0.0)
    beta = beta / np.where(beta.sum(axis=1, keepdims=True) > 0, beta.sum(axis=1, keepdims=True), 1.0)

    if mode == 'zero':
        operator = _behavior_operator(mdp, beta, gamma)
        q = np.zeros_like(mdp.R)
    else:
        operator = _optimal_operator(mdp, mask, gamma)
        q = policy_evaluation(mdp, beta, gamma)

    sequence = [q]
    for _ in range(iterations):
        nxt = operator(q)
        sequence.append(nxt)
        if np.array_equal(nxt, q):
            break
        q = nxt
    return sequence


# ---------------------------------------------------------------- 贪心等价

@dataclass
class GreedyCheck:
    passed: np.ndarray
    minimizers: List[Tuple[int, ...]]
    argmax: List[Tuple[int, ...]]

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed))


def greedy_equiv_check(action_probs: np.ndarray, q: np.ndarray, r_star: float, max_return: float) -> GreedyCheck:
    """
    高RTG下对齐目标的极小点是否等于 argmax_a Q(s, a)

    R* 严格大于所有数据回报时，每个数据样本的 δ = R* - R_i > 0，
    状态 s 上选动作 a 的目标为 Σ_a' p(a'|s)·1[Q(s, a) - Q(s, a') < 0]，逐个动作穷举求极小点集合。

    Args:
        action_probs: 数据中的动作分布 [S, A]，每个 (s, a) 必须为正
        q: 评论家Q表 [S, A]
        r_star: 条件目标回报
        max_return: 数据集最大回报

    Returns:
        GreedyCheck
    """
    action_probs = np.asarray(action_probs, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any(action_probs <= 0):
        raise OracleError("数据未覆盖全部 (s, a)，全支撑前提不成立")
    if not r_star > max_return:
        raise OracleError(f"R*={r_star} 必须严格大于数据最大回报 {max_return}")
    sign = np.sign(r_star - max_return)

    passed, minimizers, argmax = [], [], []
    for s in range(q.shape[0]):
        objective = np.array([
            np.sum(action_probs[s] * (sign * (q[s, a] - q[s]) < 0))
            for a in range(q.shape[1])
        ])
        best = tuple(int(a) for a in np.flatnonzero(objective == objective.min()))
        top = tuple(int(a) for a in np.flatnonzero(q[s] == q[s].max()))
        minimizers.append(best)
        argmax.append(top)
        passed.append(best == top)
    return GreedyCheck(passed=np.array(passed), minimizers=minimizers, argmax=argmax)


def greedy_equiv_from_dataset(mdp: TabularMDP, dataset: Dataset, q: np.ndarray,
                              r_star: Optional[float] = None) -> GreedyCheck:
    """
    用数据集本身的动作频率与最大回报做贪心等价检查

    只检查数据里出现过的状态；这些状态上每个动作都必须出现过。

    Args:
        mdp: 生成数据的表格MDP（提供 |S|、|A|）
        dataset: 行为数据集
        q: 评论家Q表 [S, A]
        r_star: 条件目标回报，默认取数据最大回报 + 1

    Returns:
        GreedyCheck: 逐个已访问状态的结果
    """
    support = support_from_dataset(dataset, mdp.n_states, mdp.n_actions)
    visited = support.any(axis=1)
    if not visited.any():
        raise OracleError("数据集为空，无法估计动作分布")
    uncovered = np.flatnonzero(visited & ~support.all(axis=1))
    if uncovered.size:
        raise OracleError(f"状态 {uncovered.tolist()} 有动作未在数据中出现，全支撑前提不成立")
    max_return = dataset.stats.return_max
    if r_star is None:
        r_star = max_return + 1.0
    probs = empirical_action_probs(dataset, mdp.n_states, mdp.n_actions)
    return greedy_equiv_check(probs[visited], np.asarray(q, dtype=np.float64)[visited], r_star, max_return)


# ---------------------------------------------------------------- 验证套件

@dataclass
class CheckResult:
    name: str
    params: str
    passed: bool
    gap: float

    def line(self) -> str:
        return f"{self.name} {self.params} {'PASS' if self.passed else 'FAIL'} gap={self.gap:.3e}"


def counting_suite(max_states: int = 3, max_levels: int = 4, max_actions: int = 4, seed: int = 0,
                   cap: int = DEFAULT_ENUMERATION_CAP) -> List[CheckResult]:
    """公式与穷举一致、带并列Q的次序、对数上界、|Π_mono| <= |Π_free|"""
    largest = CountingInstance(max_states, max_levels, max_actions, cap=cap)
    if largest.budget > cap:
        raise EnumerationBudgetError(largest.budget, cap)
    rng = np.random.default_rng(seed)
    results = []
    for S, G, A in itertools.product(range(1, max_states + 1), range(1, max_levels + 1),
                                     range(1, max_actions + 1)):
        params = f"S={S},G={G},A={A}"
        formula = count_mono(S, G, A)
        natural = enumerate_mono(CountingInstance(S, G, A, cap=cap))
        results.append(CheckResult('count_mono=enumerate', params, natural == formula, float(abs(natural - formula))))

        tied_q = rng.integers(0, 2, size=(S, A)).astype(np.float64)
        tied = enumerate_mono(CountingInstance(S, G, A, q=tied_q, cap=cap))
        results.append(CheckResult('count_mono=enumerate_tied_q', params, tied == formula, float(abs(tied - formula))))

        bound = log_bound_check(CountingInstance(S, G, A, cap=cap))
        results.append(CheckResult('log_bound', params, bound.holds, bound.lhs - bound.rhs))

        free = count_free(S, G, A)
        equal_expected = A == 1 or G == 1
        ordered = formula <= free and (formula == free) == equal_expected
        results.append(CheckResult('mono<=free', params, ordered, float(free - formula)))
    return results


GREEDY_DATASET_EVERY = 5
GREEDY_DATASET_EPISODES = 1000
GREEDY_DATASET_HORIZON = 10


def greedy_suite(instances: int = 50, seed: int = 0) -> List[CheckResult]:
    """
    随机全支撑实例上的高RTG贪心等价（部分实例刻意制造并列最大值）

    每 GREEDY_DATASET_EVERY 个实例中有一个改用行为策略生成的数据集，按经验动作频率与数据最大回报检查。
    """
    results = []
    for index in range(instances):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        S = int(rng.integers(1, 5))
        A = int(rng.integers(2, 5))
        from_data = index % GREEDY_DATASET_EVERY == 0
        mdp = random_tabular_mdp(rng, n_states=S, n_actions=A, support_prob=1.0,
                                 horizon=GREEDY_DATASET_HORIZON if from_data else 20)
        q = rng.integers(0, 3, size=(S, A)).astype(np.float64) if index % 2 else rng.normal(size=(S, A))
        max_return = float(rng.uniform(0.0, 10.0))
        if from_data:
            env = TabularEnv(f'random-{index}', mdp)
            dataset = generate(env, make_behavior(env), GREEDY_DATASET_EPISODES, seed=int(rng.integers(2 ** 32)))
            check = greedy_equiv_from_dataset(mdp, dataset, q)
            name = 'greedy_equiv_dataset'
        else:
            check = greedy_equiv_check(mdp.beta, q, r_star=max_return + 1.0, max_return=max_return)
            name = 'greedy_equiv'
        failures = int(np.sum(~check.passed))
        results.append(CheckResult(name, f"instance={index},S={S},A={A}", check.all_passed, float(failures)))
    return results


def dynamics_suite(instances: int = 20, seed: int = 0, gamma: float = 0.9,
                   tolerance: float = 1e-10) -> List[CheckResult]:
    """zero 模式收敛到 Q_β，large 模式单调收敛到支撑集约束的 Q*"""
    results = []
    for index in range(instances):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        S = int(rng.integers(2, 7))
        A = int(rng.integers(2, 5))
        mdp = random_tabular_mdp(rng, n_states=S, n_actions=A, support_prob=0.7)
        mask = support_from_behavior(mdp.beta)
        params = f"instance={index},S={S},A={A}"

        zero = exact_align_iteration(mdp, mask, 'zero', gamma=gamma)
        q_beta = policy_evaluation(mdp, mdp.beta, gamma)
        zero_gap = float(np.max(np.abs(zero[-1] - q_beta)))
        results.append(CheckResult('dynamics_zero', params, zero_gap < tolerance, zero_gap))

        large = exact_align_iteration(mdp, mask, 'large', gamma=gamma)
        q_star = value_iteration(mdp, mask, gamma).q
        large_gap = q_star.gap(large[-1])
        results.append(CheckResult('dynamics_large', params, large_gap < tolerance, large_gap))

        steps = [float(np.min(b - a)) for a, b in zip(large[:-1], large[1:])]
        worst = min(steps) if steps else 0.0
        results.append(CheckResult('dynamics_monotone', params, worst >= -MONOTONE_TOL, worst))
    return results


SUITES: Dict[str, Callable[..., List[CheckResult]]] = {
    'counting': counting_suite,
    'greedy': greedy_suite,
    'dynamics': dynamics_suite,
}


def run_suites(name: str, seed: int = 0, **caps) -> List[CheckResult]:
    """
    运行验证套件

    Args:
        name: counting / greedy / dynamics / all
        seed: 随机实例的种子
        caps: 传给各套件的规模上限（只传该套件认识的键）

    Returns:
        List[CheckResult]
    """
    names = list(SUITES) if name == 'all' else [name]
    results = []
    for suite in names:
        if suite not in SUITES:
            raise ValueError(f"未知的验证套件: {suite}（可选: {', '.join(SUITES)}, all）")
        fn = SUITES[suite]
        accepted = inspect.signature(fn).parameters
        kwargs = {k: v for k, v in caps.items() if k in accepted and v is not None}
        suite_results = fn(seed=seed, **kwargs)
        failed = sum(not r.passed for r in suite_results)
        logger.info(f"套件 {suite}: {len(suite_results)} 项检查，失败 {failed}")
        results.extend(suite_results)
    return results
