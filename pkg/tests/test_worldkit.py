"""环境、行为策略、数据生成、窗口采样与数据集文件"""
import hashlib

import numpy as np
import pytest

from oracles import behavior_value
from worldkit import (DATASET_MAGIC, Dataset, DatasetFormatError, StepResult, TabularBehavior, TabularMDP,
                      Trajectory, TrajectoryRejected, UnknownEnvError, annotate_rtg, chain_mdp, generate,
                      grid_controller, grid_mdp, list_envs, load_dataset, make_behavior, make_env,
                      random_tabular_mdp, run_episode, sample_window, sample_windows, save_dataset,
                      window_at)


def test_annotate_rtg_telescopes(rng):
    rewards = rng.normal(size=17)
    rtgs = annotate_rtg(rewards)
    for t in range(16):
        assert rtgs[t] == rewards[t] + rtgs[t + 1]
    assert rtgs[-1] == rewards[-1]


@pytest.mark.parametrize('bad', [[], [1.0, np.nan], [[1.0, 2.0]]])
def test_annotate_rtg_rejects_bad_rewards(bad):
    with pytest.raises(TrajectoryRejected):
        annotate_rtg(bad)


def test_trajectory_lengths_must_agree():
    with pytest.raises(TrajectoryRejected):
        Trajectory(states=np.zeros((3, 2)), actions=np.zeros((2, 1)), rewards=np.zeros(3), rtgs=np.zeros(3))


def test_chain_mdp_structure():
    mdp = chain_mdp(5, epsilon=0.2)
    assert mdp.P.shape == (5, 2, 5)
    assert mdp.horizon == 20
    assert mdp.P[2, 1, 3] == 1.0 and mdp.P[2, 0, 1] == 1.0 and mdp.P[0, 0, 0] == 1.0
    assert np.all(mdp.terminal[4]) and not np.any(mdp.terminal[:4])
    np.testing.assert_allclose(mdp.beta[0], [0.1, 0.9])


def test_tabular_mdp_validates_rows():
    mdp = chain_mdp(3)
    bad = mdp.P.copy()
    bad[0, 0, 0] += 1e-6
    with pytest.raises(ValueError):
        TabularMDP(P=bad, R=mdp.R, terminal=mdp.terminal, horizon=mdp.horizon, init=mdp.init, beta=mdp.beta)
    with pytest.raises(ValueError):
        mdp.with_behavior(np.full((3, 2), 0.4))


def test_random_tabular_mdp_keeps_one_supported_action_per_state():
    mdp = random_tabular_mdp(np.random.default_rng(0), n_states=6, n_actions=4, support_prob=0.0)
    assert np.all((mdp.beta > 0).sum(axis=1) == 1)


def test_grid_controller_reaches_goal():
    env = make_env('grid-5x5', epsilon=0.0)
    behavior = TabularBehavior(env.behavior_table(0.0), 'controller')
    traj = run_episode(env.spawn(), behavior, np.random.default_rng(0))
    assert traj.terminal
    assert len(traj) == 8
    assert traj.episode_return == pytest.approx(3.0)
    np.testing.assert_array_equal(grid_controller()[:4], [3, 3, 3, 3])


def test_registry():
    assert 'pointmass' in list_envs()
    assert make_env('chain-7').state_dim == 7
    assert make_env('grid-5x5').rtg_scale == 8.0
    for bad in ('chain-1', 'chain-x', 'halfcheetah-medium'):
        with pytest.raises(UnknownEnvError):
            make_env(bad)


def test_pointmass_dynamics():
    env = make_env('pointmass')
    env.reset(np.random.default_rng(0))
    result = env.step(np.array([5.0]))
    # 动作截断到 1: v' = 0.1 * 2 = 0.2，奖励 0.2 - 0.1
    np.testing.assert_allclose(result.state, [0.02, 0.2])
    assert result.reward == pytest.approx(0.1)
    assert not result.done


def test_generation_is_deterministic_and_schedule_independent():
    env = make_env('chain-5', epsilon=0.3)
    behavior = make_behavior(env, 0.3)
    a = generate(env, behavior, episodes=25, seed=7, workers=1)
    b = generate(env, behavior, episodes=25, seed=7, workers=4)
    c = generate(env, behavior, episodes=25, seed=8, workers=4)
    assert a.equals(b)
    assert not a.equals(c)
    assert [t.seed for t in a.trajectories] == list(range(25))


def test_generate_rejects_zero_episodes():
    env = make_env('chain-5')
    with pytest.raises(ValueError):
        generate(env, make_behavior(env), episodes=0, seed=0)


def test_pointmass_returns_cover_both_modes(pointmass_dataset):
    returns = np.array([t.episode_return for t in pointmass_dataset.trajectories])
    assert returns.min() < 60.0
    assert returns.max() > 75.0
    assert pointmass_dataset.stats.return_min == returns.min()
    assert pointmass_dataset.n_actions is None


def test_dataset_rtgs_telescope(chain_dataset):
    for traj in chain_dataset.trajectories:
        np.testing.assert_array_equal(traj.rtgs[:-1], traj.rewards[:-1] + traj.rtgs[1:])
        assert traj.terminal == (traj.rewards[-1] == 1.0)


class FlakyEnv:
    """一半回合在第一步返回 NaN 奖励"""
    env_id = 'flaky'
    horizon = 3
    rtg_scale = 1.0
    state_dim = 1
    action_dim = 1
    n_actions = None

    def spawn(self):
        return FlakyEnv()

    def reset(self, rng):
        self.bad = rng.random() < 0.5
        return np.zeros(1)

    def step(self, action):
        return StepResult(state=np.zeros(1), reward=float('nan') if self.bad else 1.0, done=False)


class ZeroBehavior:
    policy_id = 'zero'

    def start(self, rng):
        return self

    def act(self, state, rng):
        return np.zeros(1)


def test_non_finite_episodes_are_rejected_and_counted():
    dataset = generate(FlakyEnv(), ZeroBehavior(), episodes=20, seed=1, workers=3)
    assert dataset.stats.rejected > 0
    assert dataset.stats.count + dataset.stats.rejected == 20
    assert all(np.all(np.isfinite(t.rewards)) for t in dataset.trajectories)


def test_window_at_pads_episode_start(chain_dataset):
    traj = chain_dataset.trajectories[0]
    window = window_at(chain_dataset, 0, 1, 4)
    np.testing.assert_array_equal(window.valid_mask, [False, False, True, True])
    np.testing.assert_array_equal(window.timesteps[2:], [0, 1])
    np.testing.assert_array_equal(window.rtgs[2:], traj.rtgs[:2] / chain_dataset.rtg_scale)
    assert np.all(window.states[:2] == 0) and np.all(window.actions[:2] == 0)


def test_window_at_marks_last_step_done(chain_dataset):
    traj = chain_dataset.trajectories[3]
    t = len(traj) - 1
    window = window_at(chain_dataset, 3, t, 3)
    assert window.dones[-1]
    assert not np.any(window.dones[:-1])


def test_sample_windows_batch(chain_dataset):
    batch = sample_windows(chain_dataset, np.random.default_rng(0), k=4, batch_size=6)
    assert batch.rtgs.shape == (6, 4)
    assert batch.states.shape == (6, 4, 5)
    assert np.all(batch.valid_mask[:, -1])


def test_dataset_round_trip(tmp_path, chain_dataset):
    path = tmp_path / 'chain.qds'
    save_dataset(chain_dataset, path)
    loaded = load_dataset(path)
    assert loaded.equals(chain_dataset)
    save_dataset(loaded, tmp_path / 'again.qds')
    assert (tmp_path / 'again.qds').read_bytes() == path.read_bytes()


def _rewrite(path, body: bytes):
    path.write_bytes(body + hashlib.sha256(body).digest())


@pytest.mark.parametrize('reason, corrupt', [
    ('magic', lambda raw, body: b'XXXXXXXX' + raw[8:]),
    ('version', lambda raw, body: raw[:8] + b'\x02\x00' + raw[10:]),
    ('checksum', lambda raw, body: raw[:40] + bytes([raw[40] ^ 0x01]) + raw[41:]),
    ('truncation', None),
])
def test_corrupt_datasets_name_the_reason(tmp_path, chain_dataset, reason, corrupt):
    path = tmp_path / 'chain.qds'
    save_dataset(chain_dataset, path)
    raw = path.read_bytes()
    body = raw[:-32]
    if corrupt is None:
        _rewrite(path, body[:-17])
    else:
        path.write_bytes(corrupt(raw, body))
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(path)
    assert err.value.reason == reason
    assert raw[:8] == DATASET_MAGIC


@pytest.mark.slow
def test_generated_returns_match_exact_behavior_value():
    env = make_env('chain-5', epsilon=0.8)
    dataset = generate(env, make_behavior(env, 0.8), episodes=10_000, seed=13, workers=4)
    returns = np.array([t.episode_return for t in dataset.trajectories])
    expected = behavior_value(env.mdp, gamma=1.0)
    standard_error = returns.std(ddof=1) / np.sqrt(returns.size)
    assert 0.0 < expected < 1.0
    assert abs(returns.mean() - expected) < 3 * standard_error


def _marked_dataset(lengths) -> Dataset:
    trajectories, offset = [], 0
    for n in lengths:
        rewards = np.ones(n)
        trajectories.append(Trajectory(states=np.arange(offset, offset + n, dtype=np.float64)[:, None],
                                       actions=np.zeros((n, 1)), rewards=rewards, rtgs=annotate_rtg(rewards)))
        offset += n
    return Dataset(trajectories=trajectories, rtg_scale=1.0, env_id='marked', state_dim=1, action_dim=1)


def test_sample_window_is_uniform_over_timesteps():
    dataset = _marked_dataset([10, 30])
    rng = np.random.default_rng(8)
    draws = 100_000
    ends = np.array([int(sample_window(dataset, rng, 2).states[-1, 0]) for _ in range(draws)])
    counts = np.bincount(ends, minlength=40)

    p = 1.0 / 40
    per_step_se = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) < 4 * per_step_se)

    short = counts[:10].sum()
    share = 10 / 40
    assert abs(short - draws * share) < 3 * np.sqrt(draws * share * (1 - share))
