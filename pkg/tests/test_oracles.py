"""表格精确验证：计数、对数上界、贪心等价、评论家迭代极限"""
import numpy as np
import pytest

from oracles import (CheckResult, CountingInstance, EnumerationBudgetError, OracleError, SupportQ,
                     action_ranks, behavior_value, count_free, count_mono, counting_suite, dynamics_suite,
                     empirical_action_probs, enumerate_mono, exact_align_iteration, greedy_equiv_check,
                     greedy_equiv_from_dataset, greedy_suite, log_bound_check, policy_evaluation, run_suites,
                     support_from_behavior, support_from_dataset, value_iteration)
from worldkit import TabularEnv, chain_mdp, generate, make_behavior, make_env, random_tabular_mdp


def test_closed_form_counts():
    assert count_free(3, 4, 5) == 244140625
    assert count_mono(2, 3, 3) == 100
    assert count_mono(1, 1, 7) == count_free(1, 1, 7) == 7
    with pytest.raises(ValueError):
        count_mono(0, 1, 1)


def test_counts_are_exact_integers():
    # 超过 float64 精度时仍然精确
    assert count_free(10, 10, 10) == 10 ** 100


@pytest.mark.parametrize('S, G, A', [(1, 1, 1), (2, 3, 3), (3, 2, 4), (1, 4, 2)])
def test_enumeration_matches_formula(S, G, A):
    assert enumerate_mono(CountingInstance(S, G, A)) == count_mono(S, G, A)


def test_enumeration_with_tied_q_values():
    q = [[0.0, 0.0, 1.0], [1.0, 1.0, 1.0]]
    assert enumerate_mono(CountingInstance(2, 3, 3, q=q)) == 100


def test_action_ranks_break_ties_by_index():
    np.testing.assert_array_equal(action_ranks(np.array([2.0, 1.0, 1.0]), 3), [2, 0, 1])
    np.testing.assert_array_equal(action_ranks(None, 3), [0, 1, 2])


def test_enumeration_budget_is_enforced():
    with pytest.raises(EnumerationBudgetError) as err:
        enumerate_mono(CountingInstance(3, 10, 10, cap=1000))
    assert err.value.required == 3 * 10 ** 10
    assert err.value.cap == 1000
    with pytest.raises(EnumerationBudgetError):
        counting_suite(max_states=3, max_levels=10, max_actions=10, cap=1000)


def test_q_table_shape_is_checked():
    with pytest.raises(ValueError):
        CountingInstance(2, 2, 3, q=np.zeros((3, 2)))


@pytest.mark.parametrize('S, G, A', [(1, 1, 1), (3, 4, 5), (5, 8, 2)])
def test_log_bound_holds(S, G, A):
    bound = log_bound_check(CountingInstance(S, G, A))
    assert bound.holds
    assert bound.rhs == pytest.approx(bound.rhs_log_form)


def test_greedy_equivalence_single_state():
    check = greedy_equiv_check(np.array([[0.5, 0.5]]), np.array([[1.0, 2.0]]), r_star=11.0, max_return=10.0)
    assert check.all_passed
    assert check.minimizers == [(1,)]


def test_greedy_equivalence_with_ties():
    check = greedy_equiv_check(np.array([[0.2, 0.3, 0.5]]), np.array([[2.0, 2.0, 0.0]]), 5.0, 4.0)
    assert check.minimizers == check.argmax == [(0, 1)]


def test_greedy_check_preconditions():
    with pytest.raises(OracleError):
        greedy_equiv_check(np.array([[1.0, 0.0]]), np.zeros((1, 2)), 5.0, 4.0)
    with pytest.raises(OracleError):
        greedy_equiv_check(np.array([[0.5, 0.5]]), np.zeros((1, 2)), 4.0, 4.0)


def test_greedy_equivalence_from_generated_dataset():
    rng = np.random.default_rng(17)
    mdp = random_tabular_mdp(rng, n_states=3, n_actions=3, horizon=10, support_prob=1.0)
    env = TabularEnv('random-3x3', mdp)
    dataset = generate(env, make_behavior(env), episodes=500, seed=2, workers=2)
    q = rng.normal(size=(3, 3))
    check = greedy_equiv_from_dataset(mdp, dataset, q)
    assert check.all_passed
    assert check.argmax == [(int(a),) for a in np.argmax(q, axis=1)]
    with pytest.raises(OracleError):
        greedy_equiv_from_dataset(mdp, dataset, q, r_star=dataset.stats.return_max)


def test_greedy_from_dataset_needs_every_action():
    env = make_env('chain-3', epsilon=0.0)
    dataset = generate(env, make_behavior(env, 0.0), episodes=5, seed=0, workers=1)
    with pytest.raises(OracleError):
        greedy_equiv_from_dataset(env.mdp, dataset, np.zeros((3, 2)))


def test_finite_horizon_chain_values():
    mdp = chain_mdp(2, epsilon=0.2, horizon=2)
    result = value_iteration(mdp, gamma=1.0)
    np.testing.assert_array_equal(result.q.values, [[0.0, 1.0], [1.0, 1.0]])
    np.testing.assert_array_equal(result.policy, [1, 0])
    assert behavior_value(mdp, gamma=1.0) == pytest.approx(0.9)
    short = value_iteration(chain_mdp(2, horizon=1), gamma=1.0)
    assert short.q.values[0, 1] == 0.0


def test_support_restricted_values_are_nan_off_support():
    mdp = random_tabular_mdp(np.random.default_rng(3), n_states=4, n_actions=3, support_prob=0.5)
    mask = support_from_behavior(mdp.beta)
    q = value_iteration(mdp, mask, gamma=0.9).q
    assert np.all(np.isnan(q.values[~mask]))
    assert np.all(np.isfinite(q.values[mask]))
    assert np.all(mask[np.arange(4), q.greedy()])


def test_empty_reachable_support_is_rejected():
    mdp = chain_mdp(3)
    mask = np.ones((3, 2), dtype=bool)
    mask[1] = False
    with pytest.raises(OracleError):
        value_iteration(mdp, mask, gamma=0.9)


def test_support_from_dataset(chain_dataset):
    mask = support_from_dataset(chain_dataset, 5, 2)
    assert mask[0, 1]
    probs = empirical_action_probs(chain_dataset, 5, 2)
    visited = mask.any(axis=1)
    np.testing.assert_allclose(probs[visited].sum(axis=1), 1.0)


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_zero_shift_iteration_converges_to_behavior_values(seed):
    mdp = random_tabular_mdp(np.random.default_rng(seed), n_states=5, n_actions=3, support_prob=0.6)
    sequence = exact_align_iteration(mdp, mode='zero', gamma=0.9)
    np.testing.assert_allclose(sequence[-1], policy_evaluation(mdp, gamma=0.9), atol=1e-10, rtol=0)


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_large_shift_iteration_is_monotone_and_reaches_optimum(seed):
    mdp = random_tabular_mdp(np.random.default_rng(seed), n_states=5, n_actions=3, support_prob=0.6)
    mask = support_from_behavior(mdp.beta)
    sequence = exact_align_iteration(mdp, mask, mode='large', gamma=0.9)
    for before, after in zip(sequence[:-1], sequence[1:]):
        assert np.min(after - before) >= -1e-12
    q_star = value_iteration(mdp, mask, gamma=0.9).q
    assert q_star.gap(sequence[-1]) < 1e-10


def test_unknown_iteration_mode():
    with pytest.raises(ValueError):
        exact_align_iteration(chain_mdp(3), mode='medium')


def test_support_q_gap_ignores_off_support_entries():
    mask = np.array([[True, False]])
    q = SupportQ.restrict(np.array([[1.0, 5.0]]), mask)
    assert q.gap(np.array([[1.5, -100.0]])) == pytest.approx(0.5)


def test_check_result_line():
    assert CheckResult('log_bound', 'S=1,G=1,A=1', True, 0.0).line() == 'log_bound S=1,G=1,A=1 PASS gap=0.000e+00'


def test_suites_pass_on_small_instances():
    results = counting_suite(max_states=2, max_levels=3, max_actions=3)
    results += greedy_suite(instances=10, seed=4)
    results += dynamics_suite(instances=4, seed=4)
    failed = [r.line() for r in results if not r.passed]
    assert not failed


def test_run_suites_filters_caps():
    results = run_suites('all', seed=1, max_states=1, max_levels=2, max_actions=2, instances=2, cap=None)
    names = {r.name for r in results}
    assert {'count_mono=enumerate', 'greedy_equiv', 'greedy_equiv_dataset', 'dynamics_large'} <= names
    assert all(r.passed for r in results)
    with pytest.raises(ValueError):
        run_suites('nonsense')
