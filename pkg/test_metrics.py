"""
公平性指数・ステップ報酬・JCT集計・総当たり検証のテスト
"""
import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metrics import (
    RewardState, fairness, jct_summary, makespan, occupancy_ratio, prop1_oracle, step_reward, summarize,
)

positive = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False)


@pytest.mark.parametrize('loads, expected', [
    ([3.0, 3.0, 3.0], 1.0),
    ([1.0, 2.0], 0.5),
    ([1.0, 2.0, 4.0], 0.125),
    ([0.0, 0.0], 1.0),
    ([0.0, 5.0], 0.0),
    ([7.0], 1.0),
])
def test_fairness_examples(loads, expected):
    assert fairness(loads) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize('loads', [[-1.0, 2.0], [], [float('inf'), 1.0]])
def test_fairness_rejects_bad_vectors(loads):
    with pytest.raises(ValueError):
        fairness(loads)


@pytest.mark.parametrize('loads, expected', [([1.0, 2.0, 4.0], 4.0), ([0.0, 0.0], 0.0), ([3.0], 3.0)])
def test_makespan_examples(loads, expected):
    assert makespan(loads) == expected


def test_makespan_of_empty_vector_is_an_error():
    with pytest.raises(ValueError):
        makespan([])


@given(st.lists(positive, min_size=1, max_size=8), st.randoms(), st.sampled_from([0.25, 2.0, 64.0]))
def test_fairness_invariances(loads, rnd, scale):
    """正のベクトルで 0<F≤1、並べ替えと2の冪倍で不変"""
    f = fairness(loads)
    assert 0.0 < f <= 1.0
    shuffled = list(loads)
    rnd.shuffle(shuffled)
    assert fairness(shuffled) == pytest.approx(f, rel=1e-12)
    assert fairness([x * scale for x in loads]) == pytest.approx(f, rel=1e-12)


@given(st.lists(positive, min_size=2, max_size=6), st.data())
def test_fairness_drops_when_non_max_entry_drops(loads, data):
    top = max(loads)
    candidates = [i for i, x in enumerate(loads) if x < top]
    if not candidates:
        return
    i = data.draw(st.sampled_from(candidates))
    lower = list(loads)
    lower[i] = loads[i] / 2
    assert fairness(lower) < fairness(loads)


def test_first_step_reward_uses_current_tau():
    assert step_reward(RewardState(), [1.0, 1.0]) == 1.0


def test_second_step_reward_blends_with_previous():
    state = RewardState(gamma=0.9)
    step_reward(state, [1.0, 1.0])
    r = step_reward(state, [1.0, 3.0])
    assert r == pytest.approx(1.0 / 2.8, abs=1e-12)
    assert state.step == 2


def test_reward_is_one_when_tau_stays_equal():
    state = RewardState()
    for _ in range(10):
        assert step_reward(state, [0.7, 0.7, 0.7]) == pytest.approx(1.0)


def test_reward_length_mismatch_is_an_error():
    state = RewardState()
    step_reward(state, [1.0, 1.0])
    with pytest.raises(ValueError):
        step_reward(state, [1.0, 1.0, 1.0])


def test_reward_matches_direct_formula():
    """20組の τ̄ 列で F((1−γ)τ̄_prev + γτ̄_now) と 1e-12 以内で一致"""
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 6))
        prev = rng.uniform(0.01, 3.0, n)
        now = rng.uniform(0.01, 3.0, n)
        state = RewardState(gamma=0.9)
        step_reward(state, prev)
        blend = [0.1 * p + 0.9 * c for p, c in zip(prev, now)]
        expected = math.prod(x / max(blend) for x in blend)
        assert step_reward(state, now) == pytest.approx(expected, abs=1e-12)


@given(st.lists(positive, min_size=1, max_size=6))
def test_reward_equals_fairness_when_tau_unchanged(tau):
    state = RewardState()
    step_reward(state, tau)
    assert step_reward(state, tau) == pytest.approx(fairness(tau), rel=1e-12)


def test_summary_population_std():
    s = summarize([1.0, 2.0, 3.0])
    assert s.mean == 2.0
    assert s.std == pytest.approx(0.8165, abs=1e-4)


def test_summary_interpolated_p90():
    assert summarize(np.arange(1, 101)).p90 == pytest.approx(90.1)


def test_summary_single_flow():
    s = summarize([4.2])
    assert s.std == 0.0 and s.p99 == 4.2


def test_summary_cdf_has_200_points():
    s = summarize(np.random.default_rng(1).exponential(1.0, 500))
    assert len(s.cdf) == 200
    values = [v for v, _ in s.cdf]
    fractions = [f for _, f in s.cdf]
    assert values == sorted(values)
    assert fractions[0] == 0.0 and fractions[-1] == 1.0


def test_jct_summary_by_class():
    flows = [SimpleNamespace(cls=c, fct=t) for c, t in [('H', 1.0), ('H', 3.0), ('L', 0.5)]]
    result = jct_summary(flows)
    assert set(result) == {'all', 'H', 'L'}
    assert result['H'].mean == 2.0
    assert result['all'].count == 3


def test_jct_summary_of_nothing_is_an_error():
    with pytest.raises(ValueError):
        jct_summary([])


def test_oracle_two_equal_servers():
    verdict = prop1_oracle(2, 4, [1.0, 1.0])
    assert verdict.fair_assignments == [(2, 2)]
    assert verdict.min_makespan == 2.0
    assert verdict.sufficient


def test_oracle_mixed_speeds():
    assert prop1_oracle(2, 3, [1.0, 2.0]).sufficient


def test_oracle_single_server_holds():
    verdict = prop1_oracle(1, 5, [1.0])
    assert verdict.holds and verdict.best_fairness == 1.0


def test_oracle_fewer_jobs_than_servers_is_degenerate():
    verdict = prop1_oracle(3, 2, [1.0, 1.0, 2.0])
    assert verdict.degenerate and verdict.sufficient


def test_oracle_full_sweep():
    """n≤3・J≤10・速度{1,2}の全組み合わせで十分性が成り立ち、必要でない例も見つかる"""
    witnesses = []
    for n in range(1, 4):
        for speeds in itertools.product([1.0, 2.0], repeat=n):
            for jobs in range(0, 11):
                verdict = prop1_oracle(n, jobs, speeds)
                assert verdict.sufficient, (n, jobs, speeds)
                if verdict.not_necessary_witness is not None:
                    witnesses.append(verdict)
    assert witnesses
    w = witnesses[0]
    loads = np.asarray(w.not_necessary_witness) / np.asarray(w.speeds)
    assert makespan(loads) == pytest.approx(w.min_makespan)
    assert fairness(loads) < w.best_fairness


@pytest.mark.parametrize('n, jobs, speeds', [(5, 3, [1.0] * 5), (2, 13, [1.0, 1.0]), (2, 3, [1.0]), (2, 3, [1.0, 0.0])])
def test_oracle_rejects_bad_instances(n, jobs, speeds):
    with pytest.raises(ValueError):
        prop1_oracle(n, jobs, speeds)


def test_occupancy_ratio():
    assert occupancy_ratio({'fast': 3.0, 'slow': 1.5}) == 2.0
    assert math.isnan(occupancy_ratio({'fast': 1.0, 'slow': 0.0}))
