"""
到着過程・トレース・LBへの振り分けのテスト
"""
import math

import numpy as np
import pytest
from scipy import stats

from conftest import make_scenario, make_trace
from scenario_config import ConfigError
from sim_core import make_rng
from traffic import (
    HEAVY, LIGHT, TraceError, TrafficModel, dispatch_to_lb, generate_trace, load_trace, save_trace,
    split_by_lb, truncate_trace,
)


def test_poisson_count_within_tail_bound():
    """λ=400、30秒の到着数は λd ± 4√(λd) に収まる（100シード）"""
    model = TrafficModel(rate=400.0, duration=30.0)
    mean = 400.0 * 30.0
    bound = 4.0 * math.sqrt(mean)
    for seed in range(100):
        trace = generate_trace(model, make_rng(seed, 'arrivals'))
        assert abs(len(trace) - mean) <= bound


def test_interarrival_gaps_pass_ks_test():
    model = TrafficModel(rate=400.0, duration=5.0)
    passed = 0
    for seed in range(100):
        trace = generate_trace(model, make_rng(seed, 'arrivals'))
        gaps = np.diff(np.concatenate([[0.0], trace.arrival_times]))
        if stats.kstest(gaps, 'expon', args=(0, 1.0 / 400.0)).pvalue >= 0.01:
            passed += 1
    assert passed >= 95


def test_exponential_workload_mean():
    model = TrafficModel(rate=20000.0, duration=6.0, mean_workload=0.2)
    trace = generate_trace(model, make_rng(1, 'arrivals'), make_rng(1, 'workloads'))
    assert len(trace) >= 100_000
    assert abs(trace.workloads.mean() - 0.2) / 0.2 < 0.03


def test_two_class_mix():
    model = TrafficModel(rate=5000.0, duration=10.0, kind='two_class', p_heavy=0.3,
                         mean_heavy=0.4, mean_light=0.02)
    trace = generate_trace(model, make_rng(2, 'arrivals'), make_rng(2, 'workloads'))
    heavy = np.array([c == HEAVY for c in trace.classes])
    assert abs(heavy.mean() - 0.3) < 0.01
    assert abs(trace.workloads[heavy].mean() - 0.4) / 0.4 < 0.05
    assert abs(trace.workloads[~heavy].mean() - 0.02) / 0.02 < 0.05


def test_zero_duration_gives_empty_trace():
    trace = generate_trace(TrafficModel(rate=100.0, duration=0.0), make_rng(0, 'arrivals'))
    assert len(trace) == 0


def test_generated_trace_is_sorted_and_truncated():
    trace = generate_trace(TrafficModel(rate=50.0, duration=3.0), make_rng(4, 'arrivals'))
    assert np.all(np.diff(trace.arrival_times) >= 0)
    assert np.all(trace.arrival_times < 3.0)
    trace.validate()


@pytest.mark.parametrize('kwargs', [
    dict(rate=0.0, duration=1.0),
    dict(rate=1.0, duration=1.0, mean_workload=-0.1),
    dict(rate=1.0, duration=1.0, p_heavy=1.5),
])
def test_invalid_model_is_rejected(kwargs):
    with pytest.raises(ConfigError):
        generate_trace(TrafficModel(**kwargs), make_rng(0, 'arrivals'))


def test_load_trace_two_rows(tmp_path):
    path = tmp_path / 'trace.csv'
    path.write_text('arrival_time,workload,class\n0.00,1.0,H\n0.10,0.5,L\n', encoding='utf-8')
    trace = load_trace(path)
    assert len(trace) == 2
    assert trace.classes == [HEAVY, LIGHT]
    np.testing.assert_array_equal(trace.workloads, [1.0, 0.5])


def test_load_trace_rejects_negative_workload(tmp_path):
    path = tmp_path / 'trace.csv'
    path.write_text('arrival_time,workload,class\n0.00,-1,H\n', encoding='utf-8')
    with pytest.raises(TraceError) as info:
        load_trace(path)
    assert info.value.line == 2


def test_load_trace_names_first_out_of_order_line(tmp_path):
    path = tmp_path / 'trace.csv'
    path.write_text('arrival_time,workload,class\n0.5,1,H\n0.7,1,L\n0.6,1,L\n0.1,1,L\n', encoding='utf-8')
    with pytest.raises(TraceError) as info:
        load_trace(path)
    assert info.value.line == 4
    assert '4行目' in str(info.value)


def test_load_trace_rejects_bad_header_and_missing_file(tmp_path):
    path = tmp_path / 'trace.csv'
    path.write_text('t,w,c\n0,1,H\n', encoding='utf-8')
    with pytest.raises(TraceError):
        load_trace(path)
    with pytest.raises(TraceError):
        load_trace(tmp_path / 'missing.csv')


def test_saved_trace_reads_back_exactly(tmp_path):
    model = TrafficModel(rate=30.0, duration=2.0, kind='two_class')
    trace = generate_trace(model, make_rng(5, 'arrivals'), make_rng(5, 'workloads'))
    path = tmp_path / 'trace.csv'
    save_trace(trace, path)
    back = load_trace(path, duration=2.0)
    np.testing.assert_array_equal(back.arrival_times, trace.arrival_times)
    np.testing.assert_array_equal(back.workloads, trace.workloads)
    assert back.classes == trace.classes


def test_truncate_trace():
    trace = make_trace([0.1, 0.5, 1.2], [1, 1, 1], duration=2.0)
    assert len(truncate_trace(trace, 1.0)) == 2


def test_single_lb_always_zero():
    rng = make_rng(0, 'dispatch')
    assert {dispatch_to_lb(None, 1, rng) for _ in range(100)} == {0}


def test_two_lbs_split_evenly():
    rng = make_rng(0, 'dispatch')
    ids = np.array([dispatch_to_lb(None, 2, rng) for _ in range(100_000)])
    assert abs((ids == 0).mean() - 0.5) < 0.01


def test_dispatch_requires_an_lb():
    with pytest.raises(ConfigError):
        dispatch_to_lb(None, 0, make_rng(0, 'dispatch'))


def test_split_by_lb_superposition():
    """LBごとのサブトレースを合わせると元のトレースに戻る"""
    trace = generate_trace(TrafficModel(rate=200.0, duration=2.0), make_rng(9, 'arrivals'))
    rng = make_rng(9, 'dispatch')
    ids = [dispatch_to_lb(None, 3, rng) for _ in range(len(trace))]
    parts = split_by_lb(trace, ids, 3)
    merged = np.sort(np.concatenate([p.arrival_times for p in parts]))
    np.testing.assert_array_equal(merged, trace.arrival_times)
    assert sum(len(p) for p in parts) == len(trace)


def test_traffic_model_from_load():
    """load 指定では λ = load·Σv / E[w]"""
    cfg = make_scenario(speeds=(1.0, 2.0), rate=None)
    cfg.traffic.rate = None
    cfg.traffic.load = 0.5
    model = TrafficModel.from_scenario(cfg)
    assert model.rate == pytest.approx(0.5 * 3.0 / 0.2)
