"""
テスト共通のフィクスチャ
"""
import numpy as np
import pytest

from scenario_config import AgentConfig, ScenarioConfig, ServerGroup, TrafficConfig
from traffic import Trace


def make_scenario(speeds=(1.0, 2.0), workers=(1, 1), lb_count=1, policy='sed', rate=4.0,
                  episode_length=5.0, **changes) -> ScenarioConfig:
    """サーバー1台ずつのグループからなる小さなシナリオ"""
    groups = [ServerGroup(f's{j}', 1, float(v), int(w)) for j, (v, w) in enumerate(zip(speeds, workers))]
    cfg = ScenarioConfig(
        name='test',
        server_groups=groups,
        lb_count=lb_count,
        traffic=TrafficConfig(kind='poisson', rate=rate, mean_workload=0.2),
        policy=policy,
        episode_length=episode_length,
        seeds=[1],
    )
    return cfg.replace(**changes) if changes else cfg


def make_trace(times, workloads, classes=None, duration=None) -> Trace:
    classes = list(classes) if classes is not None else ['L'] * len(times)
    return Trace(
        np.asarray(times, dtype=float),
        np.asarray(workloads, dtype=float),
        classes,
        duration if duration is not None else (max(times) if len(times) else 0.0),
    )


def small_agent(kind: str, **changes) -> AgentConfig:
    """テスト用の小さなエージェント設定"""
    base = dict(kind=kind, hidden_size=16, batch_size=4, buffer_size=500, episodes=2,
                updates_per_episode=2, segment_length=8, mixer_embed=8, hypernet_embed=8,
                checkpoint_every=1)
    base.update(changes)
    return AgentConfig(**base)


@pytest.fixture
def scenario():
    return make_scenario()


@pytest.fixture
def two_group_scenario():
    """低速・高速グループを持つ中規模プリセットの縮小版"""
    return ScenarioConfig(
        name='two-group',
        server_groups=[ServerGroup('slow', 2, 1.0, 2), ServerGroup('fast', 2, 2.0, 4)],
        lb_count=2,
        traffic=TrafficConfig(kind='two_class', load=0.7),
        episode_length=4.0,
        seeds=[1],
    )
