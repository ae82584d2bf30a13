"""
1エピソード分の離散イベントシミュレーション

フロー到着・完了イベントと、一定間隔（Δt）の制御ステップを1本のイベントキューで処理する。
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from lb import (
    LbState, PolicyKind, apply_action, choose_server, awcmp_probe_update, levels_to_weights,
    observe, on_flow_assign, on_flow_end, pooled_duration_stats, duration_stats, static_weights,
)
from metrics import RewardState, step_reward
from rl_agents import sync_delay_model
from scenario_config import AGENT_KINDS, ScenarioConfig
from servers import Flow, ServerState, admit_flow, build_servers, busy_workers, complete_flow, expected_finish_load
from sim_core import ContractViolation, Event, EventKind, EventQueue, RngStreams, SimClock
from traffic import Trace, TrafficModel, dispatch_to_lb, generate_trace, load_trace, truncate_trace

logger = logging.getLogger(__name__)

DELAYED_POLICIES = ('qmix', 'isac')


@dataclass
class PolicyBinding:
    """
    エピソードで使う振り分けポリシー

    controller を持つ場合は学習エージェントが制御ステップごとに重みを決め、
    LBは重み付きSEDで振り分ける。
    """

    policy: str = 'sed'
    controller: Any = None
    static_weights: Optional[List[float]] = None

    @property
    def kind(self) -> PolicyKind:
        return PolicyKind.from_name(self.policy)

    @property
    def is_learned(self) -> bool:
        return self.policy in AGENT_KINDS


@dataclass
class FlowRecord:
    flow_id: int
    cls: str
    lb_id: int
    server_id: int
    t_arrival: float
    t_service_start: float
    t_complete: float
    workload: float = 0.0
    service_work: float = 0.0

    @property
    def fct(self) -> float:
        return self.t_complete - self.t_arrival


@dataclass
class StepRecord:
    """制御ステップ1回分の記録（報酬などは次のステップで確定する）"""

    index: int
    time: float
    in_flight: List[int]
    busy: List[int]
    weights: List[List[float]]
    reward: float = math.nan
    fairness: float = math.nan
    fairness_ground_truth: float = math.nan
    local_rewards: List[float] = field(default_factory=list)
    tau: List[float] = field(default_factory=list)
    ground_truth_load: List[float] = field(default_factory=list)
    busy_avg: List[float] = field(default_factory=list)


@dataclass
class Trajectory:
    """学習用の観測・状態・行動・報酬の列"""

    observations: List[np.ndarray] = field(default_factory=list)  # (m, n, F)
    states: List[np.ndarray] = field(default_factory=list)
    actions: List[Optional[np.ndarray]] = field(default_factory=list)  # (m, n) レベル番号
    rewards: List[np.ndarray] = field(default_factory=list)  # (m,)
    final_observation: Optional[np.ndarray] = None
    final_state: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class EpisodeResult:
    policy: str
    seed: int
    flows: List[FlowRecord]
    steps: List[StepRecord]
    trajectory: Optional[Trajectory]
    saturated: bool
    arrivals: int
    completions: int
    events: int
    probe_updates: int
    end_time: float
    group_labels: List[str] = field(default_factory=list)
    speeds: List[float] = field(default_factory=list)

    @property
    def step_rewards(self) -> List[float]:
        return [s.reward for s in self.steps]

    def mean_reward(self) -> float:
        rewards = [r for r in self.step_rewards if not math.isnan(r)]
        return float(np.mean(rewards)) if rewards else math.nan


@dataclass
class EnvSnapshot:
    """制御ステップ時点でエージェントに渡す情報"""

    observations: Optional[List[np.ndarray]]
    global_state: Optional[np.ndarray]
    lbs: Sequence[LbState]
    binding: PolicyBinding


@dataclass
class JointAction:
    weights: List[np.ndarray]
    indices: Optional[np.ndarray] = None  # (m, n)


def global_state_dim(n: int) -> int:
    return 3 * n + 1


def control_step_hook(clock: SimClock, snapshot: EnvSnapshot) -> JointAction:
    """
    制御ステップで全LBの重みを決める

    ヒューリスティックは現在の（静的な）重みをそのまま返す。
    学習エージェントは離散レベル番号を返し、それを重みに変換する。

    Raises:
        ContractViolation: 長さや値が不正な重みを返した場合
    """
    binding = snapshot.binding
    n = snapshot.lbs[0].n
    if binding.controller is None:
        weights = [lb.weights.copy() for lb in snapshot.lbs]
        indices = None
    else:
        raw = binding.controller.act(snapshot.observations, snapshot.global_state, clock)
        if len(raw) != len(snapshot.lbs):
            raise ContractViolation(f'行動の数 {len(raw)} がLB台数 {len(snapshot.lbs)} と一致しません')
        indices = np.asarray([np.asarray(a, dtype=np.int64) for a in raw])
        if indices.shape != (len(snapshot.lbs), n):
            raise ContractViolation(f'行動の形状が不正です: {indices.shape}')
        weights = [levels_to_weights(a) for a in indices]
    for w in weights:
        if w.shape != (n,) or not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ContractViolation(f'不正な重みベクトルです: {np.asarray(w).tolist()}')
    return JointAction(weights, indices)


class Simulation:
    """
    1エピソードの実行状態

    Args:
        scenario: 検証済みのシナリオ
        binding: 振り分けポリシー
        seed: 乱数シード
        trace: 到着トレース（省略時はシナリオから生成または読み込み）
        record: 学習用の軌跡を記録するか
    """

    def __init__(self, scenario: ScenarioConfig, binding: PolicyBinding, seed: int,
                 trace: Optional[Trace] = None, record: bool = False):
        scenario.validate()
        self.cfg = scenario
        self.binding = binding
        self.seed = seed
        self.record = record or scenario.record_trajectory
        self.streams = RngStreams(seed)
        n = scenario.n_servers
        m = scenario.lb_count
        speeds = scenario.speeds()

        self.servers: List[ServerState] = build_servers(
            speeds, scenario.workers(), scenario.discipline, scenario.overload_cap,
            scenario.service_jitter, self.streams.get('service'),
        )
        kind = binding.kind
        if kind is PolicyKind.WEIGHTED_SED and binding.controller is None:
            raise ContractViolation(f'ポリシー {binding.policy} には学習済みコントローラが必要です')
        if kind in (PolicyKind.WCMP, PolicyKind.SED):
            initial = static_weights(speeds, binding.static_weights or scenario.static_weights)
        elif kind is PolicyKind.AWCMP:
            initial = list(speeds)
        else:
            initial = None
        self.lbs = [
            LbState(i, n, initial, scenario.reservoir_size, scenario.reservoir_p)
            for i in range(m)
        ]
        self.kind = kind
        self.trace = trace if trace is not None else self._make_trace()

        self.queue = EventQueue()
        self.clock = SimClock(step_interval=scenario.step_interval)
        self.delay = (sync_delay_model(m, scenario.sync.base_delay, scenario.sync.per_agent_delay)
                      if binding.policy in DELAYED_POLICIES else 0.0)
        self.n_steps = int(math.ceil(scenario.episode_length / scenario.step_interval - 1e-9))

        self._flows: Dict[int, Flow] = {}
        self._records: List[FlowRecord] = []
        self._steps: List[StepRecord] = []
        self._trajectory = Trajectory() if self.record else None
        self._next_arrival = 0
        self._arrivals = 0
        self._arrivals_in_step = 0
        self._prev_rate = 0.0
        self._saturated = False
        self._probe_updates = 0
        self._probe_t0 = 0.0
        self._probe_area0 = [0.0] * n
        self._step_area0 = [0.0] * n
        self._reward_state = RewardState(gamma=scenario.discount)
        self._gt_state = RewardState(gamma=scenario.discount)
        self._local_states = [RewardState(gamma=scenario.discount) for _ in range(m)]

    def _make_trace(self) -> Trace:
        cfg = self.cfg
        if cfg.traffic.kind == 'trace':
            return truncate_trace(load_trace(cfg.traffic.trace_path), cfg.episode_length)
        model = TrafficModel.from_scenario(cfg)
        return generate_trace(model, self.streams.get('arrivals'), self.streams.get('workloads'))

    # --- イベント処理 ---

    def _schedule_next_arrival(self) -> None:
        if self._saturated or self._next_arrival >= len(self.trace):
            return
        t = float(self.trace.arrival_times[self._next_arrival])
        if t >= self.cfg.episode_length:
            return
        self.queue.schedule(Event(t, EventKind.FLOW_ARRIVAL, flow_id=self._next_arrival))
        self._next_arrival += 1

    def _on_arrival(self, ev: Event) -> None:
        now = ev.time
        fid = ev.flow_id
        flow = Flow(fid, now, float(self.trace.workloads[fid]), self.trace.classes[fid])
        lb_id = dispatch_to_lb(flow, len(self.lbs), self.streams.get('dispatch'))
        lb = self.lbs[lb_id]
        server_id = choose_server(lb, self.kind, self.streams.get('policy'))
        flow.lb_id = lb_id
        on_flow_assign(lb, flow, server_id, now)
        server = self.servers[server_id]
        for c in admit_flow(server, flow, now):
            self.queue.schedule(c.to_event())
        self._flows[fid] = flow
        self._arrivals += 1
        self._arrivals_in_step += 1
        if server.saturated and not self._saturated:
            self._saturated = True
            logger.warning('エピソードが飽和しました（t=%.3f, サーバー %d）。以降の到着は受け付けません', now, server_id)
        self._schedule_next_arrival()

    def _on_completion(self, ev: Event) -> None:
        server = self.servers[ev.server_id]
        if not server.is_current(ev):
            return
        finished, _ = complete_flow(server, ev.flow_id, ev.time)
        for c in server.take_due():
            self.queue.schedule(c.to_event())
        lb = self.lbs[finished.lb_id]
        on_flow_end(lb, finished.flow_id, ev.time, self.streams.get(f'reservoir-{lb.lb_id}'))
        del self._flows[finished.flow_id]
        self._records.append(FlowRecord(
            finished.flow_id, finished.cls, finished.lb_id, finished.server_id,
            finished.t_arrival, finished.t_start, finished.t_complete,
            finished.workload, finished.service_work,
        ))

    def _on_probe(self, ev: Event) -> None:
        now = ev.time
        util = [s.busy_fraction_since(self._probe_t0, a0, now) for s, a0 in zip(self.servers, self._probe_area0)]
        weights = awcmp_probe_update(util, [s.speed for s in self.servers])
        for lb in self.lbs:
            apply_action(lb, weights)
        self._probe_updates += 1
        self._probe_t0 = now
        self._probe_area0 = [s.busy_area for s in self.servers]
        nxt = now + self.cfg.probe_period
        if nxt <= self.cfg.episode_length + 1e-9:
            self.queue.schedule(Event(nxt, EventKind.PROBE_TICK))

    def _on_action_apply(self, ev: Event) -> None:
        apply_action(self.lbs[ev.lb_id], ev.data, discrete=True)

    def global_state(self, now: float) -> np.ndarray:
        rows = [[s.speed, s.in_system, busy_workers(s)] for s in self.servers]
        return np.asarray([x for row in rows for x in row] + [self._prev_rate], dtype=float)

    def _reconcile(self) -> None:
        for j, server in enumerate(self.servers):
            seen = sum(int(lb.q[j]) for lb in self.lbs)
            if seen != server.in_system:
                raise ContractViolation(
                    f'サーバー {j} のフロー数がLBの計数と一致しません（LB合計 {seen}, 実際 {server.in_system}）'
                )

    def _close_step(self, now: float) -> None:
        """直前の制御ステップの報酬を確定する"""
        step = self._steps[-1]
        gamma = self.cfg.discount
        n = len(self.servers)
        tau = [pooled_duration_stats([lb.reservoirs[j] for lb in self.lbs], now, gamma).discounted_mean
               for j in range(n)]
        gt = [expected_finish_load(s, (step.time, now)) for s in self.servers]
        step.tau = tau
        step.ground_truth_load = gt
        step.fairness = step_reward(self._reward_state, tau)
        step.fairness_ground_truth = step_reward(self._gt_state, gt)
        step.local_rewards = [
            step_reward(state, [duration_stats(buf, now, gamma).discounted_mean for buf in lb.reservoirs])
            for state, lb in zip(self._local_states, self.lbs)
        ]
        span = now - step.time
        step.busy_avg = [
            (s.busy_area - a0) / span if span > 0 else float(busy_workers(s))
            for s, a0 in zip(self.servers, self._step_area0)
        ]
        scope = self.cfg.reward_scope
        if scope == 'ground_truth':
            step.reward = step.fairness_ground_truth
            per_agent = np.full(len(self.lbs), step.reward)
        elif scope == 'local':
            step.reward = float(np.mean(step.local_rewards))
            per_agent = np.asarray(step.local_rewards)
        else:
            step.reward = step.fairness
            per_agent = np.full(len(self.lbs), step.reward)
        if self._trajectory is not None:
            self._trajectory.rewards.append(per_agent)

    def _observations(self, now: float) -> List[np.ndarray]:
        return [observe(lb, now, self.cfg.discount) for lb in self.lbs]

    def _on_control_step(self, ev: Event) -> None:
        now = ev.time
        for s in self.servers:
            s._advance(now)
        self._reconcile()
        if self._steps:
            self._close_step(now)
        self._prev_rate = self._arrivals_in_step / self.cfg.step_interval if self._steps else 0.0
        self._arrivals_in_step = 0
        self._step_area0 = [s.busy_area for s in self.servers]

        if ev.data == 'final':
            if self._trajectory is not None:
                self._trajectory.final_observation = np.stack(self._observations(now))
                self._trajectory.final_state = self.global_state(now)
            return

        index = ev.version
        self.clock.now = now
        self.clock.step_index = index
        need_obs = self.binding.controller is not None or self._trajectory is not None
        obs = self._observations(now) if need_obs else None
        state = self.global_state(now) if need_obs else None
        joint = control_step_hook(self.clock, EnvSnapshot(obs, state, self.lbs, self.binding))

        for lb, w in zip(self.lbs, joint.weights):
            lb.last_action = w.copy()
        if joint.indices is not None:
            if self.delay > 0:
                for i, w in enumerate(joint.weights):
                    self.queue.schedule(Event(now + self.delay, EventKind.ACTION_APPLY, lb_id=i, data=w))
            else:
                for lb, w in zip(self.lbs, joint.weights):
                    apply_action(lb, w, discrete=True)

        self._steps.append(StepRecord(
            index=index, time=now,
            in_flight=[s.in_system for s in self.servers],
            busy=[busy_workers(s) for s in self.servers],
            weights=[w.tolist() for w in joint.weights],
        ))
        if self._trajectory is not None:
            self._trajectory.observations.append(np.stack(obs))
            self._trajectory.states.append(state)
            self._trajectory.actions.append(joint.indices)

        nxt = index + 1
        if nxt < self.n_steps:
            self.queue.schedule(Event(self.clock.step_time(nxt), EventKind.CONTROL_STEP, version=nxt))
        else:
            self.queue.schedule(Event(self.cfg.episode_length, EventKind.CONTROL_STEP, version=nxt, data='final'))

    def run(self) -> EpisodeResult:
        controller = self.binding.controller
        if controller is not None:
            controller.begin_episode(self.streams, len(self.lbs))
        self._schedule_next_arrival()
        if self.n_steps > 0:
            self.queue.schedule(Event(0.0, EventKind.CONTROL_STEP, version=0))
        if self.kind is PolicyKind.AWCMP and self.cfg.probe_period <= self.cfg.episode_length:
            self.queue.schedule(Event(self.cfg.probe_period, EventKind.PROBE_TICK))

        handlers = {
            EventKind.FLOW_ARRIVAL: self._on_arrival,
            EventKind.FLOW_COMPLETION: self._on_completion,
            EventKind.CONTROL_STEP: self._on_control_step,
            EventKind.PROBE_TICK: self._on_probe,
            EventKind.ACTION_APPLY: self._on_action_apply,
        }
        end_time = 0.0
        while True:
            if not self.queue:
                # 到着と制御ステップが終わり、処理中のフローがすべて完了した
                self.queue.schedule(Event(max(self.queue.now, self.cfg.episode_length), EventKind.EPISODE_END))
            ev = self.queue.pop()
            if ev.kind is EventKind.EPISODE_END:
                end_time = ev.time
                break
            handlers[ev.kind](ev)

        if self._flows:
            raise ContractViolation(f'エピソード終了時に未完了のフローが {len(self._flows)} 本残っています')
        logger.debug('エピソード終了: policy=%s seed=%d arrivals=%d events=%d',
                     self.binding.policy, self.seed, self._arrivals, self.queue.processed)
        return EpisodeResult(
            policy=self.binding.policy,
            seed=self.seed,
            flows=self._records,
            steps=self._steps,
            trajectory=self._trajectory,
            saturated=self._saturated,
            arrivals=self._arrivals,
            completions=len(self._records),
            events=self.queue.processed,
            probe_updates=self._probe_updates,
            end_time=end_time,
            group_labels=self.cfg.group_labels(),
            speeds=self.cfg.speeds(),
        )


def run_episode(scenario: ScenarioConfig, policy_set: PolicyBinding, seed: int,
                trace: Optional[Trace] = None, record: bool = False) -> EpisodeResult:
    """
    1エピソードを実行する

    Args:
        scenario: シナリオ設定
        policy_set: 振り分けポリシー（学習エージェントを含む）
        seed: 乱数シード。同じ (scenario, policy, seed) なら結果は完全に一致する
        trace: 外部から与える到着トレース
        record: 学習用の観測・行動・報酬を記録するか

    Returns:
        フローごとの記録、ステップごとの報酬などを含む結果
    """
    return Simulation(scenario, policy_set, seed, trace, record).run()
