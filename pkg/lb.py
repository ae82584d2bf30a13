"""
ロードバランサー（LB）エージェントの状態と、フロー単位のサーバー選択ルール

各LBは自分が振り分けたフローだけを数え（部分観測）、完了したフローの
所要時間をサーバーごとのリザーバーに標本として溜める。
"""
import logging
import math
import time
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from scenario_config import AGENT_KINDS
from sim_core import ContractViolation

logger = logging.getLogger(__name__)

ACTION_LEVELS = (1.0, 1.2, 1.4, 1.6, 1.8, 2.0)
N_LEVELS = len(ACTION_LEVELS)
AWCMP_FLOOR = 0.01
OBSERVATION_FEATURES = ('q', 'mean', 'std', 'p90', 'discounted_mean', 'discounted_p90', 'last_action')
N_FEATURES = len(OBSERVATION_FEATURES)


class PolicyKind(Enum):
    ECMP = 'ecmp'
    WCMP = 'wcmp'
    AWCMP = 'awcmp'
    LSQ = 'lsq'
    SED = 'sed'
    WEIGHTED_SED = 'rl'

    @classmethod
    def from_name(cls, name: str) -> 'PolicyKind':
        """
        ポリシー名（ヒューリスティック名またはエージェント種別）から決定ルールを得る

        Raises:
            ContractViolation: 不明なポリシー名の場合
        """
        name = name.lower()
        for kind in cls:
            if kind.value == name:
                return kind
        # 学習エージェントはすべて重み付きSEDで振り分ける
        if name in AGENT_KINDS:
            return cls.WEIGHTED_SED
        raise ContractViolation(f"不明なポリシー '{name}' です")


class ReservoirBuffer:
    """
    固定長 K のリザーバー

    スロットは (時刻, 所要時間) の組で、確率 p で採用された標本が
    一様に選んだスロットを上書きする。未使用スロットは live=False。
    """

    def __init__(self, capacity: int = 10000, p: float = 0.05):
        if capacity < 1:
            raise ContractViolation('リザーバーの容量は1以上にしてください')
        if not 0.0 < p <= 1.0:
            raise ContractViolation('採用確率 p は (0, 1] にしてください')
        self.capacity = capacity
        self.p = p
        self.ts = np.zeros(capacity)
        self.values = np.zeros(capacity)
        self.live = np.zeros(capacity, dtype=bool)
        self.offered = 0
        self.accepted = 0

    def __len__(self) -> int:
        return self.capacity

    def samples(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.ts[self.live], self.values[self.live]


def reservoir_insert(buf: ReservoirBuffer, t: float, value: float, rng: np.random.Generator) -> None:
    """確率 p で一様に選んだスロットを (t, value) で上書きする"""
    buf.offered += 1
    if rng.random() < buf.p:
        idx = int(rng.integers(buf.capacity))
        buf.ts[idx] = t
        buf.values[idx] = value
        buf.live[idx] = True
        buf.accepted += 1


@dataclass(frozen=True)
class DurationStats:
    mean: float = 0.0
    std: float = 0.0
    p90: float = 0.0
    discounted_mean: float = 0.0
    discounted_p90: float = 0.0

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (self.mean, self.std, self.p90, self.discounted_mean, self.discounted_p90)


def _stats(ts: np.ndarray, values: np.ndarray, now: float, gamma: float) -> DurationStats:
    count = len(values)
    if count == 0:
        return DurationStats()
    # fsum で合計の並び順依存をなくす
    mean = math.fsum(values) / count
    std = math.sqrt(math.fsum((values - mean) ** 2) / count)
    ages = np.maximum(now - ts, 0.0)
    discounted = np.power(gamma, ages) * values
    return DurationStats(
        mean=mean,
        std=std,
        p90=float(np.percentile(values, 90)),
        discounted_mean=math.fsum(discounted) / count,
        discounted_p90=float(np.percentile(discounted, 90)),
    )


def duration_stats(buf: ReservoirBuffer, now: float, gamma: float = 0.9) -> DurationStats:
    """
    リザーバー内の所要時間の統計

    Args:
        buf: リザーバー
        now: 現在時刻
        gamma: 経過時間に対する割引率

    Returns:
        平均・標準偏差（母集団）・90パーセンタイル（線形補間）と、
        γ^(now−t_k) で割り引いた平均・90パーセンタイル。標本がなければすべて0。
    """
    ts, values = buf.samples()
    return _stats(ts, values, now, gamma)


def pooled_duration_stats(buffers: Sequence[ReservoirBuffer], now: float, gamma: float = 0.9) -> DurationStats:
    """複数LBの同一サーバー向けリザーバーを合わせた統計"""
    parts = [b.samples() for b in buffers]
    ts = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0)
    values = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
    return _stats(ts, values, now, gamma)


def reservoir_expected_retained(rate: float, p: float, capacity: int, age: float) -> float:
    """
    到着率 rate のポアソン流で、経過時間 age の標本が残っている期待量（文献の閉形式）

    λp((K−p)/K)^(λT) をそのまま計算する。指数の底が上書き1回あたりの
    生存率と一致しないため、検証には reservoir_survival_density を使う。
    """
    return rate * p * ((capacity - p) / capacity) ** (rate * age)


def reservoir_survival_density(rate: float, p: float, capacity: int, age: float) -> float:
    """採用率 λp、1回の上書きで特定スロットが残る確率 1−1/K から求めた年齢 age の標本密度"""
    return rate * p * (1.0 - 1.0 / capacity) ** (rate * p * age)


def reservoir_age_histogram(buf: ReservoirBuffer, now: float, bins: int = 20,
                            max_age: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """リザーバー内標本の経過時間ヒストグラム (edges, counts)"""
    ts, _ = buf.samples()
    ages = now - ts
    top = max_age if max_age is not None else (float(ages.max()) if len(ages) else 1.0)
    counts, edges = np.histogram(ages, bins=bins, range=(0.0, max(top, 1e-12)))
    return edges, counts


class LbState:
    """
    1台のLBエージェントの状態

    Args:
        lb_id: LB番号
        n: サーバー台数
        weights: 初期重み（省略時は全て1）
        reservoir_size: リザーバー容量 K
        reservoir_p: 標本の採用確率 p
    """

    def __init__(self, lb_id: int, n: int, weights: Optional[Sequence[float]] = None,
                 reservoir_size: int = 10000, reservoir_p: float = 0.05):
        if n < 1:
            raise ContractViolation('サーバー台数は1以上にしてください')
        self.lb_id = lb_id
        self.n = n
        self.q = np.zeros(n, dtype=np.int64)
        self.reservoirs = [ReservoirBuffer(reservoir_size, reservoir_p) for _ in range(n)]
        self.flow_table: Dict[int, Tuple[int, float]] = {}
        self.weights = np.ones(n)
        self._cum = np.cumsum(self.weights)
        if weights is not None:
            self.set_weights(weights)
        self.last_action = self.weights.copy()

    def set_weights(self, weights: Sequence[float]) -> None:
        w = _checked_weights(weights, self.n)
        self.weights = w
        self._cum = np.cumsum(w)


def _checked_weights(weights: Sequence[float], n: int, discrete: bool = False) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ContractViolation(f'重みベクトルの長さが不正です（{w.shape} に対してサーバー {n} 台）')
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ContractViolation(f'重みは正の有限値にしてください: {w.tolist()}')
    if discrete:
        levels = np.asarray(ACTION_LEVELS)
        off = np.min(np.abs(w[:, None] - levels[None, :]), axis=1) > 1e-9
        if np.any(off):
            raise ContractViolation(f'重み {w[off].tolist()} は離散レベル {ACTION_LEVELS} に含まれません')
    return w.copy()


def on_flow_assign(lb: LbState, flow, server_id: int, now: float) -> None:
    """振り分けたフローを記録する"""
    if not 0 <= server_id < lb.n:
        raise ContractViolation(f'サーバー番号 {server_id} が範囲外です')
    if flow.flow_id in lb.flow_table:
        raise ContractViolation(f'LB {lb.lb_id}: フロー {flow.flow_id} が重複しています')
    lb.q[server_id] += 1
    lb.flow_table[flow.flow_id] = (server_id, flow.t_arrival)


def on_flow_end(lb: LbState, flow_id: int, now: float, rng: np.random.Generator) -> None:
    """フロー完了を記録し、所要時間をリザーバーに標本として渡す"""
    entry = lb.flow_table.pop(flow_id, None)
    if entry is None:
        raise ContractViolation(f'LB {lb.lb_id}: 未知のフロー {flow_id} の完了通知です')
    server_id, t_arrival = entry
    lb.q[server_id] -= 1
    reservoir_insert(lb.reservoirs[server_id], now, now - t_arrival, rng)


def choose_server(lb: LbState, policy: PolicyKind, rng: np.random.Generator) -> int:
    """
    新規フローの振り分け先サーバーを選ぶ

    同点は番号の小さいサーバーを選ぶ（np.argmin は最初の最小値を返す）。
    """
    if policy is PolicyKind.ECMP:
        return int(rng.integers(lb.n))
    if policy in (PolicyKind.WCMP, PolicyKind.AWCMP):
        u = rng.random() * lb._cum[-1]
        return min(int(np.searchsorted(lb._cum, u, side='right')), lb.n - 1)
    if policy is PolicyKind.LSQ:
        return int(np.argmin(lb.q))
    return int(np.argmin((lb.q + 1) / lb.weights))


def awcmp_probe_update(true_utilizations: Sequence[float], capacities: Sequence[float],
                       floor: float = AWCMP_FLOOR) -> np.ndarray:
    """
    プローブした稼働率から AWCMP の重みを計算する

    Args:
        true_utilizations: サーバーごとの稼働率（0〜1）
        capacities: サーバーごとの処理能力
        floor: 空き率の下限 ε

    Returns:
        max(ε, 1−u_j)·capacity_j を平均1に正規化した重み
    """
    u = np.clip(np.asarray(true_utilizations, dtype=float), 0.0, 1.0)
    w = np.maximum(floor, 1.0 - u) * np.asarray(capacities, dtype=float)
    return w / w.mean()


def apply_action(lb: LbState, action: Sequence[float], discrete: bool = False) -> None:
    """
    重みベクトルを差し替える

    Args:
        lb: 対象LB
        action: 新しい重み（長さ n、正の値）
        discrete: True なら各要素が ACTION_LEVELS のいずれかであることも検査する

    Raises:
        ContractViolation: 長さ・値が不正な場合
    """
    w = _checked_weights(action, lb.n, discrete)
    lb.weights = w
    lb._cum = np.cumsum(w)


def observe(lb: LbState, now: float, gamma: float = 0.9) -> np.ndarray:
    """
    LBの局所観測を (n, 7) の配列で返す

    列は OBSERVATION_FEATURES の順。
    """
    obs = np.zeros((lb.n, N_FEATURES))
    obs[:, 0] = lb.q
    for j, buf in enumerate(lb.reservoirs):
        obs[j, 1:6] = duration_stats(buf, now, gamma).as_tuple()
    obs[:, 6] = lb.last_action
    return obs


def levels_to_weights(indices: Sequence[int]) -> np.ndarray:
    """離散レベルの番号列を重みベクトルに変換"""
    idx = np.asarray(indices, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= N_LEVELS):
        raise ContractViolation(f'行動レベル番号が範囲外です: {idx.tolist()}')
    return np.asarray(ACTION_LEVELS)[idx]


def static_weights(speeds: Sequence[float], override: Optional[Sequence[float]] = None) -> List[float]:
    """WCMP/SED の静的重み（指定がなければ処理能力に比例）"""
    if override:
        return list(override)
    return list(speeds)


@dataclass(frozen=True)
class DecisionBenchmark:
    policy: str
    n: int
    calls: int
    seconds: float

    @property
    def ns_per_decision(self) -> float:
        return self.seconds / self.calls * 1e9

    @property
    def decisions_per_second(self) -> float:
        return self.calls / self.seconds if self.seconds > 0 else math.inf


def bench_choose_server(policy: PolicyKind, n: int = 24, calls: int = 1_000_000, seed: int = 0,
                        refresh_every: int = 4096) -> DecisionBenchmark:
    """
    choose_server を calls 回呼び出して1回あたりの所要時間を測る

    フロー数は refresh_every 回ごとに乱数で入れ替え、選ばれたサーバーの計数を1増やす。
    重み付きSEDの重みは離散レベルからランダムに選ぶ。
    """
    if n < 1 or calls < 1:
        raise ContractViolation('サーバー台数と呼び出し回数は1以上にしてください')
    rng = np.random.default_rng(seed)
    lb = LbState(0, n)
    if policy in (PolicyKind.WCMP, PolicyKind.AWCMP, PolicyKind.SED):
        lb.set_weights(rng.uniform(0.5, 2.0, n))
    elif policy is PolicyKind.WEIGHTED_SED:
        apply_action(lb, levels_to_weights(rng.integers(N_LEVELS, size=n)), discrete=True)
    start = time.perf_counter()
    for i in range(calls):
        if i % refresh_every == 0:
            lb.q = rng.integers(0, 32, n)
        lb.q[choose_server(lb, policy, rng)] += 1
    elapsed = time.perf_counter() - start
    return DecisionBenchmark(policy.value, n, calls, elapsed)
