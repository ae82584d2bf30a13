"""
評価指標の計算（公平性指数・メイクスパン・ステップ報酬・JCT集計・命題の総当たり検証）
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

CDF_POINTS = 200
ORACLE_MAX_SERVERS = 4
ORACLE_MAX_JOBS = 12


def fairness(loads: Sequence[float]) -> float:
    """
    積による公平性指数 F = Π_j (l_j / max l)

    Args:
        loads: サーバーごとの負荷（0以上）

    Returns:
        0〜1の値。全要素が等しければ1、全て0の場合も1とする。

    Raises:
        ValueError: 負の要素を含む場合、空の場合
    """
    l = np.asarray(loads, dtype=float)
    if l.size == 0:
        raise ValueError('負荷ベクトルが空です')
    if np.any(l < 0) or not np.all(np.isfinite(l)):
        raise ValueError(f'負荷は0以上の有限値にしてください: {l.tolist()}')
    top = l.max()
    if top == 0:
        return 1.0
    return float(np.prod(l / top))


def makespan(loads: Sequence[float]) -> float:
    l = np.asarray(loads, dtype=float)
    if l.size == 0:
        raise ValueError('負荷ベクトルが空です')
    return float(l.max())


@dataclass
class RewardState:
    """直前ステップの割引平均所要時間 τ̄ を保持する"""

    tau_prev: Optional[np.ndarray] = None
    gamma: float = 0.9
    step: int = 0


def step_reward(state: RewardState, tau_now: Sequence[float]) -> float:
    """
    ステップ報酬

    最初のステップは F(τ̄_now)、以降は F((1−γ)·τ̄_prev + γ·τ̄_now)。
    state は τ̄_now を記録して1ステップ進む。
    """
    tau = np.asarray(tau_now, dtype=float)
    if state.tau_prev is None or state.step == 0:
        r = fairness(tau)
    else:
        if state.tau_prev.shape != tau.shape:
            raise ValueError(f'τ̄ の長さが一致しません: {state.tau_prev.shape} と {tau.shape}')
        r = fairness((1.0 - state.gamma) * state.tau_prev + state.gamma * tau)
    state.tau_prev = tau.copy()
    state.step += 1
    return r


@dataclass
class JctSummary:
    count: int
    mean: float
    std: float
    p90: float
    p99: float
    cdf: List[Tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, float]:
        return {'count': self.count, 'mean': self.mean, 'std': self.std, 'p90': self.p90, 'p99': self.p99}


def summarize(values: Sequence[float], cdf_points: int = CDF_POINTS) -> JctSummary:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError('完了したフローがありません')
    fractions = np.linspace(0.0, 1.0, cdf_points)
    quantiles = np.quantile(v, fractions)
    return JctSummary(
        count=int(v.size),
        mean=float(v.mean()),
        std=float(v.std()),
        p90=float(np.percentile(v, 90)),
        p99=float(np.percentile(v, 99)),
        cdf=[(float(q), float(f)) for q, f in zip(quantiles, fractions)],
    )


def jct_summary(flows: Iterable, cdf_points: int = CDF_POINTS) -> Dict[str, JctSummary]:
    """
    フロー完了時間の集計

    Args:
        flows: fct と cls を持つフロー記録
        cdf_points: CDF の分位点数

    Returns:
        'all' とクラス別（'H'、'L'）の集計
    """
    by_class: Dict[str, List[float]] = {}
    everything: List[float] = []
    for f in flows:
        by_class.setdefault(f.cls, []).append(f.fct)
        everything.append(f.fct)
    if not everything:
        raise ValueError('完了したフローがありません')
    result = {'all': summarize(everything, cdf_points)}
    for cls in sorted(by_class):
        result[cls] = summarize(by_class[cls], cdf_points)
    return result


@dataclass
class Prop1Verdict:
    """総当たり検証の結果"""

    n: int
    jobs: int
    speeds: Tuple[float, ...]
    sufficient: bool  # F 最大の割り当てはすべてメイクスパン最小
    not_necessary_witness: Optional[Tuple[int, ...]]  # F 最大でないメイクスパン最小の割り当て
    degenerate: bool  # どの割り当てでも F=0（空きサーバーが必ず残る）
    best_fairness: float
    min_makespan: float
    fair_assignments: List[Tuple[int, ...]] = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return self.sufficient


def _compositions(total: int, parts: int):
    for bars in itertools.combinations(range(total + parts - 1), parts - 1):
        prev = -1
        counts = []
        for b in bars:
            counts.append(b - prev - 1)
            prev = b
        counts.append(total + parts - 1 - prev - 1)
        yield tuple(counts)


def prop1_oracle(n: int, jobs: int, speeds: Sequence[float], tol: float = 1e-12) -> Prop1Verdict:
    """
    単位ジョブ jobs 個を n 台へ割り当てる全通りを列挙し、
    公平性最大ならメイクスパン最小になるか（十分性）を確かめる

    jobs < n ではどの割り当てにも空きサーバーが残って F が常に0となり、
    F から割り当てを選べないため degenerate として十分性は自明に成立とする。

    Raises:
        ValueError: 大きすぎる問題（n > 4 または jobs > 12）や長さの不一致
    """
    if n < 1 or jobs < 0:
        raise ValueError('n は1以上、ジョブ数は0以上にしてください')
    if n > ORACLE_MAX_SERVERS or jobs > ORACLE_MAX_JOBS:
        raise ValueError(f'列挙するには大きすぎます（n ≤ {ORACLE_MAX_SERVERS}, J ≤ {ORACLE_MAX_JOBS}）')
    v = np.asarray(speeds, dtype=float)
    if v.shape != (n,) or np.any(v <= 0):
        raise ValueError('speeds は長さ n の正の値にしてください')

    rows = []
    for counts in _compositions(jobs, n):
        loads = np.asarray(counts, dtype=float) / v
        rows.append((counts, fairness(loads), makespan(loads)))

    best_f = max(r[1] for r in rows)
    min_ms = min(r[2] for r in rows)
    degenerate = jobs > 0 and best_f == 0.0
    fair = [r for r in rows if r[1] >= best_f - tol]
    sufficient = degenerate or all(r[2] <= min_ms + tol for r in fair)
    witness = None
    for counts, f, ms in rows:
        if ms <= min_ms + tol and f < best_f - tol:
            witness = counts
            break
    verdict = Prop1Verdict(
        n=n, jobs=jobs, speeds=tuple(float(x) for x in v),
        sufficient=sufficient, not_necessary_witness=witness, degenerate=degenerate,
        best_fairness=best_f, min_makespan=min_ms, fair_assignments=[r[0] for r in fair],
    )
    if not sufficient:
        logger.warning('十分性が成り立たない例: n=%d J=%d speeds=%s', n, jobs, verdict.speeds)
    return verdict


def occupancy_ratio(busy_means: Dict[str, float], fast: str = 'fast', slow: str = 'slow') -> float:
    """グループ別平均稼働ワーカー数の比（fast / slow）"""
    if busy_means.get(slow, 0.0) == 0.0:
        return math.nan
    return busy_means.get(fast, 0.0) / busy_means[slow]
