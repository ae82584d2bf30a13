"""
フロー到着過程の生成・トレースファイルの読み書き・LBへの振り分け
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from scenario_config import ConfigError, ScenarioConfig

logger = logging.getLogger(__name__)

HEAVY = 'H'
LIGHT = 'L'
TRACE_HEADER = ['arrival_time', 'workload', 'class']


class TraceError(ConfigError):
    """トレースの解析・検証エラー"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f'{line}行目: {message}'
        super().__init__(message)


@dataclass
class Trace:
    """到着時刻順のフロー列"""

    arrival_times: np.ndarray
    workloads: np.ndarray
    classes: List[str]
    duration: float
    nominal_rate: float = 0.0

    def __len__(self) -> int:
        return len(self.arrival_times)

    def validate(self) -> 'Trace':
        if len(self.arrival_times) != len(self.workloads) or len(self.workloads) != len(self.classes):
            raise TraceError('トレースの列の長さが一致しません')
        if len(self.arrival_times) and np.any(np.diff(self.arrival_times) < 0):
            raise TraceError('到着時刻が昇順になっていません')
        if np.any(self.workloads <= 0):
            raise TraceError('ワークロードは正の値にしてください')
        return self


@dataclass
class TrafficModel:
    """到着率とワークロード分布"""

    rate: float
    duration: float
    kind: str = 'poisson'  # poisson（指数ワークロード）または two_class
    mean_workload: float = 0.2
    p_heavy: float = 0.5
    mean_heavy: float = 0.4
    mean_light: float = 0.02

    def validate(self) -> 'TrafficModel':
        if not self.rate > 0:
            raise ConfigError('到着率 λ は正の値にしてください')
        if self.duration < 0:
            raise ConfigError('duration は0以上にしてください')
        if min(self.mean_workload, self.mean_heavy, self.mean_light) <= 0:
            raise ConfigError('平均ワークロードは正の値にしてください')
        if not 0.0 <= self.p_heavy <= 1.0:
            raise ConfigError('p_heavy は0以上1以下にしてください')
        return self

    @classmethod
    def from_scenario(cls, cfg: ScenarioConfig, rate: Optional[float] = None) -> 'TrafficModel':
        t = cfg.traffic
        return cls(
            rate=rate if rate is not None else cfg.arrival_rate(),
            duration=cfg.episode_length,
            kind=t.kind,
            mean_workload=t.mean_workload,
            p_heavy=t.p_heavy,
            mean_heavy=t.mean_heavy,
            mean_light=t.mean_light,
        )


def generate_trace(model: TrafficModel, rng: np.random.Generator,
                   workload_rng: Optional[np.random.Generator] = None) -> Trace:
    """
    ポアソン到着のトレースを生成する

    Args:
        model: トラフィックモデル
        rng: 到着間隔用の乱数ストリーム
        workload_rng: ワークロード用の乱数ストリーム（省略時は rng を共用）

    Returns:
        duration で打ち切ったトレース
    """
    model.validate()
    wrng = workload_rng if workload_rng is not None else rng
    expected = model.rate * model.duration
    # 到着数の上振れに備えて多めに間隔を引き、足りなければ追加する
    chunk = int(expected + 6.0 * math.sqrt(expected) + 16)
    times: List[np.ndarray] = []
    t0 = 0.0
    while model.duration > 0:
        gaps = rng.exponential(1.0 / model.rate, size=chunk)
        arrivals = t0 + np.cumsum(gaps)
        inside = arrivals[arrivals < model.duration]
        times.append(inside)
        if len(inside) < chunk:
            break
        t0 = float(arrivals[-1])
    arrival_times = np.concatenate(times) if times else np.zeros(0)
    count = len(arrival_times)

    if model.kind == 'two_class':
        heavy = wrng.random(count) < model.p_heavy
        means = np.where(heavy, model.mean_heavy, model.mean_light)
        workloads = wrng.exponential(1.0, size=count) * means
        classes = [HEAVY if h else LIGHT for h in heavy]
    else:
        workloads = wrng.exponential(model.mean_workload, size=count)
        classes = [LIGHT] * count
    # 指数分布から0が出た場合の下限
    workloads = np.maximum(workloads, 1e-12)

    return Trace(arrival_times, workloads, classes, model.duration, model.rate)


def load_trace(path: Union[str, Path], duration: Optional[float] = None) -> Trace:
    """
    CSVトレースを読み込む

    並べ替えはせず、順序が崩れていればエラーにする。

    Args:
        path: ヘッダー 'arrival_time,workload,class' を持つCSV
        duration: トレースの長さ（省略時は最後の到着時刻）

    Returns:
        検証済みのトレース

    Raises:
        TraceError: 解析エラー・不正値・時刻順の崩れ（行番号付き）
    """
    path = Path(path)
    if not path.exists():
        raise TraceError(f'トレースファイルが見つかりません: {path}')
    times: List[float] = []
    workloads: List[float] = []
    classes: List[str] = []
    with open(path, newline='', encoding='utf-8') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise TraceError('空のトレースファイルです', line=1)
        if [h.strip() for h in header] != TRACE_HEADER:
            raise TraceError(f"ヘッダーは '{','.join(TRACE_HEADER)}' にしてください", line=1)
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise TraceError('列数が3ではありません', line=line_no)
            try:
                t = float(row[0])
                w = float(row[1])
            except ValueError:
                raise TraceError('数値を解析できません', line=line_no)
            c = row[2].strip()
            if c not in (HEAVY, LIGHT):
                raise TraceError(f"class は {HEAVY} または {LIGHT} にしてください", line=line_no)
            if not math.isfinite(t) or t < 0:
                raise TraceError('到着時刻は0以上の有限値にしてください', line=line_no)
            if not math.isfinite(w) or w <= 0:
                raise TraceError('ワークロードは正の値にしてください', line=line_no)
            if times and t < times[-1]:
                raise TraceError('到着時刻が前の行より前になっています', line=line_no)
            times.append(t)
            workloads.append(w)
            classes.append(c)

    span = duration if duration is not None else (times[-1] if times else 0.0)
    rate = len(times) / span if span > 0 else 0.0
    trace = Trace(np.array(times, dtype=float), np.array(workloads, dtype=float), classes, span, rate)
    logger.info('トレースを読み込みました: %s（%d フロー）', path, len(trace))
    return trace


def save_trace(trace: Trace, path: Union[str, Path]) -> None:
    """トレースをCSVとして書き出す"""
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_HEADER)
        for t, w, c in zip(trace.arrival_times, trace.workloads, trace.classes):
            writer.writerow([repr(float(t)), repr(float(w)), c])


def truncate_trace(trace: Trace, duration: float) -> Trace:
    keep = trace.arrival_times < duration
    classes = [c for c, k in zip(trace.classes, keep) if k]
    return Trace(trace.arrival_times[keep], trace.workloads[keep], classes, duration, trace.nominal_rate)


def dispatch_to_lb(flow, m: int, rng: np.random.Generator) -> int:
    """
    エッジルーターとしてフローをLBへ一様に振り分ける

    Args:
        flow: 振り分けるフロー（法則は一様なので内容は参照しない）
        m: LB台数
        rng: 振り分け用の乱数ストリーム

    Returns:
        LB番号（0始まり）
    """
    if m < 1:
        raise ConfigError('LB台数は1以上にしてください')
    if m == 1:
        return 0
    return int(rng.integers(m))


def split_by_lb(trace: Trace, lb_ids: Sequence[int], m: int) -> List[Trace]:
    """振り分け結果に従ってLBごとのサブトレースに分割"""
    lb_ids = np.asarray(lb_ids)
    parts = []
    for i in range(m):
        mask = lb_ids == i
        parts.append(Trace(
            trace.arrival_times[mask],
            trace.workloads[mask],
            [c for c, k in zip(trace.classes, mask) if k],
            trace.duration,
            trace.nominal_rate / m,
        ))
    return parts
