"""
離散イベントシミュレーションの基盤（イベントキュー・仮想時計・乱数ストリーム・例外）
"""
import hashlib
import heapq
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    """シミュレーション実行時エラーの基底クラス（CLIでは終了コード2）"""


class CausalityError(SimulationError):
    """現在時刻より過去へのイベント登録"""


class ContractViolation(SimulationError):
    """状態の不整合や不正な入力（重複フロー・不正な重みベクトルなど）"""


class EventKind(Enum):
    FLOW_ARRIVAL = 'FlowArrival'
    FLOW_COMPLETION = 'FlowCompletion'
    CONTROL_STEP = 'ControlStep'
    ACTION_APPLY = 'ActionApply'
    PROBE_TICK = 'ProbeTick'
    EPISODE_END = 'EpisodeEnd'


@dataclass
class Event:
    """シミュレーション上のイベント"""

    time: float  # 仮想時刻（秒）
    kind: EventKind
    flow_id: int = -1
    server_id: int = -1
    lb_id: int = -1
    version: int = 0  # プロセッサシェアリングの完了予測の世代
    data: Any = None
    seq: int = -1  # スケジュール時に付与される通し番号


class EventQueue:
    """
    時刻順のイベントキュー

    同時刻のイベントはスケジュールされた順（通し番号）で取り出す。
    取り出したイベントの時刻が仮想時計の現在時刻になる。
    """

    def __init__(self, start: float = 0.0):
        self._heap: List[Tuple[float, int, Event]] = []
        self._seq = 0
        self.now = start
        self.processed = 0

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)

    def schedule(self, event: Event) -> Event:
        if event.time < self.now:
            raise CausalityError(
                f'因果律違反: 時刻 {event.time:.6f} のイベントを現在時刻 {self.now:.6f} に登録しようとしました'
            )
        event.seq = self._seq
        self._seq += 1
        heapq.heappush(self._heap, (event.time, event.seq, event))
        return event

    def pop(self) -> Event:
        time, _, event = heapq.heappop(self._heap)
        self.now = time
        self.processed += 1
        return event

    def peek_time(self) -> Optional[float]:
        return self._heap[0][0] if self._heap else None


def schedule(event_queue: EventQueue, event: Event) -> None:
    """
    イベントをキューに登録する

    Args:
        event_queue: 登録先のキュー
        event: 登録するイベント（time は現在時刻以上）

    Raises:
        CausalityError: event.time が現在時刻より前の場合
    """
    event_queue.schedule(event)


@dataclass
class SimClock:
    """制御ステップの仮想時計"""

    now: float = 0.0
    step_index: int = 0
    step_interval: float = 0.25

    def step_time(self, index: int) -> float:
        # 累積加算ではなく積で求め、丸め誤差を溜めない
        return index * self.step_interval


def _stream_key(stream_id: str) -> int:
    digest = hashlib.blake2b(stream_id.encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little')


def make_rng(seed: int, stream_id: str) -> np.random.Generator:
    """
    (seed, stream_id) から独立な乱数生成器を作る

    同じ組み合わせからは常に同じ系列が得られ、stream_id が異なれば
    SeedSequence の spawn_key により独立な系列になる。
    """
    ss = np.random.SeedSequence(entropy=seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(_stream_key(stream_id),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class RngStreams:
    """用途ごとに分離した乱数ストリームの集合"""

    seed: int
    _streams: Dict[str, np.random.Generator] = field(default_factory=dict, repr=False)

    def get(self, stream_id: str) -> np.random.Generator:
        if stream_id not in self._streams:
            self._streams[stream_id] = make_rng(self.seed, stream_id)
        return self._streams[stream_id]
