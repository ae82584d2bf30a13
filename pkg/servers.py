"""
アプリケーションサーバーのモデル

処理能力 v_j（ワークロード単位/秒）とワーカースロット数 W_j を持つ。
FIFO（fifo）では各スロットが v_j / W_j で処理し、空きがなければ待ち行列に並ぶ。
プロセッサシェアリング（ps）では処理中の全フローで v_j を均等に分け合う。
"""
import bisect
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, Iterable, List, Optional, Tuple

import numpy as np

from sim_core import ContractViolation, Event, EventKind, EventQueue

logger = logging.getLogger(__name__)

FIFO = 'fifo'
PROCESSOR_SHARING = 'ps'


@dataclass
class Flow:
    """1本のフロー（リクエスト）"""

    flow_id: int
    t_arrival: float
    workload: float
    cls: str = 'L'
    lb_id: int = -1
    server_id: int = -1
    t_start: Optional[float] = None
    t_complete: Optional[float] = None
    service_work: float = 0.0  # ジッター適用後の実処理量

    @property
    def fct(self) -> float:
        if self.t_complete is None:
            raise ContractViolation(f'フロー {self.flow_id} はまだ完了していません')
        return self.t_complete - self.t_arrival


@dataclass
class Completion:
    """完了予定（FlowCompletion イベントの元）"""

    time: float
    flow_id: int
    server_id: int
    version: int = 0

    def to_event(self) -> Event:
        return Event(self.time, EventKind.FLOW_COMPLETION, flow_id=self.flow_id,
                     server_id=self.server_id, version=self.version)


class ServerState:
    """
    1台のサーバーの状態

    Args:
        server_id: サーバー番号
        speed: 処理能力 v_j（>0）
        workers: ワーカースロット数 W_j（>=1）
        discipline: 'fifo' または 'ps'
        overload_cap: この数を超えてフローを抱えたら飽和とみなす
        jitter: 処理時間の対数正規ノイズの σ（0でノイズなし）
        rng: ジッター用の乱数ストリーム
    """

    def __init__(self, server_id: int, speed: float, workers: int, discipline: str = FIFO,
                 overload_cap: int = 100000, jitter: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        if not speed > 0:
            raise ContractViolation(f'サーバー {server_id}: 処理能力は正の値にしてください')
        if workers < 1:
            raise ContractViolation(f'サーバー {server_id}: ワーカー数は1以上にしてください')
        if discipline not in (FIFO, PROCESSOR_SHARING):
            raise ContractViolation(f'不明なサービス規律です: {discipline}')
        if jitter > 0 and rng is None:
            raise ContractViolation('ジッターを使う場合は乱数ストリームが必要です')
        self.server_id = server_id
        self.speed = float(speed)
        self.workers = int(workers)
        self.discipline = discipline
        self.overload_cap = overload_cap
        self.jitter = jitter
        self.rng = rng

        self.active: Dict[int, Flow] = {}
        self.remaining: Dict[int, float] = {}  # ps のみ
        self.queue: Deque[Flow] = deque()
        self.version = 0
        self.saturated = False

        self._due: List[Completion] = []
        self._last_t = 0.0
        self.busy_area = 0.0
        self.system_area = 0.0

        self._assign_times: List[float] = []
        self._assign_work: List[float] = []

    @property
    def slot_speed(self) -> float:
        return self.speed / self.workers

    @property
    def in_system(self) -> int:
        return len(self.active) + len(self.queue)

    def _advance(self, now: float) -> None:
        """時間積分とプロセッサシェアリングの残量を now まで進める"""
        dt = now - self._last_t
        if dt > 0:
            self.busy_area += busy_workers(self) * dt
            self.system_area += self.in_system * dt
            if self.discipline == PROCESSOR_SHARING and self.active:
                served = dt * self.speed / len(self.active)
                for fid in self.remaining:
                    self.remaining[fid] -= served
        self._last_t = max(self._last_t, now)

    def _rederive(self, now: float) -> None:
        self.version += 1
        if not self.active:
            return
        rate = self.speed / len(self.active)
        for fid, rem in self.remaining.items():
            self._due.append(Completion(now + max(rem, 0.0) / rate, fid, self.server_id, self.version))

    def _start(self, flow: Flow, now: float) -> None:
        flow.t_start = now
        self.active[flow.flow_id] = flow
        self._due.append(Completion(now + flow.service_work / self.slot_speed, flow.flow_id, self.server_id))

    def take_due(self) -> List[Completion]:
        """新たに確定した完了予定を取り出す"""
        due, self._due = self._due, []
        return due

    def is_current(self, event: Event) -> bool:
        """完了イベントが最新の予定か（ps の古い予定を読み飛ばすため）"""
        if event.flow_id not in self.active:
            return False
        return self.discipline == FIFO or event.version == self.version

    def busy_fraction_since(self, t0: float, area0: float, now: float) -> float:
        """[t0, now) の平均稼働率（稼働スロット数 / W_j）"""
        self._advance(now)
        span = now - t0
        if span <= 0:
            return 0.0
        return min(1.0, max(0.0, (self.busy_area - area0) / (span * self.workers)))

    def assigned_since(self, t0: float) -> int:
        return len(self._assign_times) - bisect.bisect_left(self._assign_times, t0)


def admit_flow(server: ServerState, flow: Flow, now: float) -> List[Completion]:
    """
    フローをサーバーに受け入れる

    Args:
        server: 受け入れ先
        flow: 未割り当てのフロー
        now: 現在時刻

    Returns:
        新たにスケジュールすべき完了予定
    """
    if flow.flow_id in server.active or flow.t_start is not None:
        raise ContractViolation(f'フロー {flow.flow_id} は既に割り当て済みです')
    server._advance(now)
    flow.server_id = server.server_id
    work = flow.service_work
    if work <= 0:
        # 再生時は記録済みの実処理量をそのまま使う
        work = flow.workload
        if server.jitter > 0:
            noise = float(server.rng.standard_normal())
            work *= math.exp(server.jitter * noise - 0.5 * server.jitter ** 2)
        flow.service_work = work
    server._assign_times.append(now)
    server._assign_work.append(flow.workload)

    if server.discipline == FIFO:
        if len(server.active) < server.workers:
            server._start(flow, now)
        else:
            server.queue.append(flow)
    else:
        flow.t_start = now
        server.active[flow.flow_id] = flow
        server.remaining[flow.flow_id] = work
        server._rederive(now)

    if server.in_system > server.overload_cap and not server.saturated:
        server.saturated = True
        logger.warning('サーバー %d が飽和しました（滞留 %d フロー）', server.server_id, server.in_system)
    return server.take_due()


def complete_flow(server: ServerState, flow_id: int, now: float) -> Tuple[Flow, Optional[Flow]]:
    """
    処理中のフローを完了させる

    Returns:
        (完了したフロー, 代わりに処理を開始したフローまたは None)

    Raises:
        ContractViolation: flow_id が処理中でない場合
    """
    if flow_id not in server.active:
        raise ContractViolation(f'サーバー {server.server_id}: 処理中でないフロー {flow_id} の完了イベントです')
    server._advance(now)
    finished = server.active.pop(flow_id)
    finished.t_complete = now
    started = None
    if server.discipline == FIFO:
        if server.queue:
            started = server.queue.popleft()
            server._start(started, now)
    else:
        server.remaining.pop(flow_id)
        server._rederive(now)
    return finished, started


def expected_finish_load(server: ServerState, window: Tuple[float, float]) -> float:
    """
    区間 [t0, tn) に割り当てられたワークロードの処理に要する時間 l_j

    Args:
        server: 対象サーバー
        window: (t0, tn)

    Returns:
        Σw / v_j（秒）
    """
    t0, tn = window
    lo = bisect.bisect_left(server._assign_times, t0)
    hi = bisect.bisect_left(server._assign_times, tn)
    return math.fsum(server._assign_work[lo:hi]) / server.speed


def busy_workers(server: ServerState) -> int:
    """稼働中のワーカー数（ps では W_j が上限）"""
    if server.discipline == FIFO:
        return len(server.active)
    return min(len(server.active), server.workers)


def build_servers(speeds: Iterable[float], workers: Iterable[int], discipline: str = FIFO,
                  overload_cap: int = 100000, jitter: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> List[ServerState]:
    return [
        ServerState(j, v, w, discipline, overload_cap, jitter, rng)
        for j, (v, w) in enumerate(zip(speeds, workers))
    ]


def replay_assignments(flows: Iterable[Flow], speed: float, workers: int,
                       discipline: str = FIFO) -> Dict[int, float]:
    """
    記録済みのフロー（到着時刻・実処理量）を新しいサーバーで再生し、完了時刻を返す

    エピソード結果の検算に使う。
    """
    server = ServerState(0, speed, workers, discipline, overload_cap=math.inf)
    queue = EventQueue()
    for f in sorted(flows, key=lambda f: (f.t_arrival, f.flow_id)):
        replica = Flow(f.flow_id, f.t_arrival, f.workload, f.cls, service_work=f.service_work)
        queue.schedule(Event(f.t_arrival, EventKind.FLOW_ARRIVAL, flow_id=f.flow_id, data=replica))
    done: Dict[int, float] = {}
    while queue:
        ev = queue.pop()
        if ev.kind == EventKind.FLOW_ARRIVAL:
            due = admit_flow(server, ev.data, ev.time)
        else:
            if not server.is_current(ev):
                continue
            finished, _ = complete_flow(server, ev.flow_id, ev.time)
            done[finished.flow_id] = ev.time
            due = server.take_due()
        for d in due:
            queue.schedule(d.to_event())
    return done
