"""
学習エージェント共通の部品

行動の表現（サーバーごとの離散レベル）、観測履歴、観測の標準化、
リプレイバッファ（SAC用の遷移・QMIX用のエピソード）、同期遅延のモデル、
シミュレーターから呼ばれるコントローラーの基底クラス。
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from lb import N_FEATURES, N_LEVELS
from scenario_config import ConfigError

logger = logging.getLogger(__name__)

TRAIN = 'train'
EVAL = 'eval'
INITIAL_LEVEL = 0  # エピソード開始時の重み 1.0


def one_hot_actions(indices: Sequence[int], n_levels: int = N_LEVELS) -> np.ndarray:
    """サーバーごとのレベル番号を one-hot にして連結（長さ n·levels）"""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((len(idx), n_levels))
    out[np.arange(len(idx)), idx] = 1.0
    return out.reshape(-1)


def agent_input_dim(n: int) -> int:
    return n * N_FEATURES + n * N_LEVELS


def sample_levels(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """ヘッドごとの確率 (n, levels) から1つずつレベルを引く"""
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    idx = (cum <= u[:, None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1).astype(np.int64)


@dataclass
class AgentObservationHistory:
    """1エージェント分の履歴（GRU の隠れ状態・直前の観測と行動）"""

    hidden: torch.Tensor
    last_obs: Optional[np.ndarray] = None
    last_action: Optional[np.ndarray] = None

    def reset(self, n: int) -> None:
        self.hidden = torch.zeros_like(self.hidden)
        self.last_obs = None
        self.last_action = np.full(n, INITIAL_LEVEL, dtype=np.int64)


class ObservationNormalizer:
    """学習中に平均・分散を更新し、評価時は固定して使う標準化"""

    def __init__(self, dim: int, eps: float = 1e-8):
        self.dim = dim
        self.eps = eps
        self.count = 0
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.frozen = False

    def update(self, batch: np.ndarray) -> None:
        if self.frozen:
            return
        x = np.asarray(batch, dtype=float).reshape(-1, self.dim)
        if len(x) == 0:
            return
        b_mean = x.mean(axis=0)
        b_var = x.var(axis=0)
        b_count = len(x)
        total = self.count + b_count
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * b_count + delta ** 2 * self.count * b_count / total
        self.mean = self.mean + delta * b_count / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x: np.ndarray) -> np.ndarray:
        if self.count == 0:
            return np.asarray(x, dtype=float)
        return (np.asarray(x, dtype=float) - self.mean) / np.sqrt(self.var + self.eps)

    def state_dict(self) -> Dict[str, Any]:
        return {'count': self.count, 'mean': self.mean.copy(), 'var': self.var.copy()}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.count = state['count']
        self.mean = np.asarray(state['mean'], dtype=float)
        self.var = np.asarray(state['var'], dtype=float)


@dataclass
class Transition:
    """SAC 用の1遷移（観測は標準化前の値）"""

    obs: np.ndarray
    prev_action: np.ndarray
    hidden: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    next_hidden: np.ndarray
    state: np.ndarray
    next_state: np.ndarray
    done: bool


class ReplayBuffer:
    """容量を超えたら古い遷移から捨てるリプレイバッファ"""

    def __init__(self, capacity: int = 3000):
        if capacity < 1:
            raise ConfigError('リプレイバッファの容量は1以上にしてください')
        self.capacity = capacity
        self.buffer: Deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.buffer)

    def push(self, transition: Transition) -> None:
        self.buffer.append(transition)

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[Transition]:
        """バッチ内で重複なしの一様サンプリング"""
        size = min(batch_size, len(self.buffer))
        if size == 0:
            return []
        idx = rng.choice(len(self.buffer), size=size, replace=False)
        return [self.buffer[i] for i in idx]


@dataclass
class EpisodeRecord:
    """
    QMIX 用の1エピソード

    obs: (T+1, m, n·F)、prev_actions: (T+1, m, n)、actions: (T, m, n)、
    states: (T+1, S)、rewards: (T,)、dones: (T,)
    """

    obs: np.ndarray
    prev_actions: np.ndarray
    actions: np.ndarray
    states: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class SegmentBatch:
    obs: np.ndarray  # (B, L+1, m, D)
    prev_actions: np.ndarray  # (B, L+1, m, n)
    actions: np.ndarray  # (B, L, m, n)
    states: np.ndarray  # (B, L+1, S)
    rewards: np.ndarray  # (B, L)
    dones: np.ndarray  # (B, L)

    def __len__(self) -> int:
        return len(self.rewards)


class EpisodeStore:
    """
    エピソード単位で保存するバッファ（容量はステップ数）

    容量を超えたら最も古いエピソードから丸ごと捨てる（最新の1本は残す）。
    """

    def __init__(self, capacity_steps: int = 3000):
        if capacity_steps < 1:
            raise ConfigError('エピソードバッファの容量は1以上にしてください')
        self.capacity = capacity_steps
        self.episodes: Deque[EpisodeRecord] = deque()

    @property
    def steps(self) -> int:
        return sum(len(e) for e in self.episodes)

    def __len__(self) -> int:
        return len(self.episodes)

    def push(self, episode: EpisodeRecord) -> None:
        self.episodes.append(episode)
        while len(self.episodes) > 1 and self.steps > self.capacity:
            self.episodes.popleft()

    def sample_segments(self, batch_size: int, length: int, rng: np.random.Generator) -> Optional[SegmentBatch]:
        """
        長さ length の区間を重複なしで batch_size 本取り出す

        保存中の最短エピソードが length より短ければ区間長をそれに合わせる。
        """
        usable = [e for e in self.episodes if len(e) > 0]
        if not usable:
            return None
        length = min(length, min(len(e) for e in usable))
        candidates: List[Tuple[int, int]] = [
            (k, start) for k, e in enumerate(usable) for start in range(len(e) - length + 1)
        ]
        size = min(batch_size, len(candidates))
        picks = rng.choice(len(candidates), size=size, replace=False)
        segs = [candidates[p] for p in picks]

        def cut(attr: str, extra: int) -> np.ndarray:
            return np.stack([getattr(usable[k], attr)[s:s + length + extra] for k, s in segs])

        return SegmentBatch(
            obs=cut('obs', 1),
            prev_actions=cut('prev_actions', 1),
            actions=cut('actions', 0),
            states=cut('states', 1),
            rewards=cut('rewards', 0),
            dones=cut('dones', 0),
        )


def sync_delay_model(m: int, base_delay: float = 0.0, per_agent_delay: float = 0.0) -> float:
    """
    集中学習時の同期遅延（行動が適用されるまでの時間）

    Returns:
        base_delay + per_agent_delay · m（秒）

    Raises:
        ConfigError: 遅延が負の場合
    """
    if base_delay < 0 or per_agent_delay < 0:
        raise ConfigError('同期遅延は0以上にしてください')
    if m < 1:
        raise ConfigError('エージェント数は1以上にしてください')
    return base_delay + per_agent_delay * m


def effective_step_ratio(m_large: int, m_small: int, step_interval: float,
                         base_delay: float = 0.0, per_agent_delay: float = 0.0) -> float:
    """エージェント数の違いによる実効制御間隔の伸び率"""
    big = step_interval + sync_delay_model(m_large, base_delay, per_agent_delay)
    small = step_interval + sync_delay_model(m_small, base_delay, per_agent_delay)
    return big / small


class AgentController:
    """
    シミュレーターと学習エージェントの橋渡し

    シミュレーターは begin_episode をエピソード開始時に、act を制御ステップごとに呼ぶ。
    各エージェントは自分の観測と行動の履歴だけから行動を決める。
    """

    kind = ''

    def __init__(self, n: int, m: int, state_dim: int):
        self.n = n
        self.m = m
        self.state_dim = state_dim
        self.mode = TRAIN
        self.obs_normalizer = ObservationNormalizer(n * N_FEATURES)
        self.state_normalizer = ObservationNormalizer(state_dim)
        self.histories: List[AgentObservationHistory] = []
        self.action_log: List[np.ndarray] = []
        self._explore: List[np.random.Generator] = []

    def set_mode(self, mode: str) -> None:
        if mode not in (TRAIN, EVAL):
            raise ConfigError(f'不明なモードです: {mode}')
        self.mode = mode
        frozen = mode == EVAL
        self.obs_normalizer.frozen = frozen
        self.state_normalizer.frozen = frozen

    def begin_episode(self, streams, m: int) -> None:
        if m != self.m:
            raise ConfigError(f'エージェント数 {self.m} とLB台数 {m} が一致しません')
        self._explore = [streams.get(f'agent-{i}-explore') for i in range(m)]
        for h in self.histories:
            h.reset(self.n)
        self.action_log = []
        self._on_begin_episode()

    def _on_begin_episode(self) -> None:
        pass

    def agent_input(self, obs: np.ndarray, last_action: np.ndarray) -> np.ndarray:
        """標準化した観測と直前の行動（one-hot）を連結したネット入力"""
        x = self.obs_normalizer.normalize(np.asarray(obs, dtype=float).reshape(-1))
        return np.concatenate([x, one_hot_actions(last_action)])

    def act(self, observations: List[np.ndarray], global_state: np.ndarray, clock) -> List[np.ndarray]:
        raise NotImplementedError

    def observe_episode(self, result) -> None:
        raise NotImplementedError

    def update(self) -> Dict[str, float]:
        raise NotImplementedError

    def update_normalizers(self, trajectory) -> None:
        obs = np.asarray(trajectory.observations, dtype=float)
        self.obs_normalizer.update(obs.reshape(-1, self.n * N_FEATURES))
        self.state_normalizer.update(np.asarray(trajectory.states, dtype=float))

    def state_dict(self) -> Dict[str, Any]:
        raise NotImplementedError

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        raise NotImplementedError

    def replay_actions(self, local_observations: np.ndarray, agent: int) -> np.ndarray:
        """1エージェントの局所観測列だけから評価モードの行動列を再計算する"""
        raise NotImplementedError
