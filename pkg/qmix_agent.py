"""
QMIX（単調な混合ネットワークによる価値分解）

各エージェントは自分の観測履歴から、サーバーごとのヘッドについて
離散レベルのQ値を出す。エージェントのQ値は選んだレベルのQ値の合計で、
混合ネットワークが大域状態を条件に Q_tot へまとめる。
"""
import copy
import logging
from typing import Any, Dict, List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from lb import N_LEVELS
from rl_agents import (
    EVAL, INITIAL_LEVEL, AgentController, AgentObservationHistory, EpisodeRecord, EpisodeStore,
    SegmentBatch, agent_input_dim,
)
from rl_nn import DTYPE, GruCell, NonFiniteError, check_finite, gru_step, make_adam, optimize, seeded
from scenario_config import AgentConfig
from sim_core import ContractViolation, make_rng

logger = logging.getLogger(__name__)


class QmixAgentNet(nn.Module):
    """
    エージェントネット（全結合 → GRU → ヘッドごとのQ値）

    Args:
        input_dim: 観測と直前行動（とエージェントID）の幅
        n: ヘッド数（サーバー台数）
        hidden: 隠れ幅
        n_levels: ヘッドあたりのレベル数
    """

    def __init__(self, input_dim: int, n: int, hidden: int = 64, n_levels: int = N_LEVELS):
        super().__init__()
        self.input_dim = input_dim
        self.n = n
        self.n_levels = n_levels
        self.hidden = hidden
        self.fc1 = nn.Linear(input_dim, hidden, dtype=DTYPE)
        self.rnn = GruCell(hidden, hidden)
        self.fc2 = nn.Linear(hidden, n * n_levels, dtype=DTYPE)

    def initial_hidden(self, batch: Optional[int] = None) -> torch.Tensor:
        return self.rnn.initial_state(batch)

    def forward(self, x: torch.Tensor, h: torch.Tensor):
        z = torch.relu(self.fc1(x))
        h_next = gru_step(self.rnn, z, h)
        q = self.fc2(h_next).reshape(*x.shape[:-1], self.n, self.n_levels)
        return q, h_next


class QmixMixer(nn.Module):
    """
    ハイパーネットワークで状態から重みを作る2層の混合ネットワーク

    hidden = ELU(|W1(s)|·Q + b1(s))、Q_tot = |W2(s)|·hidden + b2(s)
    """

    def __init__(self, m: int, state_dim: int, embed: int = 32, hypernet_embed: int = 32):
        super().__init__()
        self.m = m
        self.state_dim = state_dim
        self.embed = embed
        self.hyper_w1 = nn.Sequential(
            nn.Linear(state_dim, hypernet_embed, dtype=DTYPE), nn.ReLU(),
            nn.Linear(hypernet_embed, m * embed, dtype=DTYPE),
        )
        self.hyper_b1 = nn.Linear(state_dim, embed, dtype=DTYPE)
        self.hyper_w2 = nn.Sequential(
            nn.Linear(state_dim, hypernet_embed, dtype=DTYPE), nn.ReLU(),
            nn.Linear(hypernet_embed, embed, dtype=DTYPE),
        )
        self.hyper_b2 = nn.Sequential(
            nn.Linear(state_dim, embed, dtype=DTYPE), nn.ReLU(),
            nn.Linear(embed, 1, dtype=DTYPE),
        )

    def forward(self, agent_qs: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        batch = agent_qs.shape[0]
        w1 = torch.abs(self.hyper_w1(state)).view(batch, self.m, self.embed)
        b1 = self.hyper_b1(state).view(batch, 1, self.embed)
        hidden = F.elu(torch.bmm(agent_qs.view(batch, 1, self.m), w1) + b1)
        w2 = torch.abs(self.hyper_w2(state)).view(batch, self.embed, 1)
        b2 = self.hyper_b2(state).view(batch, 1, 1)
        return (torch.bmm(hidden, w2) + b2).view(batch)


def qmix_agent_q(agent_net: QmixAgentNet, history: AgentObservationHistory, obs) -> torch.Tensor:
    """
    1ステップ分のヘッドごとのQ値 (n, levels) を返し、履歴の隠れ状態を進める

    Raises:
        ContractViolation: 入力幅が合わない場合
    """
    x = torch.as_tensor(np.asarray(obs, dtype=float), dtype=DTYPE)
    if x.shape[-1] != agent_net.input_dim:
        raise ContractViolation(f'入力幅 {x.shape[-1]} がエージェントネットの {agent_net.input_dim} と一致しません')
    with torch.no_grad():
        q, h_next = agent_net(x, history.hidden)
    history.hidden = h_next
    history.last_obs = np.asarray(obs)
    return q


def qmix_mix(mixer: QmixMixer, qs, state) -> torch.Tensor:
    """エージェントごとの選択Q値 (m,) または (B, m) を Q_tot にまとめる"""
    q = torch.as_tensor(qs, dtype=DTYPE)
    s = torch.as_tensor(state, dtype=DTYPE)
    single = q.dim() == 1
    if single:
        q = q.unsqueeze(0)
        s = s.unsqueeze(0)
    out = mixer(q, s)
    return out[0] if single else out


def greedy_levels(q: torch.Tensor) -> np.ndarray:
    """ヘッドごとの argmax（同点は小さい番号）"""
    return q.argmax(dim=-1).numpy().astype(np.int64)


class QmixLearner:
    """
    エージェントネット・混合ネットワークとそのターゲットをまとめて学習する

    Args:
        n: ヘッド数
        m: エージェント数
        obs_dim: 1エージェントの入力幅（IDを除く）
        state_dim: 大域状態の幅
        config: エージェント設定
        seed: 初期化のシード
    """

    def __init__(self, n: int, m: int, obs_dim: int, state_dim: int, config: AgentConfig,
                 seed: int = 0, n_levels: int = N_LEVELS):
        self.n = n
        self.m = m
        self.n_levels = n_levels
        self.config = config
        self.gamma = config.gamma
        self.share = config.share_parameters
        self.id_dim = m if self.share else 0
        with seeded(seed):
            count = 1 if self.share else m
            self.agent_nets = nn.ModuleList(
                QmixAgentNet(obs_dim + self.id_dim, n, config.hidden_size, n_levels) for _ in range(count)
            )
            self.mixer = QmixMixer(m, state_dim, config.mixer_embed, config.hypernet_embed)
        self.target_nets = copy.deepcopy(self.agent_nets)
        self.target_mixer = copy.deepcopy(self.mixer)
        for p in list(self.target_nets.parameters()) + list(self.target_mixer.parameters()):
            p.requires_grad_(False)
        self.params = list(self.agent_nets.parameters()) + list(self.mixer.parameters())
        self.optimizer = make_adam(self.params, config.lr)
        self.updates = 0

    def net_for(self, agent: int) -> QmixAgentNet:
        return self.agent_nets[0 if self.share else agent]

    def with_id(self, x: np.ndarray, agent: int) -> np.ndarray:
        if not self.share:
            return x
        ident = np.zeros(self.m)
        ident[agent] = 1.0
        return np.concatenate([x, ident], axis=-1)

    def hard_update(self) -> None:
        self.target_nets.load_state_dict(self.agent_nets.state_dict())
        self.target_mixer.load_state_dict(self.mixer.state_dict())

    def unroll(self, nets: nn.ModuleList, inputs: torch.Tensor) -> torch.Tensor:
        """inputs (B, L, m, D) を先頭から零の隠れ状態で展開し、(B, L, m, n, levels) を返す"""
        B, L, m, _ = inputs.shape
        outs = []
        for i in range(m):
            net = nets[0 if self.share else i]
            h = net.initial_hidden(B)
            steps = []
            for t in range(L):
                q, h = net(inputs[:, t, i], h)
                steps.append(q)
            outs.append(torch.stack(steps, dim=1))
        return torch.stack(outs, dim=2)

    def state_dict(self) -> Dict[str, Any]:
        return {
            'agent_nets': self.agent_nets.state_dict(),
            'mixer': self.mixer.state_dict(),
            'target_nets': self.target_nets.state_dict(),
            'target_mixer': self.target_mixer.state_dict(),
            'optimizer': self.optimizer.state_dict(),
            'updates': self.updates,
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.agent_nets.load_state_dict(state['agent_nets'])
        self.mixer.load_state_dict(state['mixer'])
        self.target_nets.load_state_dict(state['target_nets'])
        self.target_mixer.load_state_dict(state['target_mixer'])
        self.optimizer.load_state_dict(state['optimizer'])
        self.updates = state['updates']


def qmix_update(learner: QmixLearner, batch: Dict[str, torch.Tensor]) -> float:
    """
    区間バッチで TD 誤差を最小化する

    Args:
        learner: 学習器
        batch: 'inputs' (B, L+1, m, D)、'actions' (B, L, m, n)、'states' (B, L+1, S)、
            'rewards' (B, L)、'dones' (B, L)

    Returns:
        TD 損失（二乗誤差の平均）

    Raises:
        NonFiniteError: 損失・勾配に NaN / Inf が出た場合
    """
    inputs = batch['inputs']
    actions = batch['actions']
    states = batch['states']
    B, L1, m, _ = inputs.shape
    L = L1 - 1
    S = states.shape[-1]

    q = learner.unroll(learner.agent_nets, inputs)
    chosen = q[:, :-1].gather(-1, actions.unsqueeze(-1)).squeeze(-1).sum(-1)  # (B, L, m)
    q_tot = learner.mixer(chosen.reshape(B * L, m), states[:, :-1].reshape(B * L, S)).view(B, L)

    with torch.no_grad():
        tq = learner.unroll(learner.target_nets, inputs)
        best = tq[:, 1:].max(dim=-1).values.sum(-1)  # (B, L, m)
        tq_tot = learner.target_mixer(best.reshape(B * L, m), states[:, 1:].reshape(B * L, S)).view(B, L)
        y = batch['rewards'] + learner.gamma * (1.0 - batch['dones']) * tq_tot

    loss = ((q_tot - y) ** 2).mean()
    try:
        value = optimize(loss, learner.params, learner.optimizer)
    except NonFiniteError as e:
        raise NonFiniteError(f'QMIX 更新 {learner.updates} 回目の td_loss: {e}') from e
    learner.updates += 1
    if learner.updates % learner.config.target_update_interval == 0:
        learner.hard_update()
    return value


class QmixController(AgentController):
    """QMIX のコントローラー（ε-greedy 探索、エピソード単位のバッファ）"""

    kind = 'qmix'

    def __init__(self, n: int, m: int, state_dim: int, config: AgentConfig, seed: int):
        super().__init__(n, m, state_dim)
        self.config = config
        self.seed = seed
        self.learner = QmixLearner(n, m, agent_input_dim(n), state_dim, config, seed=seed * 7919)
        self.histories = [
            AgentObservationHistory(self.learner.net_for(i).initial_hidden()) for i in range(m)
        ]
        for h in self.histories:
            h.reset(n)
        self.store = EpisodeStore(config.buffer_size)
        self.rng = make_rng(seed, 'qmix-replay')
        self.epsilon = config.epsilon_start

    def set_episode(self, episode: int) -> None:
        """ε を最初の epsilon_anneal_episodes エピソードで線形に下げる"""
        c = self.config
        if c.epsilon_anneal_episodes <= 0:
            self.epsilon = c.epsilon_end
            return
        frac = min(1.0, episode / c.epsilon_anneal_episodes)
        self.epsilon = c.epsilon_start + frac * (c.epsilon_end - c.epsilon_start)

    def _act_one(self, agent: int, obs: np.ndarray, hist: AgentObservationHistory,
                 rng: np.random.Generator, mode: str) -> np.ndarray:
        x = self.learner.with_id(self.agent_input(obs, hist.last_action), agent)
        q = qmix_agent_q(self.learner.net_for(agent), hist, x)
        check_finite(q, 'エージェントのQ値')
        idx = greedy_levels(q)
        if mode != EVAL and self.epsilon > 0:
            explore = rng.random(self.n) < self.epsilon
            random_levels = rng.integers(self.learner.n_levels, size=self.n)
            idx = np.where(explore, random_levels, idx)
        hist.last_action = idx
        return idx

    def act(self, observations, global_state, clock) -> List[np.ndarray]:
        actions = [
            self._act_one(i, observations[i], hist, self._explore[i], self.mode)
            for i, hist in enumerate(self.histories)
        ]
        self.action_log.append(np.stack(actions))
        return actions

    def observe_episode(self, result) -> None:
        traj = result.trajectory
        T = len(traj)
        if T == 0:
            return
        self.update_normalizers(traj)
        obs = np.concatenate([np.stack(traj.observations), traj.final_observation[None]], axis=0)
        actions = np.stack(traj.actions).astype(np.int64)
        prev = np.concatenate(
            [np.full((1, self.m, self.n), INITIAL_LEVEL, dtype=np.int64), actions], axis=0)
        states = np.concatenate([np.stack(traj.states), traj.final_state[None]], axis=0)
        rewards = np.asarray(traj.rewards, dtype=float).mean(axis=1)
        dones = np.zeros(T)
        dones[-1] = 1.0
        self.store.push(EpisodeRecord(
            obs=obs.reshape(T + 1, self.m, -1),
            prev_actions=prev,
            actions=actions,
            states=states,
            rewards=rewards,
            dones=dones,
        ))

    def _prepare(self, seg: SegmentBatch) -> Dict[str, torch.Tensor]:
        B, L1, m, _ = seg.obs.shape
        x = self.obs_normalizer.normalize(seg.obs)
        onehot = np.eye(self.learner.n_levels)[seg.prev_actions].reshape(B, L1, m, -1)
        parts = [x, onehot]
        if self.learner.share:
            parts.append(np.broadcast_to(np.eye(m), (B, L1, m, m)))
        return {
            'inputs': torch.as_tensor(np.concatenate(parts, axis=-1), dtype=DTYPE),
            'actions': torch.as_tensor(seg.actions, dtype=torch.int64),
            'states': torch.as_tensor(self.state_normalizer.normalize(seg.states), dtype=DTYPE),
            'rewards': torch.as_tensor(seg.rewards, dtype=DTYPE),
            'dones': torch.as_tensor(seg.dones, dtype=DTYPE),
        }

    def update(self) -> Dict[str, float]:
        seg = self.store.sample_segments(self.config.batch_size, self.config.segment_length, self.rng)
        if seg is None:
            return {}
        return {'td_loss': qmix_update(self.learner, self._prepare(seg)), 'epsilon': self.epsilon}

    def replay_actions(self, local_observations: np.ndarray, agent: int) -> np.ndarray:
        hist = AgentObservationHistory(self.learner.net_for(agent).initial_hidden())
        hist.reset(self.n)
        out = [self._act_one(agent, obs, hist, self.rng, EVAL) for obs in local_observations]
        return np.stack(out) if out else np.zeros((0, self.n), dtype=np.int64)

    def state_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'learner': self.learner.state_dict(),
            'episodes': list(self.store.episodes),
            'obs_normalizer': self.obs_normalizer.state_dict(),
            'state_normalizer': self.state_normalizer.state_dict(),
            'rng': self.rng.bit_generator.state,
            'epsilon': self.epsilon,
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.learner.load_state_dict(state['learner'])
        self.store.episodes.clear()
        self.store.episodes.extend(state['episodes'])
        self.obs_normalizer.load_state_dict(state['obs_normalizer'])
        self.state_normalizer.load_state_dict(state['state_normalizer'])
        self.rng.bit_generator.state = state['rng']
        self.epsilon = state['epsilon']
