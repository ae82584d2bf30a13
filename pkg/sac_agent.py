"""
離散行動版 Soft Actor-Critic（独立エージェント I-SAC / 単一エージェント S-SAC）

行動はサーバーごとのヘッドに分解し、各ヘッドが離散レベルの softmax を出す。
Q値もヘッドごとに出力し、選んだレベルのQ値の合計を行動価値とする。
"""
import copy
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from lb import N_LEVELS
from rl_agents import (
    EVAL, INITIAL_LEVEL, TRAIN, AgentController, AgentObservationHistory, ReplayBuffer, Transition,
    agent_input_dim, one_hot_actions, sample_levels,
)
from rl_nn import DTYPE, GruCell, Mlp, NonFiniteError, check_finite, gru_step, make_adam, optimize, seeded
from scenario_config import AgentConfig
from sim_core import ContractViolation, make_rng

logger = logging.getLogger(__name__)


class SacAgent(nn.Module):
    """
    1エージェント分の方策（GRU + 出力層）とツインクリティック

    Args:
        n: ヘッド数（サーバー台数）
        input_dim: 方策の入力幅（観測 + 直前の行動）
        state_dim: クリティックに追加で渡す大域状態の幅
        n_levels: ヘッドあたりのレベル数
    """

    def __init__(self, n: int, input_dim: int, state_dim: int, hidden: int = 64,
                 n_levels: int = N_LEVELS, lr: float = 1e-3, gamma: float = 0.9,
                 tau: float = 0.005, target_entropy_ratio: float = 0.98, seed: int = 0):
        super().__init__()
        self.n = n
        self.n_levels = n_levels
        self.input_dim = input_dim
        self.state_dim = state_dim
        self.hidden = hidden
        self.lr = lr
        self.gamma = gamma
        self.tau = tau
        # ヘッドごとの最大エントロピー ln(levels) に比率を掛け、ヘッド数分合計する
        self.target_entropy = target_entropy_ratio * math.log(n_levels) * n
        with seeded(seed):
            self.gru = GruCell(input_dim, hidden)
            self.policy_head = Mlp([hidden, hidden, n * n_levels])
            self.critic1 = Mlp([input_dim + state_dim, hidden, hidden, n * n_levels])
            self.critic2 = Mlp([input_dim + state_dim, hidden, hidden, n * n_levels])
        self.target1 = copy.deepcopy(self.critic1)
        self.target2 = copy.deepcopy(self.critic2)
        for p in list(self.target1.parameters()) + list(self.target2.parameters()):
            p.requires_grad_(False)
        self.log_alpha = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.actor_params = list(self.gru.parameters()) + list(self.policy_head.parameters())
        self.critic_params = list(self.critic1.parameters()) + list(self.critic2.parameters())
        self.actor_opt = make_adam(self.actor_params, lr)
        self.critic_opt = make_adam(self.critic_params, lr)
        self.alpha_opt = make_adam([self.log_alpha], lr)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.detach().exp())

    def initial_hidden(self) -> torch.Tensor:
        return self.gru.initial_state()

    def policy(self, x: torch.Tensor, h: torch.Tensor):
        h_next = gru_step(self.gru, x, h)
        logits = self.policy_head(h_next).reshape(*x.shape[:-1], self.n, self.n_levels)
        return logits, h_next

    def q_values(self, critic: Mlp, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        q = critic(torch.cat([x, s], dim=-1))
        return q.reshape(*x.shape[:-1], self.n, self.n_levels)

    def soft_update(self) -> None:
        with torch.no_grad():
            for target, online in ((self.target1, self.critic1), (self.target2, self.critic2)):
                for tp, p in zip(target.parameters(), online.parameters()):
                    tp.mul_(1.0 - self.tau).add_(p, alpha=self.tau)

    def optimizer_state(self) -> Dict[str, Any]:
        return {
            'actor': self.actor_opt.state_dict(),
            'critic': self.critic_opt.state_dict(),
            'alpha': self.alpha_opt.state_dict(),
            'updates': self.updates,
        }

    def load_optimizer_state(self, state: Dict[str, Any]) -> None:
        self.actor_opt.load_state_dict(state['actor'])
        self.critic_opt.load_state_dict(state['critic'])
        self.alpha_opt.load_state_dict(state['alpha'])
        self.updates = state['updates']


def sac_act(agent: SacAgent, obs, history: AgentObservationHistory,
            rng: np.random.Generator, mode: str = TRAIN) -> np.ndarray:
    """
    方策から行動を選ぶ

    Args:
        agent: エージェント
        obs: ネット入力（標準化した観測と直前行動の one-hot）
        history: 観測履歴（隠れ状態と直前行動を更新する）
        rng: 探索用の乱数ストリーム
        mode: 'train' はヘッドごとにサンプリング、'eval' は argmax

    Returns:
        ヘッドごとのレベル番号
    """
    x = torch.as_tensor(np.asarray(obs, dtype=float), dtype=DTYPE)
    if x.shape[-1] != agent.input_dim:
        raise ContractViolation(f'観測の幅 {x.shape[-1]} が {agent.input_dim} と一致しません')
    with torch.no_grad():
        logits, h_next = agent.policy(x, history.hidden)
        check_finite(logits, '方策のロジット')
        probs = torch.softmax(logits, dim=-1).numpy()
    if mode == EVAL:
        idx = probs.argmax(axis=-1).astype(np.int64)
    else:
        idx = sample_levels(probs, rng)
    history.hidden = h_next
    history.last_obs = np.asarray(obs)
    history.last_action = idx
    return idx


@dataclass
class SacBatch:
    x: torch.Tensor
    h: torch.Tensor
    action: torch.Tensor
    reward: torch.Tensor
    next_x: torch.Tensor
    next_h: torch.Tensor
    state: torch.Tensor
    next_state: torch.Tensor
    done: torch.Tensor


def sac_targets(agent: SacAgent, batch: SacBatch) -> torch.Tensor:
    """ターゲットクリティックと次状態の方策から作るソフトベルマン目標 y（勾配なし）"""
    alpha = agent.log_alpha.detach().exp()
    with torch.no_grad():
        next_logits, _ = agent.policy(batch.next_x, batch.next_h)
        next_logp = torch.log_softmax(next_logits, dim=-1)
        next_p = next_logp.exp()
        q_next = torch.min(agent.q_values(agent.target1, batch.next_x, batch.next_state),
                           agent.q_values(agent.target2, batch.next_x, batch.next_state))
        v_next = (next_p * (q_next - alpha * next_logp)).sum(-1).sum(-1)
        return batch.reward + agent.gamma * (1.0 - batch.done) * v_next


def sac_critic_loss(agent: SacAgent, batch: SacBatch, y: torch.Tensor) -> torch.Tensor:
    """ツインクリティックの二乗TD誤差の和"""
    a = batch.action.unsqueeze(-1)
    q1 = agent.q_values(agent.critic1, batch.x, batch.state).gather(-1, a).squeeze(-1).sum(-1)
    q2 = agent.q_values(agent.critic2, batch.x, batch.state).gather(-1, a).squeeze(-1).sum(-1)
    return ((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean()


def sac_actor_loss(agent: SacAgent, batch: SacBatch) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    方策の損失 E[Σ_heads π·(α log π − min Q)]

    Returns:
        (損失, サンプルごとのエントロピー（勾配なし）)
    """
    alpha = agent.log_alpha.detach().exp()
    logits, _ = agent.policy(batch.x, batch.h)
    logp = torch.log_softmax(logits, dim=-1)
    p = logp.exp()
    with torch.no_grad():
        q_pi = torch.min(agent.q_values(agent.critic1, batch.x, batch.state),
                         agent.q_values(agent.critic2, batch.x, batch.state))
    loss = (p * (alpha * logp - q_pi)).sum(-1).sum(-1).mean()
    return loss, -(p * logp).sum(-1).sum(-1).detach()


def sac_alpha_loss(agent: SacAgent, entropy: torch.Tensor) -> torch.Tensor:
    """温度の損失（エントロピーが目標を下回ると α を上げる）"""
    return (agent.log_alpha * (entropy - agent.target_entropy)).mean()


def sac_update(agent: SacAgent, batch: SacBatch) -> Dict[str, float]:
    """
    クリティック・方策・温度を1回ずつ更新する

    Returns:
        {'critic_loss', 'actor_loss', 'alpha_loss', 'alpha', 'entropy'}

    Raises:
        NonFiniteError: 損失・勾配に NaN / Inf が出た場合（損失名と更新回数付き）
    """
    y = sac_targets(agent, batch)
    losses = {}
    try:
        losses['critic_loss'] = optimize(sac_critic_loss(agent, batch, y), agent.critic_params, agent.critic_opt)
        actor_loss, entropy = sac_actor_loss(agent, batch)
        losses['actor_loss'] = optimize(actor_loss, agent.actor_params, agent.actor_opt)
        losses['alpha_loss'] = optimize(sac_alpha_loss(agent, entropy), [agent.log_alpha], agent.alpha_opt)
    except NonFiniteError as e:
        name = 'critic_loss' if 'critic_loss' not in losses else (
            'actor_loss' if 'actor_loss' not in losses else 'alpha_loss')
        raise NonFiniteError(f'SAC 更新 {agent.updates} 回目の {name}: {e}') from e

    agent.soft_update()
    agent.updates += 1
    losses['alpha'] = agent.alpha
    losses['entropy'] = float(entropy.mean())
    return losses


class SacController(AgentController):
    """
    SAC エージェント群のコントローラー

    kind='isac' ではLBごとに独立したエージェント、'ssac' ではLB1台を1エージェントが担当する。
    """

    def __init__(self, n: int, m: int, state_dim: int, config: AgentConfig, seed: int, kind: str = 'isac'):
        super().__init__(n, m, state_dim)
        self.kind = kind
        self.config = config
        self.seed = seed
        dim = agent_input_dim(n)
        self.agents = [
            SacAgent(n, dim, state_dim, config.hidden_size, N_LEVELS, config.lr, config.gamma,
                     config.tau, config.target_entropy_ratio, seed=seed * 7919 + i)
            for i in range(m)
        ]
        self.histories = [AgentObservationHistory(a.initial_hidden()) for a in self.agents]
        for h in self.histories:
            h.reset(n)
        self.buffers = [ReplayBuffer(config.buffer_size) for _ in range(m)]
        self.rng = make_rng(seed, 'sac-replay')
        self._hidden_log: List[List[np.ndarray]] = [[] for _ in range(m)]

    def _on_begin_episode(self) -> None:
        self._hidden_log = [[] for _ in range(self.m)]

    def act(self, observations, global_state, clock) -> List[np.ndarray]:
        actions = []
        for i, (agent, hist) in enumerate(zip(self.agents, self.histories)):
            x = self.agent_input(observations[i], hist.last_action)
            self._hidden_log[i].append(hist.hidden.detach().numpy().copy())
            actions.append(sac_act(agent, x, hist, self._explore[i], self.mode))
        self.action_log.append(np.stack(actions))
        return actions

    def observe_episode(self, result) -> None:
        """エピソードの軌跡を遷移に分解してバッファに入れる"""
        traj = result.trajectory
        T = len(traj)
        if T == 0:
            return
        self.update_normalizers(traj)
        for i in range(self.m):
            final_hidden = self.histories[i].hidden.detach().numpy().copy()
            hiddens = self._hidden_log[i] + [final_hidden]
            for t in range(T):
                prev = traj.actions[t - 1][i] if t > 0 else np.full(self.n, INITIAL_LEVEL, dtype=np.int64)
                last = t == T - 1
                next_obs = traj.final_observation[i] if last else traj.observations[t + 1][i]
                next_state = traj.final_state if last else traj.states[t + 1]
                self.buffers[i].push(Transition(
                    obs=traj.observations[t][i].reshape(-1),
                    prev_action=np.asarray(prev),
                    hidden=hiddens[t],
                    action=np.asarray(traj.actions[t][i]),
                    reward=float(traj.rewards[t][i]),
                    next_obs=next_obs.reshape(-1),
                    next_hidden=hiddens[t + 1],
                    state=np.asarray(traj.states[t]),
                    next_state=np.asarray(next_state),
                    done=last,
                ))

    def _to_batch(self, transitions: Sequence[Transition]) -> SacBatch:
        def inputs(obs, prev):
            return np.stack([
                np.concatenate([self.obs_normalizer.normalize(o), one_hot_actions(p)])
                for o, p in zip(obs, prev)
            ])

        def tensor(x, dtype=DTYPE):
            return torch.as_tensor(np.asarray(x), dtype=dtype)

        x = inputs([t.obs for t in transitions], [t.prev_action for t in transitions])
        next_x = inputs([t.next_obs for t in transitions], [t.action for t in transitions])
        return SacBatch(
            x=tensor(x),
            h=tensor(np.stack([t.hidden for t in transitions])),
            action=tensor(np.stack([t.action for t in transitions]), torch.int64),
            reward=tensor([t.reward for t in transitions]),
            next_x=tensor(next_x),
            next_h=tensor(np.stack([t.next_hidden for t in transitions])),
            state=tensor(np.stack([self.state_normalizer.normalize(t.state) for t in transitions])),
            next_state=tensor(np.stack([self.state_normalizer.normalize(t.next_state) for t in transitions])),
            done=tensor([float(t.done) for t in transitions]),
        )

    def update(self) -> Dict[str, float]:
        totals: Dict[str, List[float]] = {}
        for agent, buffer in zip(self.agents, self.buffers):
            transitions = buffer.sample(self.config.batch_size, self.rng)
            if not transitions:
                continue
            for k, v in sac_update(agent, self._to_batch(transitions)).items():
                totals.setdefault(k, []).append(v)
        return {k: float(np.mean(v)) for k, v in totals.items()}

    def replay_actions(self, local_observations: np.ndarray, agent: int) -> np.ndarray:
        hist = AgentObservationHistory(self.agents[agent].initial_hidden())
        hist.reset(self.n)
        out = []
        for obs in local_observations:
            x = self.agent_input(obs, hist.last_action)
            out.append(sac_act(self.agents[agent], x, hist, self.rng, EVAL))
        return np.stack(out) if out else np.zeros((0, self.n), dtype=np.int64)

    def state_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'agents': [a.state_dict() for a in self.agents],
            'optimizers': [a.optimizer_state() for a in self.agents],
            'buffers': [list(b.buffer) for b in self.buffers],
            'obs_normalizer': self.obs_normalizer.state_dict(),
            'state_normalizer': self.state_normalizer.state_dict(),
            'rng': self.rng.bit_generator.state,
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        for agent, sd, opt in zip(self.agents, state['agents'], state['optimizers']):
            agent.load_state_dict(sd)
            agent.load_optimizer_state(opt)
        for buffer, items in zip(self.buffers, state['buffers']):
            buffer.buffer.clear()
            buffer.buffer.extend(items)
        self.obs_normalizer.load_state_dict(state['obs_normalizer'])
        self.state_normalizer.load_state_dict(state['state_normalizer'])
        self.rng.bit_generator.state = state['rng']
