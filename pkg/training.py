"""
学習ループ（エピソード実行 → バッファ追加 → 更新 → 学習曲線・チェックポイント）
"""
import configparser
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from qmix_agent import QmixController
from rl_agents import EVAL, TRAIN, AgentController
from rl_nn import load_checkpoint, save_checkpoint
from sac_agent import SacController
from scenario_config import AGENT_KINDS, ConfigError, ScenarioConfig, config_from_parser, config_to_parser
from simulation import EpisodeResult, PolicyBinding, global_state_dim, run_episode

logger = logging.getLogger(__name__)


@dataclass
class CurveRow:
    """学習曲線の1行"""

    episode: int
    mean_reward: float
    mean_fct: float
    p90_fct: float

    def to_dict(self) -> dict:
        return {'episode': self.episode, 'mean_reward': self.mean_reward,
                'mean_FCT': self.mean_fct, 'p90_FCT': self.p90_fct}


@dataclass
class TrainingResult:
    kind: str
    seed: int
    controller: AgentController
    curve: List[CurveRow] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    environment_steps: int = 0


def training_scenario(cfg: ScenarioConfig, kind: str) -> ScenarioConfig:
    """学習用のシナリオ（S-SAC は1台のLBが全フローを処理する）"""
    if kind not in AGENT_KINDS:
        raise ConfigError(f"agent.kind は {', '.join(AGENT_KINDS)} のいずれかにしてください")
    changes = {'policy': kind}
    if kind == 'ssac' and cfg.lb_count != 1:
        logger.info('S-SAC のため LB 台数を %d から 1 に変更します', cfg.lb_count)
        changes['lb_count'] = 1
    return cfg.replace(**changes)


def build_controller(cfg: ScenarioConfig, kind: str, seed: int) -> AgentController:
    n = cfg.n_servers
    m = cfg.lb_count
    state_dim = global_state_dim(n)
    if kind == 'qmix':
        return QmixController(n, m, state_dim, cfg.agent, seed)
    if kind in ('isac', 'ssac'):
        return SacController(n, m, state_dim, cfg.agent, seed, kind=kind)
    raise ConfigError(f"agent.kind は {', '.join(AGENT_KINDS)} のいずれかにしてください")


def episode_seed(seed: int, episode: int) -> int:
    return seed * 1_000_003 + episode


def curve_row(episode: int, result: EpisodeResult) -> CurveRow:
    fcts = np.asarray([f.fct for f in result.flows])
    return CurveRow(
        episode=episode,
        mean_reward=result.mean_reward(),
        mean_fct=float(fcts.mean()) if fcts.size else math.nan,
        p90_fct=float(np.percentile(fcts, 90)) if fcts.size else math.nan,
    )


def _config_text(cfg: ScenarioConfig) -> str:
    buf = io.StringIO()
    config_to_parser(cfg).write(buf)
    return buf.getvalue()


def _config_from_text(text: str) -> ScenarioConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    return config_from_parser(parser)


def save_training_checkpoint(path: Union[str, Path], cfg: ScenarioConfig, controller: AgentController,
                             seed: int, next_episode: int, curve: List[CurveRow]) -> Path:
    return save_checkpoint(path, {
        'kind': controller.kind,
        'seed': seed,
        'next_episode': next_episode,
        'scenario': _config_text(cfg),
        'controller': controller.state_dict(),
        'curve': [r.to_dict() for r in curve],
    })


def load_controller(path: Union[str, Path], cfg: Optional[ScenarioConfig] = None,
                    mode: str = EVAL) -> Tuple[AgentController, ScenarioConfig, dict]:
    """
    チェックポイントからコントローラーを復元する

    Args:
        path: チェックポイント
        cfg: 評価に使うシナリオ（省略時は学習時のシナリオ）
        mode: 'eval'（観測の標準化を固定し argmax で行動）または 'train'

    Returns:
        (コントローラー, 学習時のシナリオ, チェックポイントの中身)
    """
    payload = load_checkpoint(path)
    trained_cfg = _config_from_text(payload['scenario'])
    kind = payload['kind']
    target = cfg if cfg is not None else trained_cfg
    target = training_scenario(target, kind)
    if target.n_servers != trained_cfg.n_servers or target.lb_count != trained_cfg.lb_count:
        raise ConfigError('チェックポイントとシナリオのサーバー台数またはLB台数が一致しません')
    controller = build_controller(trained_cfg, kind, payload['seed'])
    controller.load_state_dict(payload['controller'])
    controller.set_mode(mode)
    return controller, trained_cfg, payload


def train(cfg: ScenarioConfig, seed: int, out_dir: Optional[Union[str, Path]] = None,
          resume: Optional[Union[str, Path]] = None,
          on_episode: Optional[Callable[[CurveRow], None]] = None) -> TrainingResult:
    """
    エージェントを学習する

    各エピソードで1本シミュレーションを実行して軌跡をバッファに追加し、
    updates_per_episode 回の更新を行う。checkpoint_every エピソードごとと最後に
    チェックポイントを書き出す。

    Args:
        cfg: シナリオ（agent.kind で QMIX / I-SAC / S-SAC を選ぶ）
        seed: 学習のシード
        out_dir: チェックポイントの出力先（省略時は保存しない）
        resume: 再開するチェックポイント
        on_episode: エピソードごとに学習曲線の行を受け取るコールバック

    Returns:
        学習曲線・チェックポイントのパスなど
    """
    kind = cfg.agent.kind
    cfg = training_scenario(cfg, kind).validate()
    start = 0
    curve: List[CurveRow] = []
    if resume is not None:
        resume = Path(resume)
        if not resume.exists():
            raise FileNotFoundError(f'再開するチェックポイントが見つかりません: {resume}')
        controller, _, payload = load_controller(resume, cfg, mode=TRAIN)
        start = payload['next_episode']
        curve = [CurveRow(r['episode'], r['mean_reward'], r['mean_FCT'], r['p90_FCT']) for r in payload['curve']]
        logger.info('チェックポイント %s からエピソード %d で再開します', resume, start)
    else:
        controller = build_controller(cfg, kind, seed)
    controller.set_mode(TRAIN)

    out_path = Path(out_dir) if out_dir is not None else None
    result = TrainingResult(kind=kind, seed=seed, controller=controller, curve=curve)
    binding = PolicyBinding(policy=kind, controller=controller)
    every = cfg.agent.checkpoint_every

    for episode in range(start, cfg.agent.episodes):
        if isinstance(controller, QmixController):
            controller.set_episode(episode)
        episode_result = run_episode(cfg, binding, episode_seed(seed, episode), record=True)
        controller.observe_episode(episode_result)
        losses = {}
        for _ in range(cfg.agent.updates_per_episode):
            losses = controller.update()
        row = curve_row(episode, episode_result)
        result.curve.append(row)
        result.environment_steps += len(episode_result.steps)
        logger.info('episode %d: 平均報酬 %.4f 平均FCT %.4f p90 %.4f %s',
                    episode, row.mean_reward, row.mean_fct, row.p90_fct,
                    ' '.join(f'{k}={v:.4g}' for k, v in sorted(losses.items())))
        if on_episode is not None:
            on_episode(row)
        if out_path is not None and every > 0 and (episode + 1) % every == 0:
            path = out_path / 'checkpoints' / f'episode-{episode + 1:04d}.pt'
            result.checkpoints.append(save_training_checkpoint(path, cfg, controller, seed, episode + 1, result.curve))

    if out_path is not None:
        final = out_path / 'checkpoints' / 'final.pt'
        result.checkpoints.append(
            save_training_checkpoint(final, cfg, controller, seed, cfg.agent.episodes, result.curve))
    return result


@dataclass
class AuditReport:
    """分散実行の監査結果"""

    agents: int
    steps: int
    mismatches: List[Tuple[int, int]] = field(default_factory=list)  # (agent, step)

    @property
    def passed(self) -> bool:
        return not self.mismatches


def audit_decentralized(controller: AgentController, result: EpisodeResult) -> AuditReport:
    """
    評価エピソードの行動を、各エージェント自身の局所観測列だけから再計算して照合する

    Args:
        controller: 評価モードで使ったコントローラー
        result: record=True で実行したエピソードの結果

    Returns:
        一致しなかった (エージェント, ステップ) の一覧
    """
    traj = result.trajectory
    if traj is None:
        raise ConfigError('監査には軌跡の記録（record=True）が必要です')
    obs = np.stack(traj.observations) if traj.observations else np.zeros((0, controller.m, controller.n, 0))
    logged = np.stack(traj.actions) if traj.actions else np.zeros((0, controller.m, controller.n), dtype=np.int64)
    report = AuditReport(agents=controller.m, steps=len(logged))
    for i in range(controller.m):
        replayed = controller.replay_actions(obs[:, i], i)
        for t in range(len(logged)):
            if not np.array_equal(replayed[t], logged[t, i]):
                report.mismatches.append((i, t))
    if report.mismatches:
        logger.warning('分散実行の監査で %d 件の不一致がありました', len(report.mismatches))
    return report
