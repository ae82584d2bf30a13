"""
シナリオ設定（サーバー構成・トラフィック・ポリシー・学習パラメータ）を格納するデータクラス
"""
import configparser
import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

HEURISTIC_POLICIES = ('ecmp', 'wcmp', 'awcmp', 'lsq', 'sed')
AGENT_KINDS = ('qmix', 'isac', 'ssac')
VALID_POLICIES = HEURISTIC_POLICIES + AGENT_KINDS
REWARD_SCOPES = ('global', 'local', 'ground_truth')
DISCIPLINES = ('fifo', 'ps')
TRAFFIC_KINDS = ('poisson', 'two_class', 'trace')


class ConfigError(ValueError):
    """設定の検証エラー（CLIでは終了コード1）"""


@dataclass
class ServerGroup:
    """同一性能のサーバー群"""

    label: str  # グループ名（例: slow, fast）
    count: int  # サーバー台数
    speed: float  # 1台あたりの処理能力 v_j（ワークロード単位/秒）
    workers: int  # ワーカースロット数 W_j


@dataclass
class TrafficConfig:
    """フロー到着過程の設定"""

    kind: str = 'poisson'
    rate: Optional[float] = None  # 到着率 λ（フロー/秒）
    load: Optional[float] = None  # 目標利用率（rate未指定時に λ を算出）
    mean_workload: float = 0.2  # 指数分布の平均ワークロード
    p_heavy: float = 0.5
    mean_heavy: float = 0.4
    mean_light: float = 0.02
    trace_path: Optional[str] = None

    def mean_demand(self) -> float:
        """1フローあたりの平均ワークロード"""
        if self.kind == 'two_class':
            return self.p_heavy * self.mean_heavy + (1.0 - self.p_heavy) * self.mean_light
        return self.mean_workload


@dataclass
class SyncConfig:
    """集中学習時のアクション同期遅延"""

    base_delay: float = 0.0
    per_agent_delay: float = 0.0


@dataclass
class AgentConfig:
    """学習エージェントのハイパーパラメータ"""

    kind: str = 'qmix'
    hidden_size: int = 64
    lr: float = 1e-3
    batch_size: int = 12
    buffer_size: int = 3000
    episodes: int = 72
    updates_per_episode: int = 25
    gamma: float = 0.9
    tau: float = 0.005
    target_update_interval: int = 50
    target_entropy_ratio: float = 0.98
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_episodes: int = 30
    segment_length: int = 40
    share_parameters: bool = True
    mixer_embed: int = 32
    hypernet_embed: int = 32
    checkpoint_every: int = 12


@dataclass
class ScenarioConfig:
    """シミュレーション1本分の設定"""

    name: str = 'custom'
    server_groups: List[ServerGroup] = field(default_factory=list)
    lb_count: int = 1
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    policy: str = 'sed'
    static_weights: Optional[List[float]] = None
    probe_period: float = 1.0
    episode_length: float = 60.0
    step_interval: float = 0.25
    sync: SyncConfig = field(default_factory=SyncConfig)
    reward_scope: str = 'global'
    discipline: str = 'fifo'
    service_jitter: float = 0.0
    overload_cap: int = 100000
    reservoir_size: int = 10000
    reservoir_p: float = 0.05
    discount: float = 0.9
    record_trajectory: bool = False
    seeds: List[int] = field(default_factory=lambda: [1])
    output_dir: str = 'results'
    checkpoint: Optional[str] = None
    agent: AgentConfig = field(default_factory=AgentConfig)
    evaluate_methods: List[str] = field(default_factory=lambda: list(HEURISTIC_POLICIES))
    evaluate_rates: List[float] = field(default_factory=list)

    @property
    def n_servers(self) -> int:
        return sum(g.count for g in self.server_groups)

    def speeds(self) -> List[float]:
        """サーバーごとの処理能力（グループ順に展開）"""
        return [g.speed for g in self.server_groups for _ in range(g.count)]

    def workers(self) -> List[int]:
        return [g.workers for g in self.server_groups for _ in range(g.count)]

    def group_labels(self) -> List[str]:
        return [g.label for g in self.server_groups for _ in range(g.count)]

    def arrival_rate(self) -> float:
        """
        到着率 λ を返す

        rate が指定されていればそれを、なければ load から
        λ = load * Σv_j / E[w] で算出する。
        """
        if self.traffic.rate is not None:
            return self.traffic.rate
        if self.traffic.load is not None:
            return self.traffic.load * sum(self.speeds()) / self.traffic.mean_demand()
        raise ConfigError('traffic.rate と traffic.load のどちらかを指定してください')

    def validate(self) -> 'ScenarioConfig':
        """
        設定を検証する

        Returns:
            自分自身（メソッドチェーン用）

        Raises:
            ConfigError: 不正な値が含まれる場合
        """
        if not self.server_groups or self.n_servers < 1:
            raise ConfigError('サーバーが1台以上必要です')
        for g in self.server_groups:
            if g.count < 1:
                raise ConfigError(f'server_group:{g.label} の count は1以上にしてください')
            if not g.speed > 0:
                raise ConfigError(f'server_group:{g.label} の speed は正の値にしてください')
            if g.workers < 1:
                raise ConfigError(f'server_group:{g.label} の workers は1以上にしてください')
        if self.lb_count < 1:
            raise ConfigError('lb_count は1以上にしてください')
        if self.policy not in VALID_POLICIES:
            raise ConfigError(
                f"不明なポリシー '{self.policy}' です。有効なポリシー: {', '.join(VALID_POLICIES)}"
            )
        if self.reward_scope not in REWARD_SCOPES:
            raise ConfigError(f"reward_scope は {', '.join(REWARD_SCOPES)} のいずれかにしてください")
        if self.discipline not in DISCIPLINES:
            raise ConfigError(f"discipline は {', '.join(DISCIPLINES)} のいずれかにしてください")
        t = self.traffic
        if t.kind not in TRAFFIC_KINDS:
            raise ConfigError(f"traffic.kind は {', '.join(TRAFFIC_KINDS)} のいずれかにしてください")
        if t.kind == 'trace':
            if not t.trace_path:
                raise ConfigError('traffic.kind = trace の場合は trace_path が必要です')
        else:
            if not self.arrival_rate() > 0:
                raise ConfigError('到着率は正の値にしてください')
        if t.mean_workload <= 0 or t.mean_heavy <= 0 or t.mean_light <= 0:
            raise ConfigError('平均ワークロードは正の値にしてください')
        if not 0.0 <= t.p_heavy <= 1.0:
            raise ConfigError('p_heavy は0以上1以下にしてください')
        if self.episode_length < 0:
            raise ConfigError('episode_length は0以上にしてください')
        if not self.step_interval > 0:
            raise ConfigError('step_interval は正の値にしてください')
        if not self.probe_period > 0:
            raise ConfigError('probe_period は正の値にしてください')
        if self.sync.base_delay < 0 or self.sync.per_agent_delay < 0:
            raise ConfigError('同期遅延は0以上にしてください')
        if self.static_weights is not None:
            if len(self.static_weights) != self.n_servers:
                raise ConfigError('static_weights の長さがサーバー台数と一致しません')
            if any(not w > 0 for w in self.static_weights):
                raise ConfigError('static_weights は全て正の値にしてください')
        if self.reservoir_size < 1 or not 0 < self.reservoir_p <= 1:
            raise ConfigError('reservoir_size は1以上、reservoir_p は (0, 1] にしてください')
        if not 0 < self.discount <= 1:
            raise ConfigError('discount は (0, 1] にしてください')
        if self.overload_cap < 1:
            raise ConfigError('overload_cap は1以上にしてください')
        if self.service_jitter < 0:
            raise ConfigError('service_jitter は0以上にしてください')
        a = self.agent
        if a.kind not in AGENT_KINDS:
            raise ConfigError(f"agent.kind は {', '.join(AGENT_KINDS)} のいずれかにしてください")
        if a.batch_size < 1 or a.buffer_size < 1 or a.episodes < 0 or a.hidden_size < 1:
            raise ConfigError('agent のサイズ系パラメータが不正です')
        if not a.lr > 0:
            raise ConfigError('agent.lr は正の値にしてください')
        for method in self.evaluate_methods:
            if method not in VALID_POLICIES:
                raise ConfigError(
                    f"不明なポリシー '{method}' です。有効なポリシー: {', '.join(VALID_POLICIES)}"
                )
        return self

    def replace(self, **changes) -> 'ScenarioConfig':
        return dataclasses.replace(self, **changes)


# ============================================================
# プリセット（中規模・大規模の2つのテストベッド構成）
# ============================================================

def _moderate() -> ScenarioConfig:
    return ScenarioConfig(
        name='moderate',
        server_groups=[
            ServerGroup('slow', 4, 1.0, 2),
            ServerGroup('fast', 3, 2.0, 4),
        ],
        lb_count=2,
        traffic=TrafficConfig(kind='two_class', load=0.85),
        episode_length=60.0,
        seeds=[1, 2, 3, 4, 5],
        agent=AgentConfig(lr=1e-3),
    )


def _large() -> ScenarioConfig:
    return ScenarioConfig(
        name='large',
        server_groups=[
            ServerGroup('slow', 12, 1.0, 4),
            ServerGroup('fast', 12, 2.0, 8),
        ],
        lb_count=6,
        traffic=TrafficConfig(kind='poisson', load=0.85, mean_workload=0.2),
        episode_length=30.0,
        seeds=[1, 2, 3, 4, 5],
        agent=AgentConfig(lr=3e-4),
    )


PRESETS = {
    'moderate': _moderate,
    'large': _large,
}


def preset(name: str) -> ScenarioConfig:
    """
    名前付きプリセットを取得する

    Args:
        name: 'moderate' または 'large'

    Returns:
        新しい ScenarioConfig
    """
    if name not in PRESETS:
        raise ConfigError(f"不明なプリセット '{name}' です。有効なプリセット: {', '.join(PRESETS)}")
    return PRESETS[name]()


def parse_seeds(text: str) -> List[int]:
    """'1..5' 形式または '1,2,3' 形式のシード指定を解析"""
    text = text.strip()
    if not text:
        return []
    if '..' in text:
        lo, hi = text.split('..', 1)
        try:
            lo_i, hi_i = int(lo), int(hi)
        except ValueError:
            raise ConfigError(f"シード範囲 '{text}' を解析できません")
        if hi_i < lo_i:
            raise ConfigError(f"シード範囲 '{text}' の上限が下限より小さいです")
        return list(range(lo_i, hi_i + 1))
    try:
        return [int(s) for s in text.split(',') if s.strip()]
    except ValueError:
        raise ConfigError(f"シード指定 '{text}' を解析できません")


def _floats(text: str) -> List[float]:
    return [float(s) for s in text.split(',') if s.strip()]


def _words(text: str) -> List[str]:
    return [s.strip() for s in text.split(',') if s.strip()]


def _optional_float(section: configparser.SectionProxy, key: str) -> Optional[float]:
    raw = section.get(key, '').strip()
    return float(raw) if raw else None


def _fmt(value) -> str:
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, list):
        return ', '.join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_from_parser(parser: configparser.ConfigParser,
                       base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    """
    ConfigParser の内容を ScenarioConfig に反映する

    Args:
        parser: 読み込み済みのパーサー
        base: 上書き元（プリセットなど）。None なら既定値から開始

    Returns:
        ScenarioConfig（未検証）
    """
    cfg = copy.deepcopy(base) if base is not None else ScenarioConfig()
    try:
        if parser.has_section('scenario'):
            s = parser['scenario']
            if 'preset' in s and base is None:
                cfg = preset(s['preset'].strip())
            cfg.name = s.get('name', cfg.name)
            cfg.lb_count = s.getint('lb_count', cfg.lb_count)
            cfg.episode_length = s.getfloat('episode_length', cfg.episode_length)
            cfg.step_interval = s.getfloat('step_interval', cfg.step_interval)
            cfg.discipline = s.get('discipline', cfg.discipline)
            cfg.service_jitter = s.getfloat('service_jitter', cfg.service_jitter)
            cfg.overload_cap = s.getint('overload_cap', cfg.overload_cap)
            cfg.reward_scope = s.get('reward_scope', cfg.reward_scope)
            cfg.record_trajectory = s.getboolean('record_trajectory', cfg.record_trajectory)
            cfg.output_dir = s.get('output_dir', cfg.output_dir)
            if 'seeds' in s:
                cfg.seeds = parse_seeds(s['seeds'])

        groups = [name for name in parser.sections() if name.startswith('server_group:')]
        if groups:
            cfg.server_groups = [
                ServerGroup(
                    label=name.split(':', 1)[1],
                    count=parser[name].getint('count', 1),
                    speed=parser[name].getfloat('speed'),
                    workers=parser[name].getint('workers', 1),
                )
                for name in groups
            ]

        if parser.has_section('traffic'):
            t = parser['traffic']
            tr = cfg.traffic
            tr.kind = t.get('kind', tr.kind)
            if 'rate' in t:
                tr.rate = _optional_float(t, 'rate')
            if 'load' in t:
                tr.load = _optional_float(t, 'load')
            tr.mean_workload = t.getfloat('mean_workload', tr.mean_workload)
            tr.p_heavy = t.getfloat('p_heavy', tr.p_heavy)
            tr.mean_heavy = t.getfloat('mean_heavy', tr.mean_heavy)
            tr.mean_light = t.getfloat('mean_light', tr.mean_light)
            if 'trace_path' in t:
                tr.trace_path = t.get('trace_path').strip() or None

        if parser.has_section('policy'):
            p = parser['policy']
            cfg.policy = p.get('name', cfg.policy)
            if 'static_weights' in p:
                raw = p.get('static_weights').strip()
                cfg.static_weights = _floats(raw) if raw else None
            cfg.probe_period = p.getfloat('probe_period', cfg.probe_period)
            if 'checkpoint' in p:
                cfg.checkpoint = p.get('checkpoint').strip() or None

        if parser.has_section('lb'):
            lb = parser['lb']
            cfg.reservoir_size = lb.getint('reservoir_size', cfg.reservoir_size)
            cfg.reservoir_p = lb.getfloat('reservoir_p', cfg.reservoir_p)
            cfg.discount = lb.getfloat('discount', cfg.discount)

        if parser.has_section('sync'):
            sy = parser['sync']
            cfg.sync.base_delay = sy.getfloat('base_delay', cfg.sync.base_delay)
            cfg.sync.per_agent_delay = sy.getfloat('per_agent_delay', cfg.sync.per_agent_delay)

        if parser.has_section('agent'):
            ag = parser['agent']
            for f in dataclasses.fields(AgentConfig):
                if f.name not in ag:
                    continue
                current = getattr(cfg.agent, f.name)
                if isinstance(current, bool):
                    value = ag.getboolean(f.name)
                elif isinstance(current, int):
                    value = ag.getint(f.name)
                elif isinstance(current, float):
                    value = ag.getfloat(f.name)
                else:
                    value = ag.get(f.name).strip()
                setattr(cfg.agent, f.name, value)

        if parser.has_section('evaluate'):
            ev = parser['evaluate']
            if 'methods' in ev:
                cfg.evaluate_methods = _words(ev['methods'])
            if 'rates' in ev:
                cfg.evaluate_rates = _floats(ev['rates'])
    except (ValueError, TypeError) as e:
        raise ConfigError(f'設定値を解析できません: {e}')
    return cfg


def load_config(path: Union[str, Path], base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    """
    INIファイルからシナリオ設定を読み込む

    Args:
        path: 設定ファイルのパス
        base: 上書き元の設定

    Returns:
        ScenarioConfig（未検証）
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f'設定ファイルが見つかりません: {path}')
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding='utf-8')
    except configparser.Error as e:
        raise ConfigError(f'設定ファイルを解析できません（{path}）: {e}')
    return config_from_parser(parser, base)


def config_to_parser(cfg: ScenarioConfig) -> configparser.ConfigParser:
    """ScenarioConfig を ConfigParser に変換（結果ディレクトリへの保存用）"""
    parser = configparser.ConfigParser()
    parser['scenario'] = {
        'name': cfg.name,
        'lb_count': _fmt(cfg.lb_count),
        'episode_length': _fmt(cfg.episode_length),
        'step_interval': _fmt(cfg.step_interval),
        'discipline': cfg.discipline,
        'service_jitter': _fmt(cfg.service_jitter),
        'overload_cap': _fmt(cfg.overload_cap),
        'reward_scope': cfg.reward_scope,
        'record_trajectory': _fmt(cfg.record_trajectory),
        'seeds': _fmt(cfg.seeds),
        'output_dir': cfg.output_dir,
    }
    t = cfg.traffic
    parser['traffic'] = {
        'kind': t.kind,
        'rate': _fmt(t.rate),
        'load': _fmt(t.load),
        'mean_workload': _fmt(t.mean_workload),
        'p_heavy': _fmt(t.p_heavy),
        'mean_heavy': _fmt(t.mean_heavy),
        'mean_light': _fmt(t.mean_light),
        'trace_path': _fmt(t.trace_path),
    }
    for g in cfg.server_groups:
        parser[f'server_group:{g.label}'] = {
            'count': _fmt(g.count),
            'speed': _fmt(g.speed),
            'workers': _fmt(g.workers),
        }
    parser['policy'] = {
        'name': cfg.policy,
        'static_weights': _fmt(cfg.static_weights),
        'probe_period': _fmt(cfg.probe_period),
        'checkpoint': _fmt(cfg.checkpoint),
    }
    parser['lb'] = {
        'reservoir_size': _fmt(cfg.reservoir_size),
        'reservoir_p': _fmt(cfg.reservoir_p),
        'discount': _fmt(cfg.discount),
    }
    parser['sync'] = {
        'base_delay': _fmt(cfg.sync.base_delay),
        'per_agent_delay': _fmt(cfg.sync.per_agent_delay),
    }
    parser['agent'] = {f.name: _fmt(getattr(cfg.agent, f.name)) for f in dataclasses.fields(AgentConfig)}
    parser['evaluate'] = {
        'methods': _fmt(cfg.evaluate_methods),
        'rates': _fmt(cfg.evaluate_rates),
    }
    return parser


def save_config(cfg: ScenarioConfig, path: Union[str, Path]) -> None:
    """設定をINIファイルとして書き出す"""
    parser = config_to_parser(cfg)
    with open(path, 'w', encoding='utf-8') as f:
        parser.write(f)


def env_settings() -> Dict[str, Optional[str]]:
    """環境変数から実行時設定を取得"""
    return {
        'database_url': os.environ.get('LBSIM_DATABASE_URL'),
        'log_level': os.environ.get('LBSIM_LOG_LEVEL', 'INFO'),
    }
