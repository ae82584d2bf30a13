"""
実行記録のデータベース（SQLAlchemy）

simulate / train / evaluate の各実行を runs テーブルに、学習曲線を
learning_curve テーブルに記録する。
"""
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine, select
from sqlalchemy.orm import DeclarativeBase, Session, relationship, sessionmaker

from scenario_config import env_settings

logger = logging.getLogger(__name__)


class Base(DeclarativeBase):
    pass


class RunRecord(Base):
    """1本の実行（シミュレーション・学習・評価）"""
    __tablename__ = 'runs'

    id = Column(Integer, primary_key=True)
    command = Column(String(20), nullable=False, index=True)  # simulate / train / evaluate
    scenario = Column(String(100), nullable=False)
    policy = Column(String(20), nullable=False)
    seed = Column(Integer, nullable=False)
    rate = Column(Float)
    output_dir = Column(Text, nullable=False)

    # 結果の要約
    flows = Column(Integer)
    mean_fct = Column(Float)
    p90_fct = Column(Float)
    mean_reward = Column(Float)
    saturated = Column(Integer, default=0, nullable=False)

    created_at = Column(DateTime, nullable=False, default=datetime.utcnow, index=True)

    curve = relationship('LearningCurvePoint', back_populates='run', cascade='all, delete-orphan',
                         order_by='LearningCurvePoint.episode')

    def __repr__(self):
        return f'<RunRecord {self.command} {self.policy} seed={self.seed}>'

    def to_dict(self):
        """辞書形式に変換"""
        return {
            'id': self.id,
            'command': self.command,
            'scenario': self.scenario,
            'policy': self.policy,
            'seed': self.seed,
            'rate': self.rate,
            'output_dir': self.output_dir,
            'flows': self.flows,
            'mean_fct': self.mean_fct,
            'p90_fct': self.p90_fct,
            'mean_reward': self.mean_reward,
            'saturated': bool(self.saturated),
            'created_at': self.created_at.isoformat(),
        }


class LearningCurvePoint(Base):
    """学習曲線の1エピソード分"""
    __tablename__ = 'learning_curve'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('runs.id'), nullable=False, index=True)
    episode = Column(Integer, nullable=False)
    mean_reward = Column(Float)
    mean_fct = Column(Float)
    p90_fct = Column(Float)

    run = relationship('RunRecord', back_populates='curve')

    def __repr__(self):
        return f'<LearningCurvePoint run={self.run_id} episode={self.episode}>'

    def to_dict(self):
        return {
            'episode': self.episode,
            'mean_reward': self.mean_reward,
            'mean_FCT': self.mean_fct,
            'p90_FCT': self.p90_fct,
        }


def normalize_url(url: str) -> str:
    """古い形式の PostgreSQL URL を SQLAlchemy が受け付ける形に直す"""
    if url.startswith('postgres://'):
        return url.replace('postgres://', 'postgresql://', 1)
    return url


class RunRegistry:
    """
    実行記録の登録・一覧

    Args:
        url: データベースURL（例: sqlite:///results/runs.db）
    """

    def __init__(self, url: str):
        self.url = normalize_url(url)
        if self.url.startswith('sqlite:///') and self.url != 'sqlite:///:memory:':
            Path(self.url[len('sqlite:///'):]).parent.mkdir(parents=True, exist_ok=True)
        self.engine = create_engine(self.url)
        Base.metadata.create_all(self.engine)
        self._session = sessionmaker(bind=self.engine, expire_on_commit=False)

    def session(self) -> Session:
        return self._session()

    def record_run(self, command: str, scenario: str, policy: str, seed: int, output_dir: str,
                   rate: Optional[float] = None, flows: Optional[int] = None,
                   mean_fct: Optional[float] = None, p90_fct: Optional[float] = None,
                   mean_reward: Optional[float] = None, saturated: bool = False,
                   curve: Sequence = ()) -> RunRecord:
        """
        実行を1件登録する

        Args:
            curve: 学習の場合は CurveRow の列

        Returns:
            登録した RunRecord
        """
        record = RunRecord(
            command=command, scenario=scenario, policy=policy, seed=seed, rate=rate,
            output_dir=str(output_dir), flows=flows, mean_fct=mean_fct, p90_fct=p90_fct,
            mean_reward=mean_reward, saturated=int(saturated),
        )
        record.curve = [
            LearningCurvePoint(episode=r.episode, mean_reward=r.mean_reward, mean_fct=r.mean_fct, p90_fct=r.p90_fct)
            for r in curve
        ]
        with self.session() as session:
            session.add(record)
            session.commit()
            session.refresh(record)
            logger.debug('実行を登録しました: %r', record)
            return record

    def list_runs(self, command: Optional[str] = None, limit: int = 50) -> List[Dict]:
        """新しい順に実行記録を返す"""
        stmt = select(RunRecord).order_by(RunRecord.created_at.desc(), RunRecord.id.desc()).limit(limit)
        if command:
            stmt = stmt.where(RunRecord.command == command)
        with self.session() as session:
            return [r.to_dict() for r in session.scalars(stmt)]

    def learning_curve(self, run_id: int) -> List[Dict]:
        stmt = select(LearningCurvePoint).where(LearningCurvePoint.run_id == run_id).order_by(
            LearningCurvePoint.episode)
        with self.session() as session:
            return [p.to_dict() for p in session.scalars(stmt)]


def registry_from_env(url: Optional[str] = None) -> Optional[RunRegistry]:
    """
    引数または環境変数 LBSIM_DATABASE_URL から RunRegistry を作る

    Returns:
        どちらも指定されていなければ None（記録しない）
    """
    url = url or env_settings()['database_url']
    if not url:
        return None
    return RunRegistry(url)
