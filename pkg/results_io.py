"""
結果ファイルの書き出し・読み込み（すべてCSV）

フローログの時刻は小数点以下6桁の固定小数、それ以外の数値は repr で書き出す
（読み込んだ値は書き出した値と完全に一致する）。
"""
import csv
import logging
import math
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np

from metrics import JctSummary, jct_summary, occupancy_ratio
from scenario_config import ScenarioConfig, save_config
from simulation import EpisodeResult, FlowRecord

logger = logging.getLogger(__name__)

FLOW_LOG = 'flows.csv'
SUMMARY = 'jct_summary.csv'
CDF = 'jct_cdf.csv'
BUSY_SERIES = 'busy_workers.csv'
FAIRNESS_SERIES = 'fairness.csv'
LEARNING_CURVE = 'learning_curve.csv'
SCENARIO_FILE = 'scenario.ini'

FLOW_COLUMNS = ['flow_id', 'class', 'lb', 'server', 't_arrival', 't_service_start', 't_complete',
                'workload', 'service_work']
SUMMARY_COLUMNS = ['class', 'count', 'mean', 'std', 'p90', 'p99']
CDF_COLUMNS = ['class', 'fraction', 'fct']
FAIRNESS_COLUMNS = ['step', 'time', 'reward', 'fairness', 'fairness_ground_truth']
CURVE_COLUMNS = ['episode', 'mean_reward', 'mean_FCT', 'p90_FCT']

PathLike = Union[str, Path]


def _num(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def _write(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else _num(v) for v in row])
    return path


def read_table(path: PathLike) -> List[Dict[str, str]]:
    """ヘッダー付きCSVを辞書のリストとして読む"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'結果ファイルが見つかりません: {path}')
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))


# --- フローログ ---

def _fixed(x: float) -> str:
    return f'{x:.6f}'


def write_flow_log(path: PathLike, flows: Sequence[FlowRecord]) -> Path:
    """
    フローログを書き出す（flow_id 順、時刻とワークロードは小数点以下6桁の固定小数）

    読み戻した記録をもう一度書き出すと同じファイルになる。
    """
    ordered = sorted(flows, key=lambda r: r.flow_id)
    return _write(Path(path), FLOW_COLUMNS, (
        [r.flow_id, r.cls, r.lb_id, r.server_id] + [_fixed(v) for v in (
            r.t_arrival, r.t_service_start, r.t_complete, r.workload, r.service_work)]
        for r in ordered
    ))


def read_flow_log(path: PathLike) -> List[FlowRecord]:
    return [
        FlowRecord(
            flow_id=int(row['flow_id']), cls=row['class'], lb_id=int(row['lb']), server_id=int(row['server']),
            t_arrival=float(row['t_arrival']), t_service_start=float(row['t_service_start']),
            t_complete=float(row['t_complete']), workload=float(row['workload']),
            service_work=float(row['service_work']),
        )
        for row in read_table(path)
    ]


# --- FCT の集計と CDF ---

def write_summary(path: PathLike, summaries: Dict[str, JctSummary]) -> Path:
    return _write(Path(path), SUMMARY_COLUMNS, (
        [cls, s.count, s.mean, s.std, s.p90, s.p99] for cls, s in summaries.items()
    ))


def read_summary(path: PathLike) -> Dict[str, JctSummary]:
    out: Dict[str, JctSummary] = OrderedDict()
    for row in read_table(path):
        out[row['class']] = JctSummary(
            count=int(row['count']), mean=float(row['mean']), std=float(row['std']),
            p90=float(row['p90']), p99=float(row['p99']),
        )
    return out


def write_cdf(path: PathLike, summaries: Dict[str, JctSummary]) -> Path:
    return _write(Path(path), CDF_COLUMNS, (
        [cls, fraction, q] for cls, s in summaries.items() for q, fraction in s.cdf
    ))


def read_cdf(path: PathLike) -> Dict[str, List[tuple]]:
    """クラスごとの (fct, 累積割合) の列"""
    out: Dict[str, List[tuple]] = OrderedDict()
    for row in read_table(path):
        out.setdefault(row['class'], []).append((float(row['fct']), float(row['fraction'])))
    return out


# --- 時系列 ---

def busy_by_group(result: EpisodeResult) -> List[Dict[str, float]]:
    """制御ステップごとのグループ別稼働ワーカー数（ステップ区間の時間平均の合計）"""
    labels = list(OrderedDict.fromkeys(result.group_labels))
    rows = []
    for step in result.steps:
        series = step.busy_avg if step.busy_avg else [float(b) for b in step.busy]
        totals = {g: 0.0 for g in labels}
        for label, b in zip(result.group_labels, series):
            totals[label] += b
        rows.append(totals)
    return rows


def write_busy_series(path: PathLike, result: EpisodeResult) -> Path:
    labels = list(OrderedDict.fromkeys(result.group_labels))
    rows = busy_by_group(result)
    return _write(Path(path), ['step', 'time'] + labels, (
        [s.index, s.time] + [row[g] for g in labels] for s, row in zip(result.steps, rows)
    ))


def read_series(path: PathLike) -> Dict[str, List[float]]:
    """列名ごとの数値列"""
    rows = read_table(path)
    if not rows:
        return {}
    return {k: [float(r[k]) for r in rows] for k in rows[0]}


def group_busy_means(result: EpisodeResult) -> Dict[str, float]:
    rows = busy_by_group(result)
    if not rows:
        return {}
    return {g: float(np.mean([r[g] for r in rows])) for g in rows[0]}


def write_fairness_series(path: PathLike, result: EpisodeResult) -> Path:
    return _write(Path(path), FAIRNESS_COLUMNS, (
        [s.index, s.time, s.reward, s.fairness, s.fairness_ground_truth] for s in result.steps
    ))


# --- 学習曲線 ---

def write_learning_curve(path: PathLike, rows: Sequence) -> Path:
    return _write(Path(path), CURVE_COLUMNS, (
        [r.episode, r.mean_reward, r.mean_fct, r.p90_fct] for r in rows
    ))


def read_learning_curve(path: PathLike) -> List[Dict[str, float]]:
    return [
        {'episode': int(r['episode']), 'mean_reward': float(r['mean_reward']),
         'mean_FCT': float(r['mean_FCT']), 'p90_FCT': float(r['p90_FCT'])}
        for r in read_table(path)
    ]


# --- 1本の実行結果 ---

def write_run(run_dir: PathLike, cfg: ScenarioConfig, result: EpisodeResult) -> Dict[str, Path]:
    """
    1本の実行結果をディレクトリに書き出す

    Args:
        run_dir: 出力先（存在しなければ作成）
        cfg: 実行に使ったシナリオ（再現用に scenario.ini として保存）
        result: エピソードの結果

    Returns:
        種類ごとの書き出したパス
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg.replace(seeds=[result.seed]), run_dir / SCENARIO_FILE)
    paths = {
        'scenario': run_dir / SCENARIO_FILE,
        'flows': write_flow_log(run_dir / FLOW_LOG, result.flows),
        'busy': write_busy_series(run_dir / BUSY_SERIES, result),
        'fairness': write_fairness_series(run_dir / FAIRNESS_SERIES, result),
    }
    if result.flows:
        summaries = jct_summary(result.flows)
        paths['summary'] = write_summary(run_dir / SUMMARY, summaries)
        paths['cdf'] = write_cdf(run_dir / CDF, summaries)
    else:
        logger.warning('完了したフローがないため集計ファイルを書き出しません: %s', run_dir)
    logger.info('結果を書き出しました: %s', run_dir)
    return paths


# --- 比較表 ---

COMPARISON_CLASSES = ('all', 'H', 'L')


def comparison_rows(results: Dict[tuple, List[EpisodeResult]]) -> List[Dict[str, object]]:
    """
    (手法, 到着率) ごとにシード間の平均FCT（平均±標準偏差）とp90を集計する

    Args:
        results: (method, rate) -> シードごとの結果

    Returns:
        比較表の行
    """
    rows = []
    for (method, rate), runs in results.items():
        row: Dict[str, object] = {'method': method, 'rate': rate, 'seeds': len(runs)}
        summaries = [jct_summary(r.flows) for r in runs if r.flows]
        for cls in COMPARISON_CLASSES:
            means = [s[cls].mean for s in summaries if cls in s]
            p90s = [s[cls].p90 for s in summaries if cls in s]
            row[f'{cls}_mean'] = float(np.mean(means)) if means else math.nan
            row[f'{cls}_std'] = float(np.std(means)) if means else math.nan
            row[f'{cls}_p90'] = float(np.mean(p90s)) if p90s else math.nan
        row['saturated'] = sum(1 for r in runs if r.saturated)
        busy = [group_busy_means(r) for r in runs]
        ratios = [occupancy_ratio(b) for b in busy if b]
        row['occupancy_ratio'] = float(np.mean(ratios)) if ratios else math.nan
        rows.append(row)
    return rows


def comparison_columns() -> List[str]:
    cols = ['method', 'rate', 'seeds']
    for cls in COMPARISON_CLASSES:
        cols += [f'{cls}_mean', f'{cls}_std', f'{cls}_p90']
    return cols + ['saturated', 'occupancy_ratio']


def write_comparison(path: PathLike, rows: Sequence[Dict[str, object]]) -> Path:
    cols = comparison_columns()
    return _write(Path(path), cols, ([r[c] for c in cols] for r in rows))


def write_aggregate_cdf(path: PathLike, results: Dict[tuple, List[EpisodeResult]],
                        cdf_points: int = 200) -> Path:
    """(手法, 到着率) ごとに全シードのフローを合わせたFCTのCDF"""
    def rows():
        for (method, rate), runs in results.items():
            flows = [f for r in runs for f in r.flows]
            if not flows:
                continue
            s = jct_summary(flows, cdf_points)['all']
            for q, fraction in s.cdf:
                yield [method, rate, fraction, q]

    return _write(Path(path), ['method', 'rate', 'fraction', 'fct'], rows())
