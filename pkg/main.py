"""
データセンター向けロードバランサー・シミュレーターのメインスクリプト

サブコマンド:
    simulate        ヒューリスティックまたは学習済みポリシーでシミュレーションを実行
    train           QMIX / I-SAC / S-SAC エージェントを学習
    evaluate        複数の手法 × 到着率 × シードで比較表を作成
    bench-decision  振り分け判断1回あたりの処理時間を測定
    gen-trace       合成トレース（Poisson / TwoClass）をCSVで書き出す
    list-runs       実行記録データベースの一覧を表示

終了コード: 0 成功、1 設定エラー、2 実行時エラー
"""
import argparse
import concurrent.futures
import dataclasses
import logging
import math
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from lb import PolicyKind, bench_choose_server
from metrics import jct_summary
from rl_nn import load_checkpoint
from scenario_config import (
    AGENT_KINDS, HEURISTIC_POLICIES, VALID_POLICIES, ConfigError, ScenarioConfig, env_settings,
    load_config, parse_seeds, preset, save_config,
)
from results_db import RunRegistry, registry_from_env
from results_io import (
    SCENARIO_FILE, comparison_rows, write_aggregate_cdf, write_comparison,
    write_learning_curve, write_run,
)
from sim_core import SimulationError, make_rng
from simulation import EpisodeResult, PolicyBinding, run_episode
from traffic import TrafficModel, generate_trace, save_trace
from training import load_controller, train, training_scenario

logger = logging.getLogger(__name__)

BANNER = '=' * 50
EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


# ============================================================
# 設定の組み立て
# ============================================================

def resolve_config(args: argparse.Namespace) -> ScenarioConfig:
    """プリセット・設定ファイル・コマンドライン引数の順に上書きしてシナリオを作る"""
    cfg = preset(args.preset) if getattr(args, 'preset', None) else None
    if getattr(args, 'config', None):
        cfg = load_config(args.config, cfg)
    if cfg is None:
        cfg = preset('moderate')
    if getattr(args, 'policy', None):
        cfg.policy = args.policy.lower()
    if getattr(args, 'seeds', None):
        cfg.seeds = parse_seeds(args.seeds)
    if getattr(args, 'seed', None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, 'out', None):
        cfg.output_dir = args.out
    if getattr(args, 'checkpoint', None) and isinstance(args.checkpoint, str):
        cfg.checkpoint = args.checkpoint
    if getattr(args, 'rate', None) is not None:
        cfg.traffic = dataclasses.replace(cfg.traffic, rate=args.rate)
    if not cfg.seeds:
        raise ConfigError('シードを1つ以上指定してください')
    return cfg.validate()


def prepare_output(path: Path, force: bool) -> Path:
    """出力先を用意する（既にあれば --force のときだけ作り直す）"""
    if path.exists():
        if not force:
            raise ConfigError(f'出力先 {path} は既に存在します。上書きする場合は --force を指定してください')
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True)
    return path


def with_rate(cfg: ScenarioConfig, rate: Optional[float]) -> ScenarioConfig:
    if rate is None:
        return cfg
    return cfg.replace(traffic=dataclasses.replace(cfg.traffic, rate=rate))


def nominal_rate(cfg: ScenarioConfig) -> float:
    """比較表に載せる到着率（トレースの場合は NaN）"""
    return math.nan if cfg.traffic.kind == 'trace' else cfg.arrival_rate()


# ============================================================
# 並列実行の単位
# ============================================================

@dataclass
class RunJob:
    cfg: ScenarioConfig
    policy: str
    seed: int
    rate: Optional[float] = None
    checkpoint: Optional[str] = None


def job_scenario(job: RunJob) -> ScenarioConfig:
    """ジョブで実際に使うシナリオ（到着率とポリシーを反映）"""
    cfg = with_rate(job.cfg, job.rate)
    if job.policy in AGENT_KINDS:
        return training_scenario(cfg, job.policy).replace(checkpoint=job.checkpoint)
    return cfg.replace(policy=job.policy, checkpoint=None)


def run_job(job: RunJob) -> EpisodeResult:
    """1本のシミュレーションを実行する（プロセスプールからも呼ばれる）"""
    cfg = job_scenario(job)
    if job.policy in AGENT_KINDS:
        if not job.checkpoint:
            raise ConfigError(f'{job.policy} の評価にはチェックポイント（--checkpoint）が必要です')
        controller, _, _ = load_controller(job.checkpoint, cfg)
        if controller.kind != job.policy:
            raise ConfigError(f'チェックポイントは {controller.kind} のものです（指定: {job.policy}）')
        binding = PolicyBinding(policy=job.policy, controller=controller)
    else:
        binding = PolicyBinding(policy=job.policy, static_weights=cfg.static_weights)
    return run_episode(cfg, binding, job.seed)


def run_jobs(jobs: Sequence[RunJob], workers: int = 1) -> List[EpisodeResult]:
    """ジョブを実行し、投入順に結果を返す"""
    if workers <= 1 or len(jobs) <= 1:
        return [run_job(job) for job in jobs]
    results: List[Optional[EpisodeResult]] = [None] * len(jobs)
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(run_job, job): i for i, job in enumerate(jobs)}
        for future in concurrent.futures.as_completed(futures):
            results[futures[future]] = future.result()
    return results


def _record(registry: Optional[RunRegistry], command: str, cfg: ScenarioConfig, policy: str,
            result: EpisodeResult, out_dir: Path, rate: Optional[float] = None) -> None:
    if registry is None:
        return
    fcts = np.asarray([f.fct for f in result.flows])
    registry.record_run(
        command=command, scenario=cfg.name, policy=policy, seed=result.seed, output_dir=str(out_dir),
        rate=rate, flows=len(result.flows),
        mean_fct=float(fcts.mean()) if fcts.size else None,
        p90_fct=float(np.percentile(fcts, 90)) if fcts.size else None,
        mean_reward=result.mean_reward(), saturated=result.saturated,
    )


def _fmt(x: float) -> str:
    return '-' if x is None or (isinstance(x, float) and math.isnan(x)) else f'{x:.4f}'


def print_table(rows: Sequence[Dict[str, object]]) -> None:
    """比較表を表示（平均±標準偏差、p90 をクラス別に）"""
    print(f"{'手法':<8}{'到着率':>10}  {'全体 平均±SD':>20}{'p90':>9}  {'Heavy 平均':>12}{'p90':>9}  "
          f"{'Light 平均':>12}{'p90':>9}")
    for r in rows:
        rate = r['rate']
        rate_s = f'{rate:.1f}' if isinstance(rate, float) else str(rate)
        print(f"{r['method']:<8}{rate_s:>10}  "
              f"{_fmt(r['all_mean']) + '±' + _fmt(r['all_std']):>20}{_fmt(r['all_p90']):>9}  "
              f"{_fmt(r['H_mean']):>12}{_fmt(r['H_p90']):>9}  {_fmt(r['L_mean']):>12}{_fmt(r['L_p90']):>9}")


# ============================================================
# サブコマンド
# ============================================================

def cmd_simulate(args: argparse.Namespace, registry: Optional[RunRegistry]) -> int:
    cfg = resolve_config(args)
    if cfg.policy in AGENT_KINDS and not cfg.checkpoint:
        raise ConfigError(f'{cfg.policy} でシミュレーションするにはチェックポイント（--checkpoint）が必要です')
    out = prepare_output(Path(cfg.output_dir), args.force)
    jobs = [RunJob(cfg, cfg.policy, seed, checkpoint=cfg.checkpoint) for seed in cfg.seeds]

    print(BANNER)
    print(f'シナリオ: {cfg.name}  ポリシー: {cfg.policy}  サーバー {cfg.n_servers} 台 / LB {cfg.lb_count} 台')
    print(f'シード: {cfg.seeds}  出力先: {out}')
    print(BANNER)

    results = run_jobs(jobs, args.jobs)
    for result in results:
        run_dir = out / f'seed-{result.seed}'
        write_run(run_dir, cfg, result)
        _record(registry, 'simulate', cfg, cfg.policy, result, run_dir)
        if result.flows:
            s = jct_summary(result.flows)['all']
            print(f'seed {result.seed}: フロー {s.count} 本  平均FCT {s.mean:.4f}s  p90 {s.p90:.4f}s'
                  + ('  （飽和）' if result.saturated else ''))
        else:
            print(f'seed {result.seed}: 完了したフローがありません')

    rows = comparison_rows({(cfg.policy, nominal_rate(cfg)): results})
    write_comparison(out / 'summary.csv', rows)
    print('\n' + BANNER)
    print_table(rows)
    print(BANNER)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, registry: Optional[RunRegistry]) -> int:
    cfg = resolve_config(args)
    if args.agent:
        cfg.agent = dataclasses.replace(cfg.agent, kind=args.agent.lower())
    if args.episodes is not None:
        cfg.agent = dataclasses.replace(cfg.agent, episodes=args.episodes)
    cfg = training_scenario(cfg, cfg.agent.kind).validate()
    seed = cfg.seeds[0]
    out = Path(cfg.output_dir)
    if args.resume:
        if not Path(args.resume).exists():
            raise FileNotFoundError(f'再開するチェックポイントが見つかりません: {args.resume}')
        out.mkdir(parents=True, exist_ok=True)
    else:
        prepare_output(out, args.force)
    save_config(cfg, out / SCENARIO_FILE)

    print(BANNER)
    print(f'学習: {cfg.agent.kind}  シナリオ: {cfg.name}  エピソード {cfg.agent.episodes}  seed {seed}')
    print(BANNER)

    result = train(cfg, seed, out, resume=args.resume)
    write_learning_curve(out / 'learning_curve.csv', result.curve)
    if registry is not None:
        last = result.curve[-1] if result.curve else None
        registry.record_run(
            command='train', scenario=cfg.name, policy=cfg.agent.kind, seed=seed, output_dir=str(out),
            mean_fct=last.mean_fct if last else None, p90_fct=last.p90_fct if last else None,
            mean_reward=last.mean_reward if last else None, curve=result.curve,
        )
    print('\n' + BANNER)
    print(f'学習曲線: {out / "learning_curve.csv"}（{len(result.curve)} 行）')
    if result.checkpoints:
        print(f'最終チェックポイント: {result.checkpoints[-1]}')
    print(BANNER)
    return EXIT_OK


def checkpoint_map(paths: Sequence[str]) -> Dict[str, str]:
    """チェックポイントのパスをエージェント種別ごとに振り分ける"""
    out: Dict[str, str] = {}
    for p in paths or []:
        kind = load_checkpoint(p)['kind']
        out[kind] = p
    return out


def cmd_evaluate(args: argparse.Namespace, registry: Optional[RunRegistry]) -> int:
    cfg = resolve_config(args)
    methods = [m.strip().lower() for m in args.methods.split(',') if m.strip()] if args.methods \
        else list(cfg.evaluate_methods)
    if not methods:
        raise ConfigError('評価する手法を1つ以上指定してください')
    for m in methods:
        if m not in VALID_POLICIES:
            raise ConfigError(f"不明なポリシー '{m}' です。有効なポリシー: {', '.join(VALID_POLICIES)}")
    checkpoints = checkpoint_map(args.checkpoint)
    missing = [m for m in methods if m in AGENT_KINDS and m not in checkpoints]
    if missing:
        raise ConfigError(f"{', '.join(missing)} のチェックポイントがありません（--checkpoint で指定してください）")
    if args.rates:
        rates: List[Optional[float]] = [float(r) for r in args.rates.split(',') if r.strip()]
    elif cfg.evaluate_rates:
        rates = list(cfg.evaluate_rates)
    else:
        rates = [None]
    out = prepare_output(Path(cfg.output_dir), args.force)

    jobs = [RunJob(cfg, m, seed, rate, checkpoints.get(m)) for m in methods for rate in rates for seed in cfg.seeds]
    print(BANNER)
    print(f'評価: 手法 {len(methods)} × 到着率 {len(rates)} × シード {len(cfg.seeds)} = {len(jobs)} 本')
    print(BANNER)

    results = run_jobs(jobs, args.jobs)
    grouped: Dict[tuple, List[EpisodeResult]] = {}
    for job, result in zip(jobs, results):
        rate = job.rate if job.rate is not None else nominal_rate(cfg)
        grouped.setdefault((job.policy, rate), []).append(result)
        run_dir = out / job.policy / f'rate-{rate:g}' / f'seed-{job.seed}'
        write_run(run_dir, job_scenario(job), result)
        _record(registry, 'evaluate', cfg, job.policy, result, run_dir, rate)

    rows = comparison_rows(grouped)
    write_comparison(out / 'comparison.csv', rows)
    write_aggregate_cdf(out / 'aggregate_cdf.csv', grouped)
    print_table(rows)
    print(BANNER)
    print(f'比較表: {out / "comparison.csv"}')
    return EXIT_OK


def cmd_bench_decision(args: argparse.Namespace, registry: Optional[RunRegistry]) -> int:
    policies = [p.strip().lower() for p in args.policies.split(',')] if args.policies \
        else list(HEURISTIC_POLICIES) + ['rl']
    print(BANNER)
    print(f'振り分け判断のベンチマーク（サーバー {args.n} 台、{args.calls:,} 回）')
    print(BANNER)
    for name in policies:
        if name not in HEURISTIC_POLICIES + ('rl',):
            raise ConfigError(f"不明なポリシー '{name}' です。有効なポリシー: {', '.join(HEURISTIC_POLICIES)}, rl")
        b = bench_choose_server(PolicyKind.from_name(name), args.n, args.calls, args.seed)
        print(f'{name:<6} {b.ns_per_decision:>10.1f} ns/判断  {b.decisions_per_second:>14,.0f} 判断/秒')
    print(BANNER)
    return EXIT_OK


def cmd_gen_trace(args: argparse.Namespace, registry: Optional[RunRegistry]) -> int:
    cfg = resolve_config(args)
    if args.duration is not None:
        cfg.episode_length = args.duration
    if cfg.traffic.kind == 'trace':
        raise ConfigError('gen-trace は traffic.kind が poisson または two_class のシナリオで使ってください')
    path = Path(args.output)
    if path.exists() and not args.force:
        raise ConfigError(f'出力先 {path} は既に存在します。上書きする場合は --force を指定してください')
    path.parent.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]
    trace = generate_trace(TrafficModel.from_scenario(cfg), make_rng(seed, 'arrivals'), make_rng(seed, 'workloads'))
    save_trace(trace, path)
    print(BANNER)
    print(f'トレースを書き出しました: {path}（{len(trace)} フロー、{cfg.episode_length:g} 秒）')
    print(BANNER)
    return EXIT_OK


def cmd_list_runs(args: argparse.Namespace, registry: Optional[RunRegistry]) -> int:
    if registry is None:
        raise ConfigError('実行記録データベースが設定されていません（--registry または LBSIM_DATABASE_URL）')
    runs = registry.list_runs(args.run_command, args.limit)
    print(BANNER)
    if not runs:
        print('記録された実行はありません')
    for r in runs:
        print(f"#{r['id']:<5} {r['created_at'][:19]}  {r['command']:<9} {r['policy']:<6} seed {r['seed']:<4}"
              f" 平均FCT {_fmt(r['mean_fct'])}  {r['output_dir']}")
    print(BANNER)
    return EXIT_OK


COMMANDS = {
    'simulate': cmd_simulate,
    'train': cmd_train,
    'evaluate': cmd_evaluate,
    'bench-decision': cmd_bench_decision,
    'gen-trace': cmd_gen_trace,
    'list-runs': cmd_list_runs,
}


def _scenario_args(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument('--config', help='シナリオ設定ファイル（INI）')
    p.add_argument('--preset', help='プリセット名（moderate / large）')
    p.add_argument('--seed', type=int, help='シード（1つ）')
    p.add_argument('--seeds', help="シード（'1..5' または '1,2,3'）")
    p.add_argument('--rate', type=float, help='到着率（フロー/秒）')
    if out:
        p.add_argument('--out', help='出力ディレクトリ')
        p.add_argument('--force', action='store_true', help='既存の出力先を上書きする')
    p.add_argument('--jobs', type=int, default=1, help='並列実行数')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='lbsim', description='データセンター向けロードバランサー・シミュレーター')
    parser.add_argument('--log-level', default=None, help='ログレベル（既定: LBSIM_LOG_LEVEL または INFO）')
    parser.add_argument('--registry', default=None, help='実行記録データベースURL（既定: LBSIM_DATABASE_URL）')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', help='シミュレーションを実行')
    _scenario_args(p)
    p.add_argument('--policy', help=f"ポリシー（{', '.join(VALID_POLICIES)}）")
    p.add_argument('--checkpoint', help='学習済みエージェントのチェックポイント')

    p = sub.add_parser('train', help='エージェントを学習')
    _scenario_args(p)
    p.add_argument('--agent', help=f"エージェント種別（{', '.join(AGENT_KINDS)}）")
    p.add_argument('--episodes', type=int, help='エピソード数')
    p.add_argument('--resume', help='再開するチェックポイント')

    p = sub.add_parser('evaluate', help='手法を比較評価')
    _scenario_args(p)
    p.add_argument('--methods', help='手法（カンマ区切り）')
    p.add_argument('--rates', help='到着率（カンマ区切り）')
    p.add_argument('--checkpoint', action='append', default=[], help='学習済みチェックポイント（複数指定可）')

    p = sub.add_parser('bench-decision', help='振り分け判断のベンチマーク')
    p.add_argument('--n', type=int, default=24, help='サーバー台数')
    p.add_argument('--calls', type=int, default=1_000_000, help='呼び出し回数')
    p.add_argument('--policies', help='ポリシー（カンマ区切り）')
    p.add_argument('--seed', type=int, default=0)

    p = sub.add_parser('gen-trace', help='合成トレースを生成')
    _scenario_args(p, out=False)
    p.add_argument('--duration', type=float, help='トレースの長さ（秒）')
    p.add_argument('--output', required=True, help='書き出すCSVファイル')
    p.add_argument('--force', action='store_true', help='既存のファイルを上書きする')

    p = sub.add_parser('list-runs', help='実行記録を一覧表示')
    p.add_argument('--command', dest='run_command', help='コマンドで絞り込む')
    p.add_argument('--limit', type=int, default=50)
    return parser


def setup_logging(level: Optional[str]) -> None:
    level = (level or env_settings()['log_level'] or 'INFO').upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """メイン処理"""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        registry = registry_from_env(args.registry)
        return COMMANDS[args.command](args, registry)
    except ConfigError as e:
        print(f'設定エラー: {e}', file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, OSError, ValueError) as e:
        print(f'実行エラー: {e}', file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
