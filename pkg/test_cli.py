"""
コマンドライン（main.py）のテスト
"""
import pytest

from conftest import make_scenario, small_agent
from main import EXIT_CONFIG, EXIT_OK, main
from results_io import read_table
from scenario_config import load_config, save_config
from traffic import load_trace


@pytest.fixture
def small_ini(tmp_path):
    """LB2台・2秒の小さなシナリオを書き出したINIファイル"""
    cfg = make_scenario(speeds=(1.0, 2.0, 2.0), workers=(1, 2, 2), lb_count=2, rate=8.0,
                        episode_length=2.0, agent=small_agent('qmix', episodes=1))
    path = tmp_path / 'small.ini'
    save_config(cfg, path)
    return path


def test_simulate_writes_run_per_seed(tmp_path, small_ini):
    out = tmp_path / 'out'
    code = main(['simulate', '--config', str(small_ini), '--policy', 'lsq', '--seeds', '1..2', '--out', str(out)])
    assert code == EXIT_OK
    for seed in (1, 2):
        assert (out / f'seed-{seed}' / 'flows.csv').exists()
    table = read_table(out / 'summary.csv')
    assert len(table) == 1 and table[0]['method'] == 'lsq' and table[0]['seeds'] == '2'


def test_parallel_jobs_match_sequential(tmp_path, small_ini):
    """--jobs で並列実行しても、シードごとの結果ファイルは逐次実行と同じ"""
    base = ['simulate', '--config', str(small_ini), '--policy', 'sed', '--seeds', '1..3']
    assert main(base + ['--out', str(tmp_path / 'seq')]) == EXIT_OK
    assert main(base + ['--jobs', '2', '--out', str(tmp_path / 'par')]) == EXIT_OK
    for seed in (1, 2, 3):
        for name in ('flows.csv', 'fairness.csv'):
            seq = (tmp_path / 'seq' / f'seed-{seed}' / name).read_bytes()
            assert seq == (tmp_path / 'par' / f'seed-{seed}' / name).read_bytes()


def test_existing_output_needs_force(tmp_path, small_ini):
    out = tmp_path / 'out'
    out.mkdir()
    args = ['simulate', '--config', str(small_ini), '--seed', '3', '--out', str(out)]
    assert main(args) == EXIT_CONFIG
    assert main(args + ['--force']) == EXIT_OK
    assert (out / 'seed-3').is_dir()


def test_unknown_policy_is_a_config_error(tmp_path, small_ini, capsys):
    code = main(['simulate', '--config', str(small_ini), '--policy', 'random', '--out', str(tmp_path / 'o')])
    assert code == EXIT_CONFIG
    assert '設定エラー' in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(['simulate', '--config', str(tmp_path / 'none.ini'), '--out', str(tmp_path / 'o')]) == EXIT_CONFIG


def test_agent_policy_needs_checkpoint(tmp_path, small_ini):
    assert main(['simulate', '--config', str(small_ini), '--policy', 'qmix',
                 '--out', str(tmp_path / 'o')]) == EXIT_CONFIG
    assert main(['evaluate', '--config', str(small_ini), '--methods', 'sed,isac',
                 '--out', str(tmp_path / 'e')]) == EXIT_CONFIG


def test_evaluate_with_empty_method_list(tmp_path, small_ini):
    assert main(['evaluate', '--config', str(small_ini), '--methods', ' , ',
                 '--out', str(tmp_path / 'e')]) == EXIT_CONFIG


def test_evaluate_builds_comparison(tmp_path, small_ini):
    out = tmp_path / 'eval'
    code = main(['evaluate', '--config', str(small_ini), '--methods', 'ecmp,sed', '--rates', '4,8',
                 '--seeds', '1,2', '--out', str(out)])
    assert code == EXIT_OK
    rows = read_table(out / 'comparison.csv')
    assert [(r['method'], float(r['rate'])) for r in rows] == [
        ('ecmp', 4.0), ('ecmp', 8.0), ('sed', 4.0), ('sed', 8.0)]
    assert (out / 'sed' / 'rate-8' / 'seed-2' / 'flows.csv').exists()
    assert (out / 'aggregate_cdf.csv').exists()


def test_train_then_evaluate_agent(tmp_path, small_ini):
    train_out = tmp_path / 'train'
    assert main(['train', '--config', str(small_ini), '--agent', 'qmix', '--seed', '1',
                 '--out', str(train_out)]) == EXIT_OK
    curve = read_table(train_out / 'learning_curve.csv')
    assert [r['episode'] for r in curve] == ['0']
    final = train_out / 'checkpoints' / 'final.pt'
    assert final.exists()

    out = tmp_path / 'eval'
    assert main(['evaluate', '--config', str(small_ini), '--methods', 'qmix,sed', '--seed', '5',
                 '--checkpoint', str(final), '--out', str(out)]) == EXIT_OK
    assert [r['method'] for r in read_table(out / 'comparison.csv')] == ['qmix', 'sed']
    # 評価に使ったチェックポイントは実行ディレクトリの設定に残る
    run_cfg = load_config(out / 'qmix' / 'rate-8' / 'seed-5' / 'scenario.ini')
    assert run_cfg.policy == 'qmix' and run_cfg.checkpoint == str(final)
    assert load_config(out / 'sed' / 'rate-8' / 'seed-5' / 'scenario.ini').checkpoint is None


def test_gen_trace(tmp_path, small_ini):
    path = tmp_path / 'traces' / 'poisson.csv'
    assert main(['gen-trace', '--config', str(small_ini), '--duration', '10', '--seed', '4',
                 '--output', str(path)]) == EXIT_OK
    trace = load_trace(path)
    assert len(trace) > 0
    assert trace.arrival_times[-1] < 10.0
    # 既存ファイルは --force なしでは上書きしない
    assert main(['gen-trace', '--config', str(small_ini), '--output', str(path)]) == EXIT_CONFIG


def test_bench_decision(capsys):
    assert main(['bench-decision', '--n', '8', '--calls', '2000', '--policies', 'ecmp,sed,rl']) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count('ns/判断') == 3


def test_bench_decision_unknown_policy():
    assert main(['bench-decision', '--calls', '10', '--policies', 'ecmp,fastest']) == EXIT_CONFIG


def test_runs_are_recorded_in_registry(tmp_path, small_ini, capsys, monkeypatch):
    monkeypatch.delenv('LBSIM_DATABASE_URL', raising=False)
    url = f'sqlite:///{tmp_path}/runs.db'
    assert main(['--registry', url, 'simulate', '--config', str(small_ini), '--seeds', '1,2',
                 '--out', str(tmp_path / 'o')]) == EXIT_OK
    capsys.readouterr()
    assert main(['--registry', url, 'list-runs', '--command', 'simulate']) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count('simulate') == 2


def test_list_runs_without_registry(monkeypatch):
    monkeypatch.delenv('LBSIM_DATABASE_URL', raising=False)
    assert main(['list-runs']) == EXIT_CONFIG
