import json

import pandas as pd
import pytest

from nmsleak.cli import EXIT_CHECKS, EXIT_CONFIG, EXIT_OK, main
from nmsleak.config import RunConfig
from nmsleak.experiments import ExperimentRunner

FP_CURVE = ['experiments.fp-bound-curve.n_targets=[50, 400, 50]',
            'experiments.fp-bound-curve.monte_carlo.trials=1000']


def execute(kind, tmp_path, overrides=(), seed=0, name=None):
    run = RunConfig.from_sources(kind, overrides=list(overrides), seed=seed, output_dir=tmp_path / (name or kind))
    return ExperimentRunner(run).execute(), run.output_dir


def test_fp_bound_curve_run_directory(tmp_path):
    summary, out = execute('fp-bound-curve', tmp_path, FP_CURVE)
    for name in ('config.yaml', 'fp_bound_curve.csv', 'summary.json', 'report.txt', 'nmsleak.log'):
        assert (out / name).exists(), name
    assert not (out / 'FAILED').exists()
    assert all(summary['checks'].values())
    curve = pd.read_csv(out / 'fp_bound_curve.csv')
    assert curve['n_target'].tolist() == list(range(50, 401, 50))
    assert json.loads((out / 'summary.json').read_text())['digests'] == summary['digests']
    assert '[PASS] bound_strictly_decreasing' in (out / 'report.txt').read_text()


def test_same_seed_gives_identical_outputs(tmp_path):
    overrides = ['experiments.profile.scenes=5']
    first, _ = execute('profile', tmp_path, overrides, seed=3, name='a')
    second, _ = execute('profile', tmp_path, overrides, seed=3, name='b')
    third, _ = execute('profile', tmp_path, overrides, seed=4, name='c')
    assert first['digests'] == second['digests']
    assert first['digests'] != third['digests']


def test_profile_columns(tmp_path):
    summary, out = execute('profile', tmp_path, ['experiments.profile.scenes=6'])
    frame = pd.read_csv(out / 'profile.csv')
    assert len(frame) == 6
    for column in ('n_objects', 'B', 'o', 'neural_time', 'nms_time', 'total_time', 'confidence'):
        assert column in frame
    assert (frame['B'] >= frame['o']).all()
    assert summary['scenes'] == 6


def test_noiseless_calibration_run(tmp_path):
    summary, out = execute('calibrate', tmp_path, [
        'clock.noise={family: none}',
        'experiments.calibrate.base=32',
        'experiments.calibrate.steps=3',
        'experiments.calibrate.scenes=5',
    ])
    assert summary['checks']['noiseless_recovery_within_1e-9']
    assert summary['checks']['rho_estimate_truth_at_least_0.95']
    assert len(pd.read_csv(out / 'calibration.csv')) == 6


def test_countermeasure_run(tmp_path):
    summary, out = execute('countermeasure-eval', tmp_path, ['experiments.countermeasure-eval.scenes=6'])
    assert summary['checks']['constant_time_detections_identical']
    frame = pd.read_csv(out / 'countermeasures.csv')
    assert sorted(frame['variant'].unique()) == ['constant_time', 'greedy', 'random_delay']
    assert frame[frame.variant == 'constant_time']['comparisons'].nunique() == 1


def test_evade_run_writes_traces(tmp_path):
    summary, out = execute('evade', tmp_path, [
        'experiments.evade.gadgets=2',
        'experiments.evade.evasion.max_iterations=2',
        'experiments.evade.evasion.population_size=4',
        'experiments.evade.evasion.amplification_k=2',
        'experiments.evade.degradations=[0.0, 1.0]',
    ])
    results = pd.read_csv(out / 'evasion.csv')
    assert len(results) == 2
    assert (results['query_count'] <= 1 + 2 * 6).all()
    assert (out / 'trace.jsonl').read_text().count('\n') > 0
    grouped = pd.read_csv(out / 'amplification_success.csv')
    assert set(grouped['degradation']) == {0.0, 1.0}
    assert set(grouped[grouped.degradation == 1.0]['amplified_copies']) == {4}
    assert set(grouped[grouped.degradation == 0.0]['amplified_copies']) == {1}
    assert 'budget_non_increasing_in_copies' in summary['checks']


def test_baseline_comparison_uses_equal_budgets(tmp_path):
    summary, out = execute('evade-baseline', tmp_path, [
        'experiments.evade-baseline.gadgets=3',
        'experiments.evade.evasion.max_iterations=2',
        'experiments.evade.evasion.population_size=4',
        'experiments.evade.evasion.amplification_k=1',
    ])
    results = pd.read_csv(out / 'evasion.csv')
    assert sorted(results['attack'].unique()) == ['baseline', 'timing']
    assert (results['query_count'] <= summary['query_budget']).all()


def test_inference_run(tmp_path):
    summary, out = execute('infer-dataset', tmp_path, [
        'experiments.infer-dataset.k=1',
        'experiments.infer-dataset.member.count=5',
        'experiments.infer-dataset.nonmember.count=5',
        'experiments.infer-dataset.target.count=5',
    ])
    samples = pd.read_csv(out / 'samples.csv')
    assert samples['set'].value_counts().to_dict() == {'member': 5, 'nonmember': 5, 'target': 5}
    assert summary['verdict']['decision'] in ('member', 'nonmember')


def test_failed_run_leaves_a_marker(tmp_path):
    run = RunConfig.from_sources('infer-dataset', overrides=['experiments.infer-dataset.target_from=both'],
                                 output_dir=tmp_path / 'failed')
    with pytest.raises(Exception):
        ExperimentRunner(run).execute()
    assert 'target_from' in (tmp_path / 'failed' / 'FAILED').read_text()


def test_cli_exit_codes(tmp_path):
    args = ['fp-bound-curve', '--out', str(tmp_path / 'ok')] + [a for o in FP_CURVE for a in ('--set', o)]
    assert main(args) == EXIT_OK
    assert main(['profile', '--set', 'colour=red', '--out', str(tmp_path / 'bad')]) == EXIT_CONFIG
    assert main(['infer-dataset', '--set', 'experiments.infer-dataset.target_from=both',
                 '--out', str(tmp_path / 'failed')]) == EXIT_CONFIG
    assert (tmp_path / 'failed' / 'FAILED').exists()


def test_cli_failed_checks_exit_code(tmp_path):
    # without timing noise the constant-time correlation is undefined, so its check fails
    assert main(['countermeasure-eval', '--set', 'experiments.countermeasure-eval.scenes=4',
                 '--set', 'clock.noise={family: none}', '--out', str(tmp_path / 'ct')]) == EXIT_CHECKS


def test_cli_plots(tmp_path):
    args = ['fp-bound-curve', '--plots', '--out', str(tmp_path / 'plots')] + [a for o in FP_CURVE for a in ('--set', o)]
    assert main(args) == EXIT_OK
    assert (tmp_path / 'plots' / 'plots' / 'fp_bound_curve.png').exists()


@pytest.mark.slow
def test_loopback_amplify_sweep(tmp_path):
    summary, out = execute('amplify-sweep', tmp_path, [
        'experiments.amplify-sweep.scenes=8',
        'experiments.amplify-sweep.ks=[1, 2]',
        'experiments.amplify-sweep.transport=loopback',
        'experiments.amplify-sweep.jitter={family: lognormal, median: 1.0e-4, sigma: 0.2}',
    ])
    table = pd.read_csv(out / 'leakage.csv')
    assert table['k'].tolist() == [1, 2]
    assert summary['transport'] == 'loopback'


@pytest.mark.slow
def test_loopback_amplify_sweep_tracks_local_leakage(tmp_path):
    summary, out = execute('amplify-sweep', tmp_path, [
        'experiments.amplify-sweep.scenes=20',
        'experiments.amplify-sweep.ks=[1, 3]',
        'experiments.amplify-sweep.transport=loopback',
        'experiments.amplify-sweep.jitter={family: lognormal, median: 1.0e-4, sigma: 0.2}',
    ])
    assert summary['checks']['remote_rho_within_0.1_of_local_k3']
    assert set(summary['local_mean_rho_by_k']) == {1, 3}
    assert pd.read_csv(out / 'leakage_local.csv')['k'].tolist() == [1, 3]


@pytest.mark.slow
def test_loopback_calibration_slope_within_three_standard_errors(tmp_path):
    summary, _ = execute('calibrate', tmp_path, [
        'experiments.calibrate.steps=10',
        'experiments.calibrate.scenes=5',
        'experiments.calibrate.transport=loopback',
        'experiments.calibrate.jitter={family: lognormal, median: 5.0e-3, sigma: 0.5}',
    ])
    assert summary['slope_std_error'] > 0
    assert summary['model']['n_points'] == 20
    assert summary['checks']['remote_slope_within_3se']
