"""Experiment kinds and the run-directory contract.

Every kind returns a summary dict; the runner persists the config snapshot,
CSVs, summary.json, report.txt and the run log, and leaves a FAILED marker
behind when a run aborts. A summary's `checks` map holds the pass/fail
outcome of each property the kind verifies.
"""

import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import tqdm
from scipy.stats import wilcoxon

from .clock import Clock
from .config import RunConfig
from .detector import ForgedScene, LocalDetectorHandle, SyntheticDetector, amplify
from .errors import ConfigError, StatisticsError
from .evasion import (EvasionConfig, EvasionTrace, budget_curve, detected_copies, run_decision_baseline,
                      run_timing_attack)
from .inference import (fn_rate_bound, fp_bound_curve, run_inference, sample_frame,
                        validate_theorem_monte_carlo)
from .logger import logger, nmsleak_logger
from .measurement import (calibrate_neural_model, calibration_sizes_for, default_calibration_sizes,
                          estimate_nms_time, leakage_table, measure_scenes, spearman)
from .noise import NoiseSpec
from .service import RemoteDetectorHandle, serve

disable_tqdm = not sys.stdout.isatty()

# tolerance for correlation orderings that sit at the tie ceiling
RHO_TOLERANCE = 1e-9


class ExperimentRunner:

    def __init__(self, run: RunConfig, plots: bool = False):
        self.run = run
        self.plots = plots
        self.out = run.output_dir
        self.csv_files: List[Path] = []

    # --- persistence ------------------------------------------------------------------

    def write_csv(self, df: pd.DataFrame, name: str) -> Path:
        path = self.out / name
        df.to_csv(path, index=False)
        self.csv_files.append(path)
        return path

    def write_jsonl(self, records: Sequence[Dict[str, Any]], name: str) -> Path:
        path = self.out / name
        with open(path, 'w') as handle:
            for record in records:
                handle.write(json.dumps(record, sort_keys=True) + '\n')
        return path

    def digests(self) -> Dict[str, str]:
        return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in self.csv_files}

    def execute(self) -> Dict[str, Any]:
        self.out.mkdir(parents=True, exist_ok=True)
        failed_marker = self.out / 'FAILED'
        if failed_marker.exists():
            failed_marker.unlink()
        (self.out / 'config.yaml').write_text(self.run.snapshot())
        nmsleak_logger.attach_run_directory(self.out)
        logger.info(f"Running '{self.run.kind}' with master seed {self.run.seed} into {self.out}")
        try:
            summary = KINDS[self.run.kind](self)
            summary = {'kind': self.run.kind, 'seed': self.run.seed, **summary, 'digests': self.digests()}
            (self.out / 'summary.json').write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default))
            (self.out / 'report.txt').write_text(render_report(summary))
            if self.plots:
                from .plotting import PlotUtils
                PlotUtils(self.out).render(self.run.kind)
            return summary
        except BaseException as e:
            failed_marker.write_text(f"{type(e).__name__}: {e}\n")
            logger.exception(f"Run '{self.run.kind}' failed")
            raise
        finally:
            nmsleak_logger.detach_run_directory()

    # --- shared pieces ------------------------------------------------------------------

    def detector(self) -> SyntheticDetector:
        return self.run.detector()

    def clock(self, stream: str = 'clock') -> Clock:
        return Clock(self.run.clock_spec(stream))

    def scenes(self, stream: str, count: int, score_range=None, box_range=None,
               objects_range=(1, 1), detector: Optional[SyntheticDetector] = None) -> List[ForgedScene]:
        defaults = self.run.scene_settings()
        detector = detector or self.detector()
        return detector.random_scenes(
            self.run.streams.generator(stream),
            int(count),
            tuple(score_range or defaults.get('score_range', (0.65, 0.95))),
            tuple(box_range or defaults.get('box_range', (1, detector.cluster_capacity))),
            tuple(objects_range),
        )

    def gadgets(self) -> List[ForgedScene]:
        params = self.run.params
        return self.scenes('gadgets', params.get('gadgets', 30), params.get('score_range'), params.get('box_range'))

    def loopback(self, detector: SyntheticDetector, stream: str = 'clock'):
        jitter = NoiseSpec.from_dict(self.run.params.get('jitter'))
        return serve(detector, host='127.0.0.1', port=0, clock_spec=self.run.clock_spec(stream),
                     jitter=jitter, jitter_seed=self.run.streams.seed(f'{stream}-jitter'))


def _json_default(value):
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def render_report(summary: Dict[str, Any]) -> str:
    lines = [f"nmsleak run: {summary['kind']} (seed {summary['seed']})", '']
    for key in sorted(summary):
        if key in ('kind', 'seed', 'checks', 'digests'):
            continue
        lines.append(f"{key}: {summary[key]}")
    checks = summary.get('checks') or {}
    if checks:
        lines += ['', 'checks:']
        lines += [f"  [{'PASS' if ok else 'FAIL'}] {name}" for name, ok in sorted(checks.items())]
    lines += ['', 'outputs:']
    lines += [f"  {name}  sha256={digest}" for name, digest in sorted(summary.get('digests', {}).items())]
    return '\n'.join(lines) + '\n'


def _measure_remote(handle: RemoteDetectorHandle, reference: SyntheticDetector, scenes: Sequence[ForgedScene],
                    ks: Sequence[int], model) -> pd.DataFrame:
    """RTT-timed measurements; box counts and true NMS times come from a noiseless local replay."""
    truth_clock = Clock.noiseless()
    rows = []
    for k in ks:
        for scene in tqdm.tqdm(scenes, desc=f'Querying loopback (k={k})', unit='scenes', disable=disable_tqdm):
            amplified = amplify(scene.raster, k)
            _, truth = reference.detect(amplified, truth_clock)
            result = handle.query(amplified)
            rows.append({
                'scene_id': scene.scene_id, 'k': k, 'B': truth.box_count_B, 'o': truth.object_count_o,
                'comparisons': truth.comparison_count, 'neural_time': truth.neural_time,
                'nms_time': truth.nms_time, 'total_time': result.total_time,
                'estimated_nms_time': estimate_nms_time(model, result.total_time, amplified.pixel_count),
                'confidence': scene.target_score,
            })
    return pd.DataFrame(rows)


def _rho_or_nan(xs, ys) -> float:
    try:
        return spearman(xs, ys)
    except StatisticsError as e:
        logger.warning(f"Correlation undefined: {e}")
        return float('nan')


def _non_decreasing(values: Sequence[float]) -> List[bool]:
    return [b >= a - RHO_TOLERANCE for a, b in zip(values, values[1:])]


# --- kinds -------------------------------------------------------------------------


def run_profile(runner: ExperimentRunner) -> Dict[str, Any]:
    """Runtime against boxes per object and against object count, with the phase breakdown."""
    params = runner.run.params
    detector = runner.detector()
    scenes = runner.scenes('scenes', params.get('scenes', 300), objects_range=params.get('objects_range', (1, 4)),
                           detector=detector)
    measurements = measure_scenes(detector, scenes, [1], runner.clock())
    objects = {s.scene_id: s.n_objects for s in scenes}
    measurements.insert(1, 'n_objects', measurements['scene_id'].map(objects))
    runner.write_csv(measurements, 'profile.csv')

    single = measurements[measurements['n_objects'] == 1]
    per_size = measurements.groupby('n_objects')['neural_time']
    summary = {
        'scenes': len(scenes),
        'rho_boxes_time': _rho_or_nan(measurements['B'], measurements['nms_time']),
        'rho_objects_time': _rho_or_nan(measurements['o'], measurements['nms_time']),
        'rho_confidence_time': _rho_or_nan(measurements['confidence'], measurements['nms_time']),
        'neural_time_spread': float((per_size.std(ddof=0) / per_size.mean()).max()),
    }
    checks = {}
    if len(single) > 2 and single['B'].nunique() > 1:
        summary['rho_boxes_time_single_object'] = spearman(single['B'], single['nms_time'])
        checks['single_object_rho_at_least_0.8'] = summary['rho_boxes_time_single_object'] >= 0.8
    summary['checks'] = checks
    return summary


def run_amplify_sweep(runner: ExperimentRunner) -> Dict[str, Any]:
    """Leakage correlation per amplification factor, repeated over seeds."""
    params = runner.run.params
    ks = [int(k) for k in params.get('ks', (1, 3, 7))]
    n_seeds = int(params.get('seeds', 1))
    remote = params.get('transport', 'local') == 'loopback'
    detector = runner.detector()

    tables, all_measurements, local_tables = [], [], []
    for i in range(n_seeds):
        scenes = runner.scenes(f'scenes-{i}', params.get('scenes', 300), detector=detector)
        if remote:
            with runner.loopback(detector, f'clock-{i}') as service:
                handle = RemoteDetectorHandle(service.url)
                model = calibrate_neural_model(handle.query, calibration_sizes_for(scenes[0].raster, ks), progress=False)
                measurements = _measure_remote(handle, detector, scenes, ks, model)
                handle.close()
            local = leakage_table(measure_scenes(detector, scenes, ks, runner.clock(f'clock-{i}')))
            local.insert(0, 'seed', i)
            local_tables.append(local)
        else:
            measurements = measure_scenes(detector, scenes, ks, runner.clock(f'clock-{i}'))
        measurements.insert(0, 'seed', i)
        table = leakage_table(measurements)
        table.insert(0, 'seed', i)
        tables.append(table)
        all_measurements.append(measurements)

    table = pd.concat(tables, ignore_index=True)
    runner.write_csv(pd.concat(all_measurements, ignore_index=True), 'measurements.csv')
    runner.write_csv(table, 'leakage.csv')

    column = 'rho_estimated' if remote else 'rho_time'
    means = table.groupby('k')[column].mean()
    checks = {f"mean_rho_k{ks[0]}_at_least_0.8": bool(means.loc[ks[0]] >= 0.8)}
    for a, b in zip(ks, ks[1:]):
        ordered = [
            bool(table[(table.seed == i) & (table.k == b)][column].iloc[0]
                 >= table[(table.seed == i) & (table.k == a)][column].iloc[0] - RHO_TOLERANCE)
            for i in range(n_seeds)
        ]
        checks[f"rho_k{b}_ge_k{a}_in_80pct_of_seeds"] = sum(ordered) >= 0.8 * n_seeds
    summary = {
        'transport': 'loopback' if remote else 'local',
        'seeds': n_seeds,
        'mean_rho_by_k': {int(k): float(v) for k, v in means.items()},
        'checks': checks,
    }
    if remote:
        local = pd.concat(local_tables, ignore_index=True)
        runner.write_csv(local, 'leakage_local.csv')
        local_means = local.groupby('k')['rho_time'].mean()
        summary['local_mean_rho_by_k'] = {int(k): float(v) for k, v in local_means.items()}
        if 3 in ks:
            checks['remote_rho_within_0.1_of_local_k3'] = bool(abs(means.loc[3] - local_means.loc[3]) <= 0.1)
    return summary


def run_calibrate(runner: ExperimentRunner) -> Dict[str, Any]:
    """Fit the neural-runtime model on black rasters, then check the NMS estimates on random scenes."""
    params = runner.run.params
    detector = runner.detector()
    sizes = default_calibration_sizes(int(params.get('base', 416)), int(params.get('steps', 39)))
    remote = params.get('transport', 'local') == 'loopback'
    scenes = runner.scenes('scenes', params.get('scenes', 300), detector=detector)
    clock_spec = runner.run.clock_spec()

    if remote:
        with runner.loopback(detector) as service:
            handle = RemoteDetectorHandle(service.url)
            model = calibrate_neural_model(handle.query, sizes)
            measurements = _measure_remote(handle, detector, scenes, [1], model)
            handle.close()
    else:
        clock = Clock(clock_spec)
        model = calibrate_neural_model(LocalDetectorHandle(detector, clock).query, sizes)
        measurements = measure_scenes(detector, scenes, [1], clock, model)

    px, t = np.array(model.calibration_points, dtype=float).T
    runner.write_csv(pd.DataFrame({
        'height': [h for h, _ in sizes], 'width': [w for _, w in sizes], 'pixel_count': px.astype(int),
        'total_time': t, 'predicted': model.predict(px), 'residual': model.residuals,
    }), 'calibration.csv')
    runner.write_csv(measurements, 'estimates.csv')

    expected_intercept = detector.neural_cost_fixed + detector.nms_cost.fixed_cost
    slope_error = abs(model.slope_per_pixel - detector.neural_cost_per_pixel) / detector.neural_cost_per_pixel
    intercept_error = abs(model.intercept - expected_intercept) / expected_intercept
    rho = spearman(measurements['estimated_nms_time'], measurements['nms_time'])
    checks = {'rho_estimate_truth_at_least_0.95': rho >= 0.95}
    noiseless = clock_spec.noise.is_zero and clock_spec.jitter.is_zero and not remote
    if noiseless:
        checks['noiseless_recovery_within_1e-9'] = slope_error <= 1e-9 and intercept_error <= 1e-9
    if remote:
        checks['remote_slope_within_3se'] = bool(
            abs(model.slope_per_pixel - detector.neural_cost_per_pixel) <= 3 * model.slope_std_error
        )
    return {
        'transport': 'loopback' if remote else 'local',
        'model': model.to_dict(),
        'configured_slope_per_pixel': detector.neural_cost_per_pixel,
        'expected_intercept': expected_intercept,
        'slope_std_error': model.slope_std_error,
        'slope_relative_error': slope_error,
        'intercept_relative_error': intercept_error,
        'rho_estimate_truth': rho,
        'checks': checks,
    }


def _attack_all(runner: ExperimentRunner, gadgets: Sequence[ForgedScene], attack: Callable,
                cfg_for: Callable[[int], EvasionConfig], label: str, detector: SyntheticDetector,
                extra: Optional[Callable[[int, LocalDetectorHandle], Dict[str, Any]]] = None):
    rows, traces, trace_records = [], [], []
    for i, gadget in enumerate(tqdm.tqdm(gadgets, desc=f'{label} attacks', unit='gadgets', disable=disable_tqdm)):
        handle = LocalDetectorHandle(detector, runner.clock(f'clock-evade-{i}'))
        extra_fields = extra(i, handle) if extra else {}
        _, trace = attack(handle, gadget.raster, cfg_for(i))
        traces.append(trace)
        rows.append({'gadget': i, 'attack': trace.attack, 'target_score': gadget.target_score,
                     'n_boxes': gadget.n_boxes, **trace.summary(), **extra_fields})
        trace_records += [{'gadget': i, 'attack': trace.attack, **q} for q in trace.queries]
    return pd.DataFrame(rows), traces, trace_records


def _curves(traces: Sequence[EvasionTrace], label: str) -> pd.DataFrame:
    frames = []
    for metric in ('l2', 'mse', 'l_inf'):
        for scale in ('unit', 'byte'):
            curve = budget_curve(traces, metric, scale)
            curve.insert(0, 'attack', label)
            frames.append(curve)
    return pd.concat(frames, ignore_index=True)


def run_evade(runner: ExperimentRunner) -> Dict[str, Any]:
    """Timing attack over the gadget set, optionally grouped by detected amplified copies."""
    params = runner.run.params
    detector = runner.detector()
    gadgets = runner.gadgets()
    base = runner.run.evasion_config()
    seed_of = lambda i: runner.run.streams.seed(f'evade-{i}')  # noqa: E731

    results, traces, records = _attack_all(
        runner, gadgets, run_timing_attack,
        lambda i: EvasionConfig.from_dict({**base.to_dict(), 'rng_seed': seed_of(i)}), 'timing', detector,
    )
    runner.write_csv(results, 'evasion.csv')
    runner.write_csv(_curves(traces, 'timing'), 'budget_curves.csv')
    summary = {
        'gadgets': len(gadgets),
        'success_rate': float(results['success'].mean()),
        'median_l2': float(results['l2'].median()),
        'median_queries': float(results['query_count'].median()),
        'checks': {},
    }

    degradations = [float(d) for d in params.get('degradations') or []]
    if degradations:
        frames = []
        for d in degradations:
            cfg_for = lambda i, d=d: EvasionConfig.from_dict(  # noqa: E731
                {**base.to_dict(), 'rng_seed': seed_of(i), 'resize_back': True, 'degradation': d})
            copies = lambda i, handle, d=d: {  # noqa: E731
                'degradation': d,
                'amplified_copies': detected_copies(handle, gadgets[i].raster, base.amplification_k, d),
            }
            frame, more_traces, more_records = _attack_all(runner, gadgets, run_timing_attack, cfg_for,
                                                           f'timing (degradation {d})', detector, copies)
            records += more_records
            frames.append(frame)
        grouped = pd.concat(frames, ignore_index=True)
        runner.write_csv(grouped, 'amplification_success.csv')
        by_copies = grouped.groupby('amplified_copies')['l2'].mean().sort_index()
        summary['mean_l2_by_copies'] = {int(k): float(v) for k, v in by_copies.items()}
        summary['checks']['budget_non_increasing_in_copies'] = all(
            b <= a + RHO_TOLERANCE for a, b in zip(by_copies.values, by_copies.values[1:])
        )
    runner.write_jsonl(records, 'trace.jsonl')
    return summary


def run_evade_baseline(runner: ExperimentRunner) -> Dict[str, Any]:
    """Timing attack against the decision-only baseline on paired seeds and equal query budgets."""
    detector = runner.detector()
    gadgets = runner.gadgets()
    base = runner.run.evasion_config()
    budget = base.max_queries or 1 + base.max_iterations * (base.population_size + 2)
    cfg_for = lambda i: EvasionConfig.from_dict(  # noqa: E731
        {**base.to_dict(), 'rng_seed': runner.run.streams.seed(f'evade-{i}'), 'max_queries': budget})

    timing, timing_traces, timing_records = _attack_all(runner, gadgets, run_timing_attack, cfg_for, 'timing', detector)
    baseline, baseline_traces, baseline_records = _attack_all(runner, gadgets, run_decision_baseline, cfg_for,
                                                              'baseline', detector)
    results = pd.concat([timing, baseline], ignore_index=True)
    runner.write_csv(results, 'evasion.csv')
    runner.write_csv(pd.concat([_curves(timing_traces, 'timing'), _curves(baseline_traces, 'baseline')],
                               ignore_index=True), 'budget_curves.csv')
    runner.write_jsonl(timing_records + baseline_records, 'trace.jsonl')

    try:
        p_value = float(wilcoxon(timing['l2'], baseline['l2'], alternative='less').pvalue)
    except ValueError as e:
        logger.warning(f"Wilcoxon test unavailable: {e}")
        p_value = float('nan')
    summary = {
        'gadgets': len(gadgets),
        'query_budget': budget,
        'timing_median_l2': float(timing['l2'].median()),
        'baseline_median_l2': float(baseline['l2'].median()),
        'timing_success_rate': float(timing['success'].mean()),
        'baseline_success_rate': float(baseline['success'].mean()),
        'wilcoxon_p': p_value,
    }
    summary['checks'] = {
        'timing_median_l2_below_baseline': summary['timing_median_l2'] < summary['baseline_median_l2'],
        'wilcoxon_p_below_0.05': bool(p_value < 0.05),
        'timing_success_at_least_baseline': summary['timing_success_rate'] >= summary['baseline_success_rate'],
    }
    return summary


def run_lambda_sweep(runner: ExperimentRunner) -> Dict[str, Any]:
    """Timing attack budget for each step size over the same gadgets and seeds."""
    params = runner.run.params
    detector = runner.detector()
    gadgets = runner.gadgets()
    base = runner.run.evasion_config()
    lambdas = [float(x) for x in params.get('lambdas', (0.25, 0.5, 1.0, 2.0))]

    frames, curves, records = [], [], []
    for lam in lambdas:
        cfg_for = lambda i, lam=lam: EvasionConfig.from_dict(  # noqa: E731
            {**base.to_dict(), 'rng_seed': runner.run.streams.seed(f'evade-{i}'), 'step_size': lam})
        frame, traces, more_records = _attack_all(runner, gadgets, run_timing_attack, cfg_for, f'lambda {lam}', detector)
        frame.insert(0, 'step_size', lam)
        frames.append(frame)
        curve = _curves(traces, 'timing')
        curve.insert(0, 'step_size', lam)
        curves.append(curve)
        records += [{'step_size': lam, **r} for r in more_records]

    results = pd.concat(frames, ignore_index=True)
    runner.write_csv(results, 'lambda_sweep.csv')
    runner.write_csv(pd.concat(curves, ignore_index=True), 'budget_curves.csv')
    runner.write_jsonl(records, 'trace.jsonl')
    medians = results.groupby('step_size')['l2'].median().reindex(lambdas)
    ordered = _non_decreasing(list(medians.values))
    return {
        'gadgets': len(gadgets),
        'median_l2_by_lambda': {str(k): float(v) for k, v in medians.items()},
        'checks': {'median_budget_non_decreasing_in_lambda': all(ordered)},
    }


def run_infer_dataset(runner: ExperimentRunner) -> Dict[str, Any]:
    """End-to-end dataset inference with a member/nonmember gap injected through planted confidence."""
    params = runner.run.params
    detector = runner.detector()
    member_cfg = params.get('member') or {}
    nonmember_cfg = params.get('nonmember') or {}
    target_from = params.get('target_from', 'member')
    if target_from not in ('member', 'nonmember'):
        raise ConfigError('experiments.infer-dataset.target_from', f"must be member or nonmember, got '{target_from}'")
    target_cfg = {**(member_cfg if target_from == 'member' else nonmember_cfg), **(params.get('target') or {})}

    def draw(stream, cfg):
        return [s.raster for s in runner.scenes(stream, cfg.get('count', 200), cfg.get('score_range'),
                                                cfg.get('box_range'), detector=detector)]

    member, nonmember, target = draw('member', member_cfg), draw('nonmember', nonmember_cfg), draw('target', target_cfg)
    handle = LocalDetectorHandle(detector, runner.clock())
    result = run_inference(handle, member, nonmember, target, params.get('tau'), int(params.get('k', 5)))
    verdict = result.verdict
    runner.write_csv(sample_frame(result.sample_sets, verdict.tau), 'samples.csv')
    runner.write_csv(pd.DataFrame([verdict.to_dict()]), 'verdict.csv')
    fn_bound = None
    if verdict.mu_hat_m != verdict.mu_hat_nonm:
        try:
            fn_bound = fn_rate_bound(len(member), len(nonmember), len(target), verdict.mu_hat_m, verdict.mu_hat_nonm)
        except StatisticsError as e:
            logger.warning(f"False-negative bound unavailable: {e}")
    return {
        'verdict': verdict.to_dict(),
        'target_from': target_from,
        'neural_model': result.neural_model.to_dict(),
        'fn_bound_raw': fn_bound,
        'checks': {'decision_matches_target_source': verdict.decision == target_from},
    }


def run_fp_bound_curve(runner: ExperimentRunner) -> Dict[str, Any]:
    """False-positive bound against target-set size, plus a Monte Carlo check that the bound holds."""
    params = runner.run.params
    mu_m, mu_nonm = float(params.get('mu_m', 0.068)), float(params.get('mu_nonm', 0.029))
    n_member, n_nonmember = int(params.get('n_member', 2000)), int(params.get('n_nonmember', 2000))
    start, stop, step = params.get('n_targets', (50, 2000, 50))
    n_targets = list(range(int(start), int(stop) + 1, int(step)))

    curve = fp_bound_curve(n_member, n_nonmember, mu_m, mu_nonm, n_targets)
    curve['fn_bound_raw'] = [fn_rate_bound(n_member, n_nonmember, n, mu_m, mu_nonm) for n in n_targets]
    runner.write_csv(curve, 'fp_bound_curve.csv')

    mc = params.get('monte_carlo') or {}
    check = validate_theorem_monte_carlo(mu_m, mu_nonm, n_member, n_nonmember, int(mc.get('n_target', 500)),
                                         int(mc.get('trials', 10000)), runner.run.streams.generator('monte-carlo'))
    raw = curve['fp_bound_raw'].to_numpy()
    return {
        'mu_m': mu_m,
        'mu_nonm': mu_nonm,
        'h': abs(mu_m - mu_nonm) / 4.0,
        'monte_carlo': {
            'trials': check.trials, 'n_target': int(mc.get('n_target', 500)),
            'empirical_fp': check.empirical_fp, 'bound': check.bound,
            'event_trials': check.event_trials, 'implication_violations': check.implication_violations,
        },
        'checks': {
            'bound_strictly_decreasing': bool(np.all(np.diff(raw) < 0)),
            'empirical_fp_within_bound': check.empirical_fp <= check.bound,
            'theorem_implication_holds': check.implication_violations == 0,
        },
    }


def run_countermeasure_eval(runner: ExperimentRunner) -> Dict[str, Any]:
    """Leakage of greedy, constant-time and random-delay NMS on the same scenes."""
    params = runner.run.params
    detector = runner.detector()
    scenes = runner.scenes('scenes', params.get('scenes', 500), detector=detector)
    capacity = int(params.get('capacity', 64))
    variants = {
        'greedy': detector,
        'constant_time': detector.with_variant('constant_time', capacity=capacity),
        'random_delay': detector.with_variant('random_delay', delay=NoiseSpec.from_dict(params.get('delay'))),
    }
    model = calibrate_neural_model(LocalDetectorHandle(detector, runner.clock('clock-calibration')).query,
                                   calibration_sizes_for(scenes[0].raster, [1]), progress=False)
    frames, rhos = [], {}
    for name, variant in variants.items():
        measurements = measure_scenes(variant, scenes, [1], runner.clock(f'clock-{name}'), model)
        measurements.insert(0, 'variant', name)
        frames.append(measurements)
        rhos[name] = _rho_or_nan(measurements['B'], measurements['total_time'])
    runner.write_csv(pd.concat(frames, ignore_index=True), 'countermeasures.csv')

    noiseless = Clock.noiseless()
    identical = all(
        variants['greedy'].detect(s.raster, noiseless)[0] == variants['constant_time'].detect(s.raster, noiseless)[0]
        for s in scenes
    )
    return {
        'scenes': len(scenes),
        'capacity': capacity,
        'rho_boxes_time': rhos,
        'checks': {
            'constant_time_abs_rho_below_0.1': abs(rhos['constant_time']) < 0.1,
            'constant_time_detections_identical': identical,
        },
    }


def run_serve(runner: ExperimentRunner) -> Dict[str, Any]:
    """Serve the configured detector until interrupted."""
    params = runner.run.params
    detector = runner.detector()
    service = serve(
        detector,
        host=params.get('host'),
        port=params.get('port'),
        clock_spec=runner.run.clock_spec(),
        jitter=NoiseSpec.from_dict(params.get('jitter')),
        jitter_seed=runner.run.streams.seed('service-jitter'),
        serial=bool(params.get('serial', True)),
        max_concurrency=int(params.get('max_concurrency', 4)),
    )
    print(f"Serving POST {service.url}/detect (Ctrl-C to stop)")
    started = time.monotonic()
    try:
        service.wait()
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
    return {'url': service.url, 'uptime_seconds': round(time.monotonic() - started, 3), 'checks': {}}


KINDS: Dict[str, Callable[[ExperimentRunner], Dict[str, Any]]] = {
    'profile': run_profile,
    'amplify-sweep': run_amplify_sweep,
    'calibrate': run_calibrate,
    'evade': run_evade,
    'evade-baseline': run_evade_baseline,
    'lambda-sweep': run_lambda_sweep,
    'infer-dataset': run_infer_dataset,
    'fp-bound-curve': run_fp_bound_curve,
    'countermeasure-eval': run_countermeasure_eval,
    'serve': run_serve,
}


def run(config: RunConfig, plots: bool = False) -> Path:
    """Execute one experiment and return its run directory."""
    ExperimentRunner(config, plots).execute()
    return config.output_dir
