"""Timing-only dataset inference.

The attacker times three sets of inputs, a known-member set, a known-nonmember
set and the target set, and reduces each to the fraction of estimated NMS
runtimes at or above a threshold tau. The target is called a member when its
fraction is strictly closer to the member fraction.

The false-positive analysis bounds, with two-sided Chernoff bounds and a
union bound, the probability that any of the three sample fractions strays
more than h = |mu_m - mu_nonm| / 4 from its population mean. If none does,
the nearest-mean rule cannot call a nonmember target a member.
"""

import math
import sys
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import tqdm

from .detector import amplify
from .errors import StatisticsError
from .evasion import DetectorHandle
from .logger import logger
from .measurement import NeuralRuntimeModel, calibrate_neural_model, calibration_sizes_for, estimate_nms_time
from .raster import Raster

disable_tqdm = not sys.stdout.isatty()

LABELS = ('member', 'nonmember', 'target')


@dataclass(frozen=True)
class RuntimeSampleSet:
    label: str
    samples: Tuple[float, ...]
    source: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.label not in LABELS:
            raise StatisticsError(f"label must be one of {LABELS}, got '{self.label}'")
        object.__setattr__(self, 'samples', tuple(float(s) for s in self.samples))
        if not self.samples:
            raise StatisticsError(f"{self.label} sample set is empty")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class IndicatorSummary:
    tau: float
    mu_hat: float
    n: int

    @property
    def count(self) -> int:
        return int(round(self.mu_hat * self.n))


@dataclass(frozen=True)
class InferenceVerdict:
    decision: str
    mu_hat_m: float
    mu_hat_nonm: float
    mu_hat_target: float
    h: float
    fp_bound: float
    tau: float
    fp_bound_raw: float = float('nan')

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def summarize(samples: RuntimeSampleSet, tau: float) -> IndicatorSummary:
    """mu_hat = fraction of samples >= tau."""
    if tau <= 0:
        raise StatisticsError(f"tau must be positive, got {tau}")
    values = np.asarray(samples.samples, dtype=float)
    if values.size == 0:
        raise StatisticsError('cannot summarize an empty sample set')
    return IndicatorSummary(tau=float(tau), mu_hat=float(np.mean(values >= tau)), n=int(values.size))


def chernoff_two_sided(mu: float, delta: float) -> float:
    """2 exp(-mu delta^2 / 3), the two-sided multiplicative Chernoff bound for 0 <= delta <= 1."""
    if mu <= 0:
        raise StatisticsError(f"mu must be positive, got {mu}")
    if not (0.0 <= delta <= 1.0):
        raise StatisticsError(f"Chernoff bound is only stated for 0 <= delta <= 1, got {delta}")
    return 2.0 * math.exp(-mu * delta ** 2 / 3.0)


def _deviation_term(n: int, mean: float, h: float) -> float:
    # a point mass at 0 never deviates, and delta = h / 0 is meaningless
    if mean == 0.0:
        return 0.0
    return chernoff_two_sided(n * mean, h / mean)


def _check_bound_inputs(n_member: int, n_nonmember: int, n_target: int, mu_m: float, mu_nonm: float) -> None:
    if min(n_member, n_nonmember, n_target) < 1:
        raise StatisticsError('all sample counts must be >= 1')
    if not (0.0 <= mu_m <= 1.0 and 0.0 <= mu_nonm <= 1.0):
        raise StatisticsError(f"indicator means must lie in [0, 1], got {mu_m} and {mu_nonm}")
    if mu_m == mu_nonm:
        raise StatisticsError('member and nonmember indicator means must differ')


def fp_rate_bound(n_member: int, n_nonmember: int, n_target: int,
                  mu_m: float, mu_nonm: float, clamp: bool = False) -> float:
    """Union bound on a nonmember target being called a member.

    Sum of three Chernoff terms, for the member reference fraction, the
    nonmember reference fraction and the target fraction (drawn from the
    nonmember population) straying more than h from their means. The raw sum
    can exceed 1; `clamp` caps it for display.

    Raises:
        StatisticsError: equal means, zero counts, or a delta = h / mean above 1.
    """
    _check_bound_inputs(n_member, n_nonmember, n_target, mu_m, mu_nonm)
    h = abs(mu_m - mu_nonm) / 4.0
    raw = (_deviation_term(n_member, mu_m, h)
           + _deviation_term(n_nonmember, mu_nonm, h)
           + _deviation_term(n_target, mu_nonm, h))
    return min(1.0, raw) if clamp else raw


def fn_rate_bound(n_member: int, n_nonmember: int, n_target: int,
                  mu_m: float, mu_nonm: float, clamp: bool = False) -> float:
    """Union bound on a member target being called a nonmember: roles swapped."""
    return fp_rate_bound(n_nonmember, n_member, n_target, mu_nonm, mu_m, clamp=clamp)


def fp_bound_curve(n_member: int, n_nonmember: int, mu_m: float, mu_nonm: float,
                   n_targets: Sequence[int]) -> pd.DataFrame:
    rows = []
    for n_target in n_targets:
        raw = fp_rate_bound(n_member, n_nonmember, int(n_target), mu_m, mu_nonm)
        rows.append({'n_target': int(n_target), 'fp_bound_raw': raw, 'fp_bound': min(1.0, raw)})
    return pd.DataFrame(rows, columns=['n_target', 'fp_bound_raw', 'fp_bound'])


def decide(member: IndicatorSummary, nonmember: IndicatorSummary, target: IndicatorSummary) -> InferenceVerdict:
    """Nearest-mean rule; ties go to nonmember."""
    if not (member.tau == nonmember.tau == target.tau):
        raise StatisticsError(
            f"summaries use different thresholds: {member.tau}, {nonmember.tau}, {target.tau}"
        )
    closer_to_member = abs(target.mu_hat - member.mu_hat) < abs(target.mu_hat - nonmember.mu_hat)
    h = abs(member.mu_hat - nonmember.mu_hat) / 4.0
    try:
        raw = fp_rate_bound(member.n, nonmember.n, target.n, member.mu_hat, nonmember.mu_hat)
    except StatisticsError as e:
        logger.warning(f"False-positive bound unavailable ({e}); reporting the vacuous bound")
        raw = 2.0
    return InferenceVerdict(
        decision='member' if closer_to_member else 'nonmember',
        mu_hat_m=member.mu_hat,
        mu_hat_nonm=nonmember.mu_hat,
        mu_hat_target=target.mu_hat,
        h=h,
        fp_bound=min(1.0, raw),
        tau=member.tau,
        fp_bound_raw=raw,
    )


@dataclass(frozen=True)
class TheoremCheck:
    empirical_fp: float
    bound: float
    trials: int
    event_trials: int
    implication_violations: int

    def __iter__(self):
        return iter((self.empirical_fp, self.bound))


def validate_theorem_monte_carlo(mu_m: float, mu_nonm: float, n_member: int, n_nonmember: int,
                                 n_target: int, trials: int = 10000,
                                 rng: Optional[np.random.Generator] = None) -> TheoremCheck:
    """Simulate Bernoulli sample sets with a nonmember target and apply the rule.

    Returns the empirical false-positive rate with the analytic bound, and
    checks on every trial where all three deviation events stay within h that
    the target fraction is no farther from the nonmember fraction than from
    the member fraction.

    Raises:
        StatisticsError: fewer than 1000 trials, bad parameters, an empirical
            rate above the bound, or a trial violating the implication.
    """
    if trials < 1000:
        raise StatisticsError(f"need at least 1000 trials, got {trials}")
    _check_bound_inputs(n_member, n_nonmember, n_target, mu_m, mu_nonm)
    rng = rng if rng is not None else np.random.default_rng(0)
    bound = fp_rate_bound(n_member, n_nonmember, n_target, mu_m, mu_nonm)
    h = abs(mu_m - mu_nonm) / 4.0

    m_hat = rng.binomial(n_member, mu_m, size=trials) / n_member
    nonm_hat = rng.binomial(n_nonmember, mu_nonm, size=trials) / n_nonmember
    t_hat = rng.binomial(n_target, mu_nonm, size=trials) / n_target

    false_positive = np.abs(t_hat - m_hat) < np.abs(t_hat - nonm_hat)
    empirical = float(np.mean(false_positive))

    events = ((np.abs(m_hat - mu_m) <= h)
              & (np.abs(nonm_hat - mu_nonm) <= h)
              & (np.abs(t_hat - mu_nonm) <= h))
    # small slack for the float rounding of n-ths
    violates = events & (np.abs(t_hat - nonm_hat) > np.abs(t_hat - m_hat) + 1e-12)
    violations = int(np.sum(violates))

    logger.info(f"Monte Carlo over {trials} trials: empirical fp {empirical:.4f}, bound {bound:.4f}")
    if violations:
        raise StatisticsError(f"{violations} trials satisfied every deviation event yet violated the implication")
    if empirical > bound:
        raise StatisticsError(f"empirical false-positive rate {empirical:.4f} exceeds the bound {bound:.4f}")
    return TheoremCheck(empirical, bound, trials, int(np.sum(events)), violations)


def choose_tau_by_valley(member: Sequence[float], nonmember: Sequence[float], bins: int = 30) -> float:
    """Threshold at the emptiest histogram bin between the member and nonmember modes.

    When the modes share a bin or sit in neighbouring bins there is no valley;
    the threshold then maximizes the gap between the two indicator means over
    the observed runtimes.
    """
    member = np.asarray(member, dtype=float)
    nonmember = np.asarray(nonmember, dtype=float)
    if member.size == 0 or nonmember.size == 0:
        raise StatisticsError('both sample sets must be non-empty')
    pooled = np.concatenate([member, nonmember])
    edges = np.histogram_bin_edges(pooled, bins=bins)
    m_counts, _ = np.histogram(member, bins=edges)
    n_counts, _ = np.histogram(nonmember, bins=edges)
    lo, hi = sorted((int(np.argmax(m_counts)), int(np.argmax(n_counts))))
    if hi - lo >= 2:
        between = (m_counts + n_counts)[lo + 1:hi]
        valley = lo + 1 + int(np.argmin(between))
        tau = float(edges[valley])
    else:
        candidates = np.unique(pooled)
        gaps = [abs(np.mean(member >= c) - np.mean(nonmember >= c)) for c in candidates]
        tau = float(candidates[int(np.argmax(gaps))])
    if tau <= 0:
        tau = float(np.min(pooled[pooled > 0])) if np.any(pooled > 0) else 1e-9
    logger.info(f"Chose indicator threshold tau = {tau:.6e} s")
    return tau


def estimate_runtimes(handle: DetectorHandle, rasters: Sequence[Raster], label: str,
                      model: NeuralRuntimeModel, k: int = 5) -> RuntimeSampleSet:
    """Amplify, query and turn each total time into an NMS-time estimate."""
    samples = []
    for raster in tqdm.tqdm(rasters, desc=f'Timing {label} set', unit='rasters', disable=disable_tqdm):
        amplified = amplify(raster, k)
        result = handle.query(amplified)
        samples.append(estimate_nms_time(model, result.total_time, amplified.pixel_count))
    return RuntimeSampleSet(label, samples, {'k': k, 'count': len(rasters)})


def sample_frame(sets: Sequence[RuntimeSampleSet], tau: float) -> pd.DataFrame:
    rows = [
        {'set': s.label, 'runtime': value, 'indicator': int(value >= tau)}
        for s in sets for value in s.samples
    ]
    return pd.DataFrame(rows, columns=['set', 'runtime', 'indicator'])


@dataclass(frozen=True)
class InferenceRun:
    verdict: InferenceVerdict
    sample_sets: Tuple[RuntimeSampleSet, ...]
    neural_model: NeuralRuntimeModel


def run_inference(handle: DetectorHandle,
                  member: Sequence[Raster],
                  nonmember: Sequence[Raster],
                  target: Sequence[Raster],
                  tau: Optional[float] = None,
                  k: int = 5,
                  neural_model: Optional[NeuralRuntimeModel] = None) -> InferenceRun:
    """Amplify k x k, query, estimate NMS runtimes, summarize at tau and decide.

    Without a calibrated `neural_model` one is fitted first on all-black rasters
    around the amplified size. Without `tau` the histogram valley between the
    member and nonmember runtimes is used.
    """
    if not member or not nonmember or not target:
        raise StatisticsError('member, nonmember and target sets must all be non-empty')
    if neural_model is None:
        neural_model = calibrate_neural_model(handle.query, calibration_sizes_for(member[0], [k]), progress=False)

    member_set = estimate_runtimes(handle, member, 'member', neural_model, k)
    nonmember_set = estimate_runtimes(handle, nonmember, 'nonmember', neural_model, k)
    target_set = estimate_runtimes(handle, target, 'target', neural_model, k)

    if tau is None:
        tau = choose_tau_by_valley(member_set.samples, nonmember_set.samples)
    verdict = decide(summarize(member_set, tau), summarize(nonmember_set, tau), summarize(target_set, tau))
    logger.info(
        f"Verdict: {verdict.decision} (mu_m = {verdict.mu_hat_m:.4f}, mu_nonm = {verdict.mu_hat_nonm:.4f}, "
        f"mu_T = {verdict.mu_hat_target:.4f}, bound = {verdict.fp_bound:.4f})"
    )
    return InferenceRun(verdict, (member_set, nonmember_set, target_set), neural_model)


def end_to_end_inference(handle: DetectorHandle,
                         member: Sequence[Raster],
                         nonmember: Sequence[Raster],
                         target: Sequence[Raster],
                         tau: Optional[float] = None,
                         k: int = 5,
                         neural_model: Optional[NeuralRuntimeModel] = None) -> InferenceVerdict:
    return run_inference(handle, member, nonmember, target, tau, k, neural_model).verdict
