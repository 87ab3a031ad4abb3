"""Timing-guided evolutionary evasion and its decision-only baseline.

Each iteration draws a population of random perturbations around the
current gadget, times the amplified gadget and every amplified member, and
moves the gadget along the fitness-weighted sum of the perturbations that
made NMS faster (fewer boxes) minus those that made it slower. The baseline
gets the same loop with only a detected / not-detected bit per member.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from .detector import QueryResult, amplify, attenuated_tiling
from .errors import ConfigError, InvalidRasterError
from .logger import logger
from .raster import Raster

PIXEL_MAX = 255.0
SCALES = ('unit', 'byte')


class DetectorHandle(Protocol):
    def query(self, raster: Raster) -> QueryResult:
        ...


@dataclass(frozen=True)
class EvasionConfig:
    """Attack parameters.

    `radius` is on the 0-255 scale; `step_size` is applied on the unit scale to
    the Frobenius-normalized mutation. `check_amplified` moves the
    not-detected check onto the amplified gadget. `max_queries` caps the total
    query count so two attacks can be compared at equal budgets.
    """
    population_size: int = 20
    radius: float = 25.0
    step_size: float = 0.5
    amplification_k: int = 3
    max_iterations: int = 500
    rng_seed: Optional[int] = 0
    clip_to_valid: bool = True
    check_amplified: bool = False
    resize_back: bool = False
    degradation: float = 1.0
    max_queries: Optional[int] = None

    def __post_init__(self):
        if self.population_size < 2:
            raise ConfigError('evasion.population_size', f"must be >= 2, got {self.population_size}")
        if self.radius <= 0:
            raise ConfigError('evasion.radius', f"must be positive, got {self.radius}")
        if self.step_size <= 0:
            raise ConfigError('evasion.step_size', f"must be positive, got {self.step_size}")
        if self.amplification_k < 1:
            raise ConfigError('evasion.amplification_k', f"must be >= 1, got {self.amplification_k}")
        if self.max_iterations < 1:
            raise ConfigError('evasion.max_iterations', f"must be >= 1, got {self.max_iterations}")
        if not (0.0 <= self.degradation <= 1.0):
            raise ConfigError('evasion.degradation', f"must lie in [0, 1], got {self.degradation}")
        if self.max_queries is not None and self.max_queries < 1:
            raise ConfigError('evasion.max_queries', f"must be >= 1, got {self.max_queries}")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> 'EvasionConfig':
        data = dict(data or {})
        if 'lambda' in data:
            data['step_size'] = data.pop('lambda')
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError('evasion', str(e)) from e

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class PerturbationReport:
    l2: float
    l_inf: float
    mse: float
    scale: str = 'unit'

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    gadget_id: str
    gadget_time: Optional[float]
    member_times: Tuple[float, ...]
    fitness: Tuple[float, ...]
    direction: Tuple[int, ...]
    mutation_norm: float
    detected: bool


@dataclass
class EvasionTrace:
    attack: str
    records: List[IterationRecord] = field(default_factory=list)
    queries: List[Dict[str, Any]] = field(default_factory=list)
    query_count: int = 0
    detected: bool = True
    unit_report: Optional[PerturbationReport] = None
    byte_report: Optional[PerturbationReport] = None
    amplified_copies: Optional[int] = None

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def success(self) -> bool:
        return not self.detected

    def log_query(self, iteration: int, member: Optional[int], result: QueryResult, kind: str) -> None:
        record = {
            'iteration': iteration,
            'member': member,
            'kind': kind,
            'time': result.total_time,
            'detected': result.detected,
        }
        self.query_count += 1
        self.queries.append(record)
        logger.debug(json.dumps(record))

    def summary(self) -> Dict[str, Any]:
        return {
            'attack': self.attack,
            'success': self.success,
            'iterations': self.iterations,
            'query_count': self.query_count,
            'amplified_copies': self.amplified_copies,
            'l2': self.unit_report.l2 if self.unit_report else None,
            'l_inf': self.unit_report.l_inf if self.unit_report else None,
            'mse': self.unit_report.mse if self.unit_report else None,
            'l2_byte': self.byte_report.l2 if self.byte_report else None,
            'l_inf_byte': self.byte_report.l_inf if self.byte_report else None,
            'mse_byte': self.byte_report.mse if self.byte_report else None,
        }


def snapshot_id(raster: Raster) -> str:
    return hashlib.sha256(raster.pixels.tobytes()).hexdigest()[:16]


def fitness_and_direction(gadget_time: float, member_times: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """fitness_j = |d_j| / sum |d|, direction_j = sign(-d_j), with d_j = member_j - gadget.

    All-equal times give all-zero fitness.
    """
    deltas = np.asarray(member_times, dtype=float) - float(gadget_time)
    total = np.sum(np.abs(deltas))
    direction = np.sign(-deltas).astype(int)
    if total == 0.0:
        return np.zeros_like(deltas), direction
    return np.abs(deltas) / total, direction


def breed(gadget: Raster, perturbations: Sequence[np.ndarray], fitness: Sequence[float],
          direction: Sequence[int], step_size: float, clip_to_valid: bool = True) -> Raster:
    """gadget + step_size * mutation / ||mutation||_F, mutation = sum(direction * fitness * pert).

    A zero mutation returns the gadget unchanged. Without `clip_to_valid`
    the result may leave [0, 1]; members drawn around it are still clipped.
    """
    mutation = np.zeros_like(gadget.pixels)
    for pert, f, d in zip(perturbations, fitness, direction):
        if f != 0.0 and d != 0:
            mutation += (d * f) * pert
    norm = np.linalg.norm(mutation)
    if norm == 0.0:
        return gadget
    bred = gadget.pixels + step_size * mutation / norm
    if clip_to_valid:
        return Raster.clipped(bred)
    return Raster.unbounded(bred)


def perturbation_metrics(original: Raster, adversarial: Raster, scale: str = 'unit') -> PerturbationReport:
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got '{scale}'")
    if original.shape != adversarial.shape:
        raise InvalidRasterError(f"Shape mismatch: {original.shape} vs {adversarial.shape}")
    diff = adversarial.pixels - original.pixels
    if scale == 'byte':
        diff = diff * PIXEL_MAX
    return PerturbationReport(
        l2=float(np.linalg.norm(diff)),
        l_inf=float(np.max(np.abs(diff))),
        mse=float(np.mean(diff ** 2)),
        scale=scale,
    )


def draw_perturbations(rng: np.random.Generator, shape: Tuple[int, ...], population_size: int,
                       radius: float) -> List[np.ndarray]:
    """i.i.d. uniform [-radius, radius] on the 0-255 scale, returned on the unit scale."""
    scale = radius / PIXEL_MAX
    return [rng.uniform(-1.0, 1.0, size=shape) * scale for _ in range(population_size)]


class _AttackRun:
    """Loop bookkeeping shared by both attacks."""

    def __init__(self, handle: DetectorHandle, gadget0: Raster, cfg: EvasionConfig, attack: str, k: int):
        self.handle = handle
        self.gadget0 = gadget0
        self.cfg = cfg
        self.k = k
        self.rng = np.random.default_rng(cfg.rng_seed)
        self.trace = EvasionTrace(attack=attack)

    def budget_left(self, needed: int = 1) -> bool:
        if self.cfg.max_queries is None:
            return True
        return self.trace.query_count + needed <= self.cfg.max_queries

    def amplified(self, raster: Raster) -> Raster:
        return amplify(raster, self.k, self.cfg.resize_back, self.cfg.degradation)

    def query(self, raster: Raster, iteration: int, member: Optional[int], kind: str) -> QueryResult:
        result = self.handle.query(raster)
        self.trace.log_query(iteration, member, result, kind)
        return result

    def still_detected(self, gadget: Raster, iteration: int) -> bool:
        target = self.amplified(gadget) if self.cfg.check_amplified else gadget
        return self.query(target, iteration, None, 'check').detected

    def member(self, gadget: Raster, pert: np.ndarray) -> Raster:
        return Raster.clipped(gadget.pixels + pert)

    def finish(self, gadget: Raster, detected: bool) -> Tuple[Raster, EvasionTrace]:
        self.trace.detected = detected
        self.trace.unit_report = perturbation_metrics(self.gadget0, gadget, 'unit')
        self.trace.byte_report = perturbation_metrics(self.gadget0, gadget, 'byte')
        status = 'evaded' if not detected else 'still detected'
        logger.info(
            f"{self.trace.attack} attack {status} after {self.trace.iterations} iterations, "
            f"{self.trace.query_count} queries, L2 = {self.trace.unit_report.l2:.4f}"
        )
        return gadget, self.trace


def run_timing_attack(handle: DetectorHandle, gadget0: Raster,
                      cfg: Optional[EvasionConfig] = None) -> Tuple[Raster, EvasionTrace]:
    """Evolve `gadget0` until the detector stops seeing it, guided by NMS time.

    Every iteration costs 1 detection check + 1 amplified gadget timing +
    population_size member timings, and the final successful check is one
    more query: query_count = 1 + iterations * (population_size + 2).

    Running out of iterations (or of `max_queries`) is not an error; the
    trace's `detected` flag stays true.
    """
    cfg = cfg or EvasionConfig()
    run = _AttackRun(handle, gadget0, cfg, 'timing', cfg.amplification_k)
    p = cfg.population_size
    gadget = gadget0

    for iteration in range(cfg.max_iterations):
        if not run.budget_left():
            return run.finish(gadget, True)
        if not run.still_detected(gadget, iteration):
            return run.finish(gadget, False)
        if not run.budget_left(p + 1):
            return run.finish(gadget, True)

        gadget_time = run.query(run.amplified(gadget), iteration, None, 'gadget').total_time
        perts = draw_perturbations(run.rng, gadget.shape, p, cfg.radius)
        member_times = [
            run.query(run.amplified(run.member(gadget, pert)), iteration, j, 'member').total_time
            for j, pert in enumerate(perts)
        ]
        fitness, direction = fitness_and_direction(gadget_time, member_times)
        bred = breed(gadget, perts, fitness, direction, cfg.step_size, cfg.clip_to_valid)
        mutation_norm = float(np.linalg.norm(bred.pixels - gadget.pixels))
        run.trace.records.append(IterationRecord(
            iteration=iteration,
            gadget_id=snapshot_id(gadget),
            gadget_time=gadget_time,
            member_times=tuple(member_times),
            fitness=tuple(fitness.tolist()),
            direction=tuple(direction.tolist()),
            mutation_norm=mutation_norm,
            detected=True,
        ))
        if mutation_norm == 0.0:
            logger.debug(f"Iteration {iteration}: no member changed the timing, gadget unchanged")
        gadget = bred

    if run.budget_left():
        detected = run.still_detected(gadget, cfg.max_iterations)
    else:
        detected = True
    return run.finish(gadget, detected)


def run_decision_baseline(handle: DetectorHandle, gadget0: Raster,
                          cfg: Optional[EvasionConfig] = None) -> Tuple[Raster, EvasionTrace]:
    """Same loop with fitness +1/p for undetected members and -1/p for detected ones.

    No amplification and no timing: query_count = 1 + iterations * (population_size + 1).
    """
    cfg = cfg or EvasionConfig()
    run = _AttackRun(handle, gadget0, cfg, 'baseline', 1)
    p = cfg.population_size
    gadget = gadget0

    for iteration in range(cfg.max_iterations):
        if not run.budget_left():
            return run.finish(gadget, True)
        if not run.query(gadget, iteration, None, 'check').detected:
            return run.finish(gadget, False)
        if not run.budget_left(p):
            return run.finish(gadget, True)

        perts = draw_perturbations(run.rng, gadget.shape, p, cfg.radius)
        member_detected = [
            run.query(run.member(gadget, pert), iteration, j, 'member').detected
            for j, pert in enumerate(perts)
        ]
        direction = np.array([-1 if d else 1 for d in member_detected])
        fitness = np.full(p, 1.0 / p)
        bred = breed(gadget, perts, fitness, direction, cfg.step_size, cfg.clip_to_valid)
        run.trace.records.append(IterationRecord(
            iteration=iteration,
            gadget_id=snapshot_id(gadget),
            gadget_time=None,
            member_times=(),
            fitness=tuple(fitness.tolist()),
            direction=tuple(direction.tolist()),
            mutation_norm=float(np.linalg.norm(bred.pixels - gadget.pixels)),
            detected=True,
        ))
        gadget = bred

    if run.budget_left():
        detected = run.query(gadget, cfg.max_iterations, None, 'check').detected
    else:
        detected = True
    return run.finish(gadget, detected)


def detected_copies(handle: DetectorHandle, gadget: Raster, k: int, degradation: float) -> int:
    """Copies of `gadget` still detected after the resampling loss of a k x k amplification.

    Counted on the attenuated tiling at tile resolution, before `amplify`
    resamples it back to the gadget's size.
    """
    return handle.query(attenuated_tiling(gadget, k, degradation)).object_count


def budget_curve(traces: Sequence[EvasionTrace], metric: str = 'l2', scale: str = 'unit',
                 budgets: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """Percent of runs evaded within each budget of `metric` (l2, l_inf or mse)."""
    if metric not in ('l2', 'l_inf', 'mse'):
        raise ValueError(f"Unknown metric '{metric}'")
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got '{scale}'")
    values = []
    for trace in traces:
        report = trace.unit_report if scale == 'unit' else trace.byte_report
        values.append(getattr(report, metric) if trace.success and report is not None else np.inf)
    values = np.array(values, dtype=float)
    if budgets is None:
        finite = values[np.isfinite(values)]
        top = float(finite.max()) if len(finite) else 1.0
        budgets = np.linspace(0.0, top, 50)
    budgets = np.asarray(budgets, dtype=float)
    n = max(len(values), 1)
    percent = [100.0 * float(np.sum(values <= b)) / n for b in budgets]
    return pd.DataFrame({'budget': budgets, 'percent_evaded': percent, 'metric': metric, 'scale': scale})
