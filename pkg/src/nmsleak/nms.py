"""Greedy non-maximum suppression with exact comparison-count instrumentation.

Besides the greedy loop, two countermeasure variants are provided:

* ``constant_time_nms`` pads the input to a fixed capacity and runs a fixed
  pairwise schedule, so its comparison count depends on the capacity alone.
* ``random_delay_nms`` runs the greedy loop and draws an extra delay.

The cost of a run is turned into modeled seconds by ``modeled_nms_time``.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import CapacityExceededError, ConfigError
from .geometry import BoundingBox, Detection, iou
from .noise import NoiseSpec

# stands in for empty slots of the constant-time schedule
SENTINEL_BOX = BoundingBox(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class NmsInput:
    detections: Sequence[Detection]
    nms_threshold: float = 0.45

    def __post_init__(self):
        if not (0.0 < self.nms_threshold < 1.0):
            raise ConfigError('nms_threshold', f"must lie strictly in (0, 1), got {self.nms_threshold}")
        object.__setattr__(self, 'detections', tuple(self.detections))

    def __len__(self) -> int:
        return len(self.detections)


@dataclass(frozen=True)
class NmsOutcome:
    kept: Tuple[Detection, ...]
    comparison_count: int
    outer_iterations: int
    padded: bool = False
    remaining_sizes: Tuple[int, ...] = field(default=(), compare=False, repr=False)

    @property
    def object_count(self) -> int:
        return len(self.kept)


@dataclass(frozen=True)
class NmsCostModel:
    """Seconds charged per IoU comparison, per outer iteration, and once per call."""
    cost_per_comparison: float = 2.0e-5
    cost_per_iteration: float = 5.0e-5
    fixed_cost: float = 2.0e-4

    def __post_init__(self):
        if self.cost_per_comparison <= 0:
            raise ConfigError('nms_cost.cost_per_comparison', 'must be positive')
        if self.cost_per_iteration < 0:
            raise ConfigError('nms_cost.cost_per_iteration', 'must be non-negative')
        if self.fixed_cost < 0:
            raise ConfigError('nms_cost.fixed_cost', 'must be non-negative')


def _argmax_lowest_index(detections: List[Tuple[int, Detection]]) -> int:
    best = 0
    for pos in range(1, len(detections)):
        idx, det = detections[pos]
        best_idx, best_det = detections[best]
        if det.score > best_det.score or (det.score == best_det.score and idx < best_idx):
            best = pos
    return best


def greedy_nms(nms_input: NmsInput) -> NmsOutcome:
    """Greedy NMS exactly as the classic loop: take the arg-max, drop its overlaps, repeat.

    Every remaining box is compared against the selected one in every outer
    iteration, so the comparison count is the sum of remaining-set sizes.
    """
    threshold = nms_input.nms_threshold
    remaining = list(enumerate(nms_input.detections))
    kept: List[Detection] = []
    comparisons = 0
    remaining_sizes: List[int] = []

    while remaining:
        m = _argmax_lowest_index(remaining)
        _, selected = remaining.pop(m)
        kept.append(selected)
        remaining_sizes.append(len(remaining))

        survivors = []
        for idx, det in remaining:
            comparisons += 1
            if iou(selected.box, det.box) < threshold:
                survivors.append((idx, det))
        remaining = survivors

    # internal recount of the comparison schedule
    assert comparisons == sum(remaining_sizes), 'comparison count diverged from the loop structure'

    return NmsOutcome(
        kept=tuple(kept),
        comparison_count=comparisons,
        outer_iterations=len(kept),
        padded=False,
        remaining_sizes=tuple(remaining_sizes),
    )


def constant_time_comparisons(capacity: int) -> int:
    return capacity * (capacity - 1) // 2


def constant_time_nms(nms_input: NmsInput, capacity: int) -> NmsOutcome:
    """Greedy-equivalent NMS over `capacity` padded slots with a fixed schedule.

    Slots are ordered by (score desc, input index asc), the same order in which
    the greedy loop selects. Slot i suppresses slot j > i when i survives and
    their IoU reaches the threshold. Every pair is evaluated, sentinels
    included, and suppression is applied by masking rather than by skipping.
    """
    if capacity < 1:
        raise ConfigError('nms_capacity', f"must be a positive integer, got {capacity}")
    n = len(nms_input.detections)
    if n > capacity:
        raise CapacityExceededError(n, capacity)

    order = sorted(range(n), key=lambda i: (-nms_input.detections[i].score, i))
    boxes = [nms_input.detections[i].box for i in order] + [SENTINEL_BOX] * (capacity - n)
    valid = [True] * n + [False] * (capacity - n)
    suppressed = [False] * capacity
    threshold = nms_input.nms_threshold

    comparisons = 0
    for i in range(capacity):
        survives_i = valid[i] and not suppressed[i]
        for j in range(i + 1, capacity):
            comparisons += 1
            overlaps = iou(boxes[i], boxes[j]) >= threshold
            suppressed[j] = suppressed[j] or (survives_i and overlaps)

    kept = tuple(
        nms_input.detections[order[i]] for i in range(n) if not suppressed[i]
    )
    return NmsOutcome(
        kept=kept,
        comparison_count=comparisons,
        outer_iterations=capacity,
        padded=True,
    )


def random_delay_nms(nms_input: NmsInput,
                     delay_distribution: NoiseSpec,
                     rng_seed: Optional[int] = None,
                     rng: Optional[np.random.Generator] = None) -> Tuple[NmsOutcome, float]:
    """Greedy NMS plus an extra delay drawn from `delay_distribution`.

    The delay is reproducible under `rng_seed`; callers running many queries
    pass their own generator instead. Negative draws are clamped to zero.
    """
    if rng is None:
        rng = np.random.default_rng(rng_seed)
    outcome = greedy_nms(nms_input)
    extra_delay = max(0.0, float(delay_distribution.sample(rng)))
    return outcome, extra_delay


def modeled_nms_time(outcome: NmsOutcome, model: NmsCostModel) -> float:
    return (model.fixed_cost
            + outcome.outer_iterations * model.cost_per_iteration
            + outcome.comparison_count * model.cost_per_comparison)


def run_nms_variant(nms_input: NmsInput,
                    variant: str = 'greedy',
                    capacity: Optional[int] = None,
                    delay: Optional[NoiseSpec] = None,
                    rng: Optional[np.random.Generator] = None) -> Tuple[NmsOutcome, float]:
    """Dispatch on the configured variant. Returns (outcome, extra_delay_seconds)."""
    if variant == 'greedy':
        return greedy_nms(nms_input), 0.0
    if variant == 'constant_time':
        if capacity is None:
            raise ConfigError('nms_capacity', 'constant_time variant needs a capacity')
        return constant_time_nms(nms_input, capacity), 0.0
    if variant == 'random_delay':
        return random_delay_nms(nms_input, delay or NoiseSpec(), rng=rng)
    raise ConfigError('nms_variant', f"unknown variant '{variant}'")
