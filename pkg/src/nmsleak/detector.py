"""Synthetic two-phase detector: anchor scoring followed by NMS.

Every anchor slot owns a zero-sum unit weight vector over its square window
and a bias. Its score is ``sigmoid(gain * w . x + b)``. Because the weights
sum to zero, any flat canvas scores ``sigmoid(b)``, which sits below the
detection threshold, so flat and black rasters produce no candidates.

Weights repeat every ``grid.period`` pixels in both directions, and raster
dimensions are multiples of 32, so a k x k tiling of a raster reproduces the
same candidates in every tile.
"""

import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, logit

from .clock import Clock
from .errors import ConfigError, InfeasiblePlantError, InvalidRasterError
from .geometry import BoundingBox, Detection
from .logger import logger
from .nms import NmsCostModel, NmsInput, NmsOutcome, modeled_nms_time, run_nms_variant
from .noise import NoiseSpec
from .raster import DIMENSION_MULTIPLE, Raster, resize_raster

NMS_VARIANTS = ('greedy', 'constant_time', 'random_delay')
CANVAS_LEVEL = 0.5
TILE_SIZE = 64


@dataclass(frozen=True)
class AnchorGridConfig:
    stride: int = 4
    window: int = 32
    box_size: float = 48.0
    anchors_per_cell: int = 4
    period: int = 32
    weight_gain: float = 12.0
    bias_range: Tuple[float, float] = (-5.0, -4.0)

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError('grid.stride', f"must be a positive integer, got {self.stride}")
        if self.window < self.stride:
            raise ConfigError('grid.window', f"window ({self.window}) must be >= stride ({self.stride})")
        if self.box_size <= 0:
            raise ConfigError('grid.box_size', 'must be positive')
        if self.anchors_per_cell < 1:
            raise ConfigError('grid.anchors_per_cell', 'must be >= 1')
        if self.period % self.stride or DIMENSION_MULTIPLE % self.period:
            raise ConfigError(
                'grid.period',
                f"period ({self.period}) must be a multiple of stride and divide {DIMENSION_MULTIPLE}",
            )
        if self.weight_gain <= 0:
            raise ConfigError('grid.weight_gain', 'must be positive')
        low, high = self.bias_range
        if low > high:
            raise ConfigError('grid.bias_range', f"low > high in {self.bias_range}")
        object.__setattr__(self, 'bias_range', (float(low), float(high)))

    @property
    def residues(self) -> int:
        """Number of distinct weight sets along each axis."""
        return self.period // self.stride

    def positions(self, length: int) -> int:
        return (length - self.window) // self.stride + 1


@dataclass(frozen=True)
class TimingObservation:
    neural_time: float
    nms_time: float
    total_time: float
    comparison_count: int
    box_count_B: int
    object_count_o: int
    mode: str
    pixel_count: int = 0
    outer_iterations: int = 0
    noise_realization: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'neural_time': self.neural_time,
            'nms_time': self.nms_time,
            'total_time': self.total_time,
            'comparisons': self.comparison_count,
            'B': self.box_count_B,
            'o': self.object_count_o,
            'mode': self.mode,
            'pixel_count': self.pixel_count,
            'outer_iterations': self.outer_iterations,
            'noise': self.noise_realization,
        }


@dataclass(frozen=True)
class ForgedScene:
    raster: Raster
    n_boxes: int
    target_score: float
    n_objects: int = 1
    scene_id: int = 0


@dataclass(frozen=True, eq=False)
class SyntheticDetector:
    """Seeded linear-logistic anchor scorer with an instrumented NMS stage."""
    grid: AnchorGridConfig = field(default_factory=AnchorGridConfig)
    weight_seed: int = 0
    detection_threshold: float = 0.6
    nms_threshold: float = 0.45
    nms_cost: NmsCostModel = field(default_factory=NmsCostModel)
    neural_cost_per_pixel: float = 1.0e-7
    neural_cost_fixed: float = 2.0e-3
    nms_variant: str = 'greedy'
    nms_capacity: Optional[int] = None
    nms_delay: NoiseSpec = field(default_factory=NoiseSpec)
    class_id: int = 0

    def __post_init__(self):
        if not (0.0 < self.detection_threshold < 1.0):
            raise ConfigError('detector.detection_threshold', f"must lie in (0, 1), got {self.detection_threshold}")
        if not (0.0 < self.nms_threshold < 1.0):
            raise ConfigError('detector.nms_threshold', f"must lie in (0, 1), got {self.nms_threshold}")
        if self.neural_cost_per_pixel < 0 or self.neural_cost_fixed < 0:
            raise ConfigError('detector.neural_cost', 'neural costs must be non-negative')
        if self.nms_variant not in NMS_VARIANTS:
            raise ConfigError('detector.nms_variant', f"unknown variant '{self.nms_variant}', expected one of {NMS_VARIANTS}")
        if self.nms_variant == 'constant_time' and not self.nms_capacity:
            raise ConfigError('detector.nms_capacity', 'constant_time variant needs a capacity')

        g = self.grid
        rng = np.random.default_rng(self.weight_seed)
        p = g.residues
        weights = rng.standard_normal((p, p, g.anchors_per_cell, g.window, g.window, 3))
        weights -= weights.mean(axis=(3, 4, 5), keepdims=True)
        norms = np.linalg.norm(weights.reshape(p, p, g.anchors_per_cell, -1), axis=-1)
        weights /= norms[..., None, None, None]
        biases = rng.uniform(g.bias_range[0], g.bias_range[1], size=(p, p, g.anchors_per_cell))
        weights.flags.writeable = False
        biases.flags.writeable = False
        object.__setattr__(self, '_weights', weights)
        object.__setattr__(self, '_biases', biases)

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]]) -> 'SyntheticDetector':
        data = dict(data or {})
        grid = dict(data.pop('grid', {}) or {})
        if 'bias_range' in grid:
            grid['bias_range'] = tuple(grid['bias_range'])
        nms_cost = data.pop('nms_cost', {}) or {}
        nms_delay = data.pop('nms_delay', None)
        try:
            return cls(
                grid=AnchorGridConfig(**grid),
                nms_cost=NmsCostModel(**nms_cost),
                nms_delay=NoiseSpec.from_dict(nms_delay),
                **data,
            )
        except TypeError as e:
            raise ConfigError('detector', str(e)) from e

    def to_dict(self) -> Dict[str, Any]:
        g = self.grid
        return {
            'grid': {
                'stride': g.stride, 'window': g.window, 'box_size': g.box_size,
                'anchors_per_cell': g.anchors_per_cell, 'period': g.period,
                'weight_gain': g.weight_gain, 'bias_range': list(g.bias_range),
            },
            'weight_seed': self.weight_seed,
            'detection_threshold': self.detection_threshold,
            'nms_threshold': self.nms_threshold,
            'nms_cost': {
                'cost_per_comparison': self.nms_cost.cost_per_comparison,
                'cost_per_iteration': self.nms_cost.cost_per_iteration,
                'fixed_cost': self.nms_cost.fixed_cost,
            },
            'neural_cost_per_pixel': self.neural_cost_per_pixel,
            'neural_cost_fixed': self.neural_cost_fixed,
            'nms_variant': self.nms_variant,
            'nms_capacity': self.nms_capacity,
            'nms_delay': self.nms_delay.to_dict(),
            'class_id': self.class_id,
        }

    def with_variant(self, variant: str, capacity: Optional[int] = None,
                     delay: Optional[NoiseSpec] = None) -> 'SyntheticDetector':
        """Same weights and costs, different NMS variant."""
        return SyntheticDetector(
            grid=self.grid, weight_seed=self.weight_seed,
            detection_threshold=self.detection_threshold, nms_threshold=self.nms_threshold,
            nms_cost=self.nms_cost, neural_cost_per_pixel=self.neural_cost_per_pixel,
            neural_cost_fixed=self.neural_cost_fixed, nms_variant=variant,
            nms_capacity=capacity, nms_delay=delay or NoiseSpec(), class_id=self.class_id,
        )

    # --- anchor scoring -----------------------------------------------------------

    def _check_fits(self, img: Raster) -> None:
        if self.grid.window > min(img.height, img.width):
            raise InvalidRasterError(
                f"Anchor window {self.grid.window} does not fit a {img.height}x{img.width} raster"
            )

    def anchor_weight(self, iy: int, ix: int, slot: int) -> np.ndarray:
        p = self.grid.residues
        return self._weights[iy % p, ix % p, slot]

    def anchor_bias(self, iy: int, ix: int, slot: int) -> float:
        p = self.grid.residues
        return float(self._biases[iy % p, ix % p, slot])

    def anchor_logits(self, img: Raster) -> np.ndarray:
        """Logits of every anchor slot, shape (rows, cols, anchors_per_cell)."""
        self._check_fits(img)
        g = self.grid
        p = g.residues
        if img.pixels.min() == img.pixels.max():
            # zero-mean weights: a constant raster leaves only the biases
            iy = np.arange(g.positions(img.height)) % p
            ix = np.arange(g.positions(img.width)) % p
            return self._biases[iy[:, None], ix[None, :]].copy()
        view = sliding_window_view(img.pixels, (g.window, g.window), axis=(0, 1))
        view = view[::g.stride, ::g.stride].transpose(0, 1, 3, 4, 2)
        rows, cols = view.shape[:2]
        logits = np.empty((rows, cols, g.anchors_per_cell))
        for ry in range(min(p, rows)):
            for rx in range(min(p, cols)):
                sub = view[ry::p, rx::p]
                response = np.tensordot(sub, self._weights[ry, rx], axes=([2, 3, 4], [1, 2, 3]))
                logits[ry::p, rx::p] = g.weight_gain * response + self._biases[ry, rx]
        return logits

    def anchor_logit(self, pixels: np.ndarray, iy: int, ix: int, slot: int) -> float:
        g = self.grid
        y, x = iy * g.stride, ix * g.stride
        window = pixels[y:y + g.window, x:x + g.window]
        return g.weight_gain * float(np.sum(self.anchor_weight(iy, ix, slot) * window)) + self.anchor_bias(iy, ix, slot)

    def anchor_box(self, iy: int, ix: int, height: int, width: int) -> BoundingBox:
        g = self.grid
        cx = ix * g.stride + g.window / 2.0
        cy = iy * g.stride + g.window / 2.0
        return BoundingBox.from_center(cx, cy, g.box_size, g.box_size).clipped(width, height)

    def score_anchors(self, img: Raster) -> List[Detection]:
        """Candidates whose score reaches the detection threshold, in (row, col, slot) order."""
        scores = expit(self.anchor_logits(img))
        rows, cols, slots = np.nonzero(scores >= self.detection_threshold)
        return [
            Detection(self.anchor_box(iy, ix, img.height, img.width), self.class_id, float(scores[iy, ix, a]))
            for iy, ix, a in zip(rows.tolist(), cols.tolist(), slots.tolist())
        ]

    # --- scene forge -----------------------------------------------------------------

    def object_region(self, cx: float, cy: float) -> BoundingBox:
        """Region around (cx, cy) holding a 5 x 5 block of anchor windows."""
        side = self.grid.window + 4 * self.grid.stride
        return BoundingBox.from_center(cx, cy, side, side)

    @property
    def cluster_capacity(self) -> int:
        """Most boxes a single planted object can carry while NMS still keeps one."""
        return 9 * self.grid.anchors_per_cell

    def _region_slots(self, img: Raster, region: BoundingBox) -> List[Tuple[int, int, int]]:
        g = self.grid
        cx, cy = region.center
        half = g.window / 2.0
        positions = [
            (iy, ix)
            for iy in range(g.positions(img.height))
            for ix in range(g.positions(img.width))
            if region.x_min <= ix * g.stride and ix * g.stride + g.window <= region.x_max
            and region.y_min <= iy * g.stride and iy * g.stride + g.window <= region.y_max
        ]
        positions.sort(key=lambda pos: ((pos[1] * g.stride + half - cx) ** 2
                                        + (pos[0] * g.stride + half - cy) ** 2, pos[0], pos[1]))
        return [(iy, ix, a) for iy, ix in positions for a in range(g.anchors_per_cell)]

    def _overlap_product(self, first: Tuple[int, int, int], second: Tuple[int, int, int]) -> float:
        g = self.grid
        dy = (second[0] - first[0]) * g.stride
        dx = (second[1] - first[1]) * g.stride
        if abs(dy) >= g.window or abs(dx) >= g.window:
            return 0.0
        wa = self.anchor_weight(*first)
        wb = self.anchor_weight(*second)
        a_rows = slice(max(0, dy), g.window + min(0, dy))
        a_cols = slice(max(0, dx), g.window + min(0, dx))
        b_rows = slice(max(0, -dy), g.window + min(0, -dy))
        b_cols = slice(max(0, -dx), g.window + min(0, -dx))
        return float(np.sum(wa[a_rows, a_cols] * wb[b_rows, b_cols]))

    def plant_object(self, img: Raster, region: BoundingBox, target_score: float, n_boxes: int,
                     tolerance: float = 1e-6, max_refinements: int = 25) -> Raster:
        """Raise the `n_boxes` anchors nearest the region center to `target_score`.

        Each selected anchor gets a multiple of its own weight pattern added to
        its window. The multiples solve the Gram system of the selected
        windows, so every selected logit lands exactly on logit(target_score)
        before clipping. Clipping losses are corrected by re-solving on the
        remaining deficit.

        Raises:
            InfeasiblePlantError: region too small, bad target, or clipping
                keeps a selected anchor below target - tolerance.
        """
        if not BoundingBox(0.0, 0.0, float(img.width), float(img.height)).contains(region):
            raise InfeasiblePlantError(f"Region {region.as_tuple()} is not inside the {img.height}x{img.width} raster")
        if not (self.detection_threshold < target_score < 1.0):
            raise InfeasiblePlantError(
                f"target_score must lie in ({self.detection_threshold}, 1), got {target_score}"
            )
        if n_boxes < 1:
            raise InfeasiblePlantError(f"n_boxes must be positive, got {n_boxes}")
        self._check_fits(img)

        slots = self._region_slots(img, region)
        if n_boxes > len(slots):
            raise InfeasiblePlantError(f"Region holds {len(slots)} anchors, {n_boxes} requested")
        selected = slots[:n_boxes]

        gram = np.array([[self._overlap_product(a, b) for b in selected] for a in selected])
        g = self.grid
        goal = float(logit(target_score))
        pixels = np.array(img.pixels)
        for _ in range(max_refinements):
            current = np.array([self.anchor_logit(pixels, *s) for s in selected])
            deficit = goal - current
            if np.max(np.abs(deficit)) < 1e-9:
                break
            coefficients = np.linalg.solve(gram, deficit / g.weight_gain)
            for c, (iy, ix, a) in zip(coefficients, selected):
                y, x = iy * g.stride, ix * g.stride
                pixels[y:y + g.window, x:x + g.window] += c * self.anchor_weight(iy, ix, a)
            np.clip(pixels, 0.0, 1.0, out=pixels)

        reached = expit([self.anchor_logit(pixels, *s) for s in selected])
        if np.min(reached) < target_score - tolerance:
            raise InfeasiblePlantError(
                f"Clipping keeps {int(np.sum(reached < target_score - tolerance))} of {n_boxes} anchors "
                f"below {target_score} (lowest {np.min(reached):.6f})"
            )
        return Raster(pixels)

    def forge_scene(self, target_score: float, n_boxes: int, n_objects: int = 1,
                    tile: int = TILE_SIZE, scene_id: int = 0) -> ForgedScene:
        """A gray canvas of `n_objects` tiles laid out in a row, one planted object per tile."""
        raster = gray_canvas(tile, tile * n_objects)
        for i in range(n_objects):
            region = self.object_region(i * tile + tile / 2.0, tile / 2.0)
            raster = self.plant_object(raster, region, target_score, n_boxes)
        return ForgedScene(raster, n_boxes, target_score, n_objects, scene_id)

    def random_scenes(self, rng: np.random.Generator, count: int,
                      score_range: Tuple[float, float] = (0.65, 0.95),
                      box_range: Optional[Tuple[int, int]] = None,
                      objects_range: Tuple[int, int] = (1, 1)) -> List[ForgedScene]:
        """Scenes with a uniformly drawn target score, boxes per object and object count."""
        low_boxes, high_boxes = box_range or (1, self.cluster_capacity)
        scenes = []
        for scene_id in range(count):
            target = float(rng.uniform(*score_range))
            n_boxes = int(rng.integers(low_boxes, high_boxes + 1))
            n_objects = int(rng.integers(objects_range[0], objects_range[1] + 1))
            scenes.append(self.forge_scene(target, n_boxes, n_objects, scene_id=scene_id))
        logger.debug(f"Forged {count} scenes")
        return scenes

    # --- full pipeline -----------------------------------------------------------------

    def _run_nms(self, candidates: Sequence[Detection], rng: np.random.Generator) -> Tuple[NmsOutcome, float]:
        return run_nms_variant(
            NmsInput(candidates, self.nms_threshold),
            variant=self.nms_variant,
            capacity=self.nms_capacity,
            delay=self.nms_delay,
            rng=rng,
        )

    def neural_time(self, pixel_count: int) -> float:
        return self.neural_cost_fixed + self.neural_cost_per_pixel * pixel_count

    def detect(self, img: Raster, clock: Optional[Clock] = None) -> Tuple[List[Detection], TimingObservation]:
        """Score anchors, run NMS, and time both phases the way `clock` says.

        modeled: neural = fixed + per_pixel * H * W, nms = modeled cost,
            each phase plus one draw of the clock noise per repeat.
        remote_rtt: modeled plus one network jitter draw on the total.
        wall_clock: perf_counter around each phase.

        With repeats > 1 every phase time and the total are medians over repeats.
        """
        clock = clock or Clock.noiseless()
        with clock.measuring():
            if clock.mode == 'wall_clock':
                return self._detect_wall_clock(img, clock)
            return self._detect_modeled(img, clock)

    def _detect_modeled(self, img: Raster, clock: Clock) -> Tuple[List[Detection], TimingObservation]:
        candidates = self.score_anchors(img)
        neural_base = self.neural_time(img.pixel_count)
        neural, nms, total = [], [], []
        outcome = None
        for _ in range(clock.repeats):
            outcome, extra_delay = self._run_nms(candidates, clock.rng)
            nms_base = modeled_nms_time(outcome, self.nms_cost) + extra_delay
            n_t = neural_base + clock.phase_noise()
            s_t = nms_base + clock.phase_noise()
            jitter = clock.network_jitter() if clock.mode == 'remote_rtt' else 0.0
            neural.append(n_t)
            nms.append(s_t)
            total.append(n_t + s_t + jitter)
        noiseless_total = neural_base + modeled_nms_time(outcome, self.nms_cost)
        total_time = float(np.median(total))
        observation = TimingObservation(
            neural_time=float(np.median(neural)),
            nms_time=float(np.median(nms)),
            total_time=total_time,
            comparison_count=outcome.comparison_count,
            box_count_B=len(candidates),
            object_count_o=outcome.object_count,
            mode=clock.mode,
            pixel_count=img.pixel_count,
            outer_iterations=outcome.outer_iterations,
            noise_realization=total_time - noiseless_total,
        )
        return list(outcome.kept), observation

    def _detect_wall_clock(self, img: Raster, clock: Clock) -> Tuple[List[Detection], TimingObservation]:
        neural, nms, total = [], [], []
        candidates: List[Detection] = []
        outcome = None
        for _ in range(clock.repeats):
            start = time.perf_counter()
            candidates = self.score_anchors(img)
            mid = time.perf_counter()
            outcome, extra_delay = self._run_nms(candidates, clock.rng)
            if extra_delay > 0:
                time.sleep(extra_delay)
            end = time.perf_counter()
            neural.append(mid - start)
            nms.append(end - mid)
            total.append(end - start)
        observation = TimingObservation(
            neural_time=float(np.median(neural)),
            nms_time=float(np.median(nms)),
            total_time=float(np.median(total)),
            comparison_count=outcome.comparison_count,
            box_count_B=len(candidates),
            object_count_o=outcome.object_count,
            mode='wall_clock',
            pixel_count=img.pixel_count,
            outer_iterations=outcome.outer_iterations,
        )
        return list(outcome.kept), observation


def gray_canvas(height: int, width: int, level: float = CANVAS_LEVEL) -> Raster:
    return Raster.filled(height, width, level)


def erase_region(img: Raster, region: BoundingBox, level: float = CANVAS_LEVEL) -> Raster:
    """Reset every pixel the region touches to the flat canvas level."""
    pixels = np.array(img.pixels)
    y0, y1 = int(np.floor(region.y_min)), int(np.ceil(region.y_max))
    x0, x1 = int(np.floor(region.x_min)), int(np.ceil(region.x_max))
    pixels[max(0, y0):y1, max(0, x0):x1] = level
    return Raster(pixels)


def copy_attenuation(k: int, degradation: float) -> np.ndarray:
    """Per-copy activation scale of a resampled k x k tiling, row-major.

    The first copy is untouched and the last is scaled by `degradation`,
    with a geometric ramp in between.
    """
    if k == 1:
        return np.ones((1, 1))
    ramp = np.arange(k * k, dtype=float) / (k * k - 1)
    return (degradation ** ramp).reshape(k, k)


def _check_amplification(k: int, degradation: float) -> None:
    if k < 1:
        raise ValueError(f"k must be a positive integer, got {k}")
    if not (0.0 <= degradation <= 1.0):
        raise ValueError(f"degradation must lie in [0, 1], got {degradation}")


def attenuated_tiling(img: Raster, k: int, degradation: float) -> Raster:
    """k x k tiling where copy (i, j) keeps `copy_attenuation(k, degradation)[i, j]` of its contrast.

    Scaling a copy's deviation from its per-channel mean scales its planted
    activations by about the same factor (the anchor weights are zero-mean).
    """
    _check_amplification(k, degradation)
    mean = img.pixels.mean(axis=(0, 1))
    deviation = img.pixels - mean
    factors = copy_attenuation(k, degradation)
    h, w = img.height, img.width
    tiled = np.empty((k * h, k * w, img.channels))
    for i in range(k):
        for j in range(k):
            tiled[i * h:(i + 1) * h, j * w:(j + 1) * w] = mean + factors[i, j] * deviation
    return Raster.clipped(tiled)


def amplify(img: Raster, k: int, resize_back: bool = False, degradation: float = 1.0) -> Raster:
    """Tile `img` k x k.

    With `resize_back`, the copies are attenuated as in `attenuated_tiling`
    and the tiling is area-resampled back to the size of `img`.
    """
    _check_amplification(k, degradation)
    if k == 1:
        return img
    if resize_back:
        return resize_raster(attenuated_tiling(img, k, degradation), img.height, img.width)
    return Raster.clipped(np.tile(img.pixels, (k, k, 1)))


@dataclass(frozen=True)
class QueryResult:
    """What an attacker observes from one query: the detections and the time."""
    detections: Tuple[Detection, ...]
    total_time: float
    observation: Optional[TimingObservation] = None

    @property
    def detected(self) -> bool:
        return len(self.detections) > 0

    @property
    def object_count(self) -> int:
        return len(self.detections)


class LocalDetectorHandle:
    """In-process detector handle: one detector, one clock, queried serially."""

    def __init__(self, detector: SyntheticDetector, clock: Optional[Clock] = None):
        self.detector = detector
        self.clock = clock or Clock.noiseless()
        self.query_count = 0

    def query(self, raster: Raster) -> QueryResult:
        detections, observation = self.detector.detect(raster, self.clock)
        self.query_count += 1
        return QueryResult(tuple(detections), observation.total_time, observation)

    __call__ = query
