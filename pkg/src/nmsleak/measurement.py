"""Neural-runtime regression, NMS-time estimation and leakage statistics.

End-to-end time mixes a neural phase that depends only on image size with an
NMS phase that depends on the boxes. Timing all-black rasters (no boxes) over
a schedule of sizes gives a linear model of the first; subtracting its
prediction from a measured total leaves an estimate of the second.
"""

import sys
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import tqdm
from scipy.stats import spearmanr
from sklearn.linear_model import LinearRegression
from sklearn.metrics import r2_score

from .clock import Clock, ClockSpec  # noqa: F401  (re-exported)
from .detector import ForgedScene, QueryResult, SyntheticDetector, TimingObservation, amplify
from .errors import CalibrationError, InvalidRasterError, StatisticsError
from .logger import logger
from .raster import DIMENSION_MULTIPLE, Raster

disable_tqdm = not sys.stdout.isatty()

MEASUREMENT_COLUMNS = [
    'scene_id', 'k', 'B', 'o', 'comparisons',
    'neural_time', 'nms_time', 'total_time', 'estimated_nms_time',
]

# a query returns seconds or anything carrying .total_time
Query = Callable[[Raster], Union[float, TimingObservation, QueryResult]]


@dataclass(frozen=True)
class NeuralRuntimeModel:
    slope_per_pixel: float
    intercept: float
    r_squared: float
    calibration_points: Tuple[Tuple[int, float], ...] = field(default=(), repr=False)

    def predict(self, pixel_count) -> Union[float, np.ndarray]:
        return self.slope_per_pixel * np.asarray(pixel_count, dtype=float) + self.intercept

    @property
    def residuals(self) -> np.ndarray:
        if not self.calibration_points:
            return np.empty(0)
        px, t = np.array(self.calibration_points, dtype=float).T
        return t - self.predict(px)

    @property
    def residual_std(self) -> float:
        res = self.residuals
        return float(np.std(res, ddof=2)) if len(res) > 2 else float('nan')

    @property
    def slope_std_error(self) -> float:
        """Standard error of the slope: residual std over the root spread of the pixel counts."""
        if len(self.calibration_points) <= 2:
            return float('nan')
        px = np.array([p for p, _ in self.calibration_points], dtype=float)
        return self.residual_std / float(np.sqrt(np.sum((px - px.mean()) ** 2)))

    def to_dict(self):
        return {
            'slope_per_pixel': self.slope_per_pixel,
            'intercept': self.intercept,
            'r_squared': self.r_squared,
            'n_points': len(self.calibration_points),
            'residual_std': self.residual_std,
            'slope_std_error': self.slope_std_error,
        }


def default_calibration_sizes(base: int = 416, steps: int = 39, step: int = DIMENSION_MULTIPLE) -> List[Tuple[int, int]]:
    """base x (base + step*k) and (base + step*k) x base for k = 1..steps."""
    wide = [(base, base + step * k) for k in range(1, steps + 1)]
    tall = [(base + step * k, base) for k in range(1, steps + 1)]
    return wide + tall


def _total_time(result) -> float:
    return float(getattr(result, 'total_time', result))


def calibrate_neural_model(query: Query, sizes: Optional[Sequence[Tuple[int, int]]] = None,
                           progress: bool = True) -> NeuralRuntimeModel:
    """Fit end-to-end time of all-black rasters against pixel count.

    Args:
        query: any callable timing one raster, in process or over the network.
        sizes: (height, width) pairs; defaults to `default_calibration_sizes()`.

    Raises:
        CalibrationError: fewer than 3 distinct sizes, or a negative slope.
        InvalidRasterError: a size that is not a multiple of 32.
    """
    sizes = list(sizes) if sizes is not None else default_calibration_sizes()
    for h, w in sizes:
        if h % DIMENSION_MULTIPLE or w % DIMENSION_MULTIPLE or h <= 0 or w <= 0:
            raise InvalidRasterError(f"Calibration size {h}x{w} is not a positive multiple of {DIMENSION_MULTIPLE}")
    pixel_counts = np.array([h * w for h, w in sizes], dtype=float)
    if len(set(sizes)) < 3 or len(np.unique(pixel_counts)) < 2:
        raise CalibrationError(f"Calibration needs at least 3 distinct sizes with varying area, got {sorted(set(sizes))}")

    times = []
    for h, w in tqdm.tqdm(sizes, desc='Calibrating neural runtime', unit='sizes',
                          disable=disable_tqdm or not progress):
        times.append(_total_time(query(Raster.black(h, w))))
    times = np.array(times)

    X = pixel_counts.reshape(-1, 1)
    reg = LinearRegression().fit(X, times)
    slope = float(reg.coef_[0])
    intercept = float(reg.intercept_)
    if slope < 0:
        raise CalibrationError(f"Fitted a negative slope ({slope:.3e} s/pixel); calibration data is dominated by noise")
    r2 = float(r2_score(times, reg.predict(X)))
    logger.info(f"Neural runtime model: {slope:.3e} s/pixel + {intercept:.3e} s (R^2 = {r2:.4f}, n = {len(sizes)})")
    return NeuralRuntimeModel(
        slope_per_pixel=slope,
        intercept=intercept,
        r_squared=min(1.0, max(0.0, r2)),
        calibration_points=tuple(zip(pixel_counts.astype(int).tolist(), times.tolist())),
    )


def estimate_nms_time(model: NeuralRuntimeModel, total_time: float, pixel_count: int) -> float:
    """Total time minus the predicted neural time. Negative estimates are kept as-is."""
    estimate = float(total_time - model.predict(pixel_count))
    if estimate < 0:
        logger.debug(f"Negative NMS estimate {estimate:.3e} s for {pixel_count} pixels")
    return estimate


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation, average ranks for ties.

    Raises:
        StatisticsError: unequal lengths, fewer than 2 points, or a constant side.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise StatisticsError(f"spearman needs two equal-length sequences, got {xs.shape} and {ys.shape}")
    if len(xs) < 2:
        raise StatisticsError('spearman needs at least 2 points')
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise StatisticsError('spearman is undefined for constant input')
    rho, _ = spearmanr(xs, ys)
    return float(np.clip(rho, -1.0, 1.0))


def _scene_parts(scene: Union[ForgedScene, Raster], index: int) -> Tuple[Raster, int, float]:
    if isinstance(scene, ForgedScene):
        return scene.raster, scene.scene_id, scene.target_score
    return scene, index, float('nan')


def calibration_sizes_for(raster: Raster, ks: Sequence[int], widenings: int = 3) -> List[Tuple[int, int]]:
    """A small schedule bracketing the amplified sizes of `raster`."""
    sizes = []
    for k in ks:
        for j in range(widenings):
            sizes.append((k * raster.height, k * raster.width + DIMENSION_MULTIPLE * j))
    return sorted(set(sizes))


def measure_scenes(detector: SyntheticDetector,
                   scenes: Sequence[Union[ForgedScene, Raster]],
                   ks: Sequence[int] = (1,),
                   clock: Optional[Clock] = None,
                   neural_model: Optional[NeuralRuntimeModel] = None,
                   resize_back: bool = False,
                   degradation: float = 1.0) -> pd.DataFrame:
    """Time every scene at every amplification factor.

    Returns one row per (scene, k) with the measurement CSV columns plus the
    planted confidence.
    """
    clock = clock or Clock(ClockSpec())
    if neural_model is None:
        first, _, _ = _scene_parts(scenes[0], 0)
        neural_model = calibrate_neural_model(
            lambda r: detector.detect(r, clock)[1], calibration_sizes_for(first, ks), progress=False,
        )
    rows = []
    for k in ks:
        for i, scene in enumerate(tqdm.tqdm(scenes, desc=f'Measuring scenes (k={k})', unit='scenes',
                                            disable=disable_tqdm)):
            raster, scene_id, confidence = _scene_parts(scene, i)
            _, obs = detector.detect(amplify(raster, k, resize_back, degradation), clock)
            rows.append({
                'scene_id': scene_id,
                'k': k,
                'B': obs.box_count_B,
                'o': obs.object_count_o,
                'comparisons': obs.comparison_count,
                'neural_time': obs.neural_time,
                'nms_time': obs.nms_time,
                'total_time': obs.total_time,
                'estimated_nms_time': estimate_nms_time(neural_model, obs.total_time, obs.pixel_count),
                'confidence': confidence,
            })
    return pd.DataFrame(rows, columns=MEASUREMENT_COLUMNS + ['confidence'])


def leakage_table(measurements: pd.DataFrame) -> pd.DataFrame:
    """Per-k Spearman correlations of box count (and planted confidence) with time."""
    rows = []
    for k, group in measurements.groupby('k', sort=True):
        row = {
            'k': int(k),
            'n_scenes': len(group),
            'rho_time': spearman(group['B'], group['nms_time']),
            'rho_estimated': spearman(group['B'], group['estimated_nms_time']),
        }
        confidence = group['confidence'].dropna()
        if len(confidence) >= 2 and confidence.nunique() > 1:
            row['rho_confidence'] = spearman(confidence, group.loc[confidence.index, 'nms_time'])
        else:
            row['rho_confidence'] = float('nan')
        rows.append(row)
    return pd.DataFrame(rows, columns=['k', 'n_scenes', 'rho_time', 'rho_estimated', 'rho_confidence'])


def leakage_report(detector: SyntheticDetector,
                   scenes: Sequence[Union[ForgedScene, Raster]],
                   ks: Sequence[int] = (1, 3, 7),
                   clock: Optional[Clock] = None,
                   neural_model: Optional[NeuralRuntimeModel] = None) -> pd.DataFrame:
    """One row per k: (k, rho(B, time), rho(B, estimated time)).

    Raises:
        StatisticsError: propagated from `spearman`, e.g. a constant-time NMS
            variant without timing noise.
    """
    measurements = measure_scenes(detector, scenes, ks, clock, neural_model)
    return leakage_table(measurements)
