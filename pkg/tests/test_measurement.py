import numpy as np
import pandas as pd
import pytest
from scipy.stats import linregress

from nmsleak.clock import Clock, ClockSpec
from nmsleak.errors import CalibrationError, InvalidRasterError, StatisticsError
from nmsleak.measurement import (MEASUREMENT_COLUMNS, NeuralRuntimeModel, calibrate_neural_model,
                                 calibration_sizes_for, default_calibration_sizes, estimate_nms_time,
                                 leakage_report, leakage_table, measure_scenes, spearman)
from nmsleak.noise import NoiseSpec
from nmsleak.raster import Raster

SMALL_SIZES = [(32, 32), (32, 64), (64, 64), (64, 96), (96, 128)]


def linear_query(raster):
    return 2e-3 + 1e-7 * raster.pixel_count


def test_default_schedule_has_78_sizes():
    sizes = default_calibration_sizes()
    assert len(sizes) == 78
    assert sizes[0] == (416, 448)
    assert sizes[-1] == (416 + 32 * 39, 416)
    assert all(h % 32 == 0 and w % 32 == 0 for h, w in sizes)


def test_noiseless_calibration_recovers_the_line():
    model = calibrate_neural_model(linear_query, SMALL_SIZES, progress=False)
    assert model.slope_per_pixel == pytest.approx(1e-7, rel=1e-9)
    assert model.intercept == pytest.approx(2e-3, rel=1e-9)
    assert model.r_squared == pytest.approx(1.0)
    assert len(model.calibration_points) == len(SMALL_SIZES)
    assert np.max(np.abs(model.residuals)) < 1e-12


def test_calibration_against_the_detector(detector):
    clock = Clock.noiseless()
    model = calibrate_neural_model(lambda r: detector.detect(r, clock)[1], SMALL_SIZES, progress=False)
    assert model.slope_per_pixel == pytest.approx(detector.neural_cost_per_pixel, rel=1e-9)
    assert model.intercept == pytest.approx(detector.neural_cost_fixed + detector.nms_cost.fixed_cost, rel=1e-9)


def test_calibration_errors():
    with pytest.raises(CalibrationError):
        calibrate_neural_model(linear_query, [(32, 32), (32, 64)], progress=False)
    with pytest.raises(InvalidRasterError):
        calibrate_neural_model(linear_query, [(32, 33), (32, 64), (64, 64)], progress=False)
    with pytest.raises(CalibrationError):
        calibrate_neural_model(lambda r: 1.0 - 1e-6 * r.pixel_count, SMALL_SIZES, progress=False)


def test_estimate_subtracts_the_prediction():
    model = NeuralRuntimeModel(slope_per_pixel=1e-7, intercept=2e-3, r_squared=1.0)
    assert estimate_nms_time(model, 2e-3 + 1e-7 * 4096 + 5e-4, 4096) == pytest.approx(5e-4)
    # negative estimates are kept, not clamped
    assert estimate_nms_time(model, 1e-3, 4096) < 0


def test_spearman():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    with pytest.raises(StatisticsError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(StatisticsError):
        spearman([1, 2], [1, 2, 3])


def test_spearman_values():
    assert spearman([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(0.6)
    # ties share the average rank: x ranks 1, 2.5, 2.5, 4
    assert spearman([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(3 / np.sqrt(10))


def test_spearman_ignores_monotone_transforms():
    rng = np.random.default_rng(0)
    xs = rng.normal(size=50)
    ys = xs + rng.normal(scale=0.8, size=50)
    rho = spearman(xs, ys)
    assert spearman(np.exp(xs), ys ** 3) == pytest.approx(rho)
    assert spearman(-xs, ys) == pytest.approx(-rho)


def test_slope_standard_error_matches_linregress():
    wobble = {1024: 3e-5, 2048: -2e-5, 4096: -4e-5, 6144: 1e-5, 12288: 2e-5}
    model = calibrate_neural_model(lambda r: linear_query(r) + wobble[r.pixel_count], SMALL_SIZES, progress=False)
    px, t = np.array(model.calibration_points, dtype=float).T
    fit = linregress(px, t)
    assert model.slope_per_pixel == pytest.approx(fit.slope)
    assert model.slope_std_error == pytest.approx(fit.stderr)
    assert model.to_dict()['slope_std_error'] == model.slope_std_error
    assert np.isnan(NeuralRuntimeModel(1e-7, 2e-3, 1.0).slope_std_error)


def test_calibration_sizes_bracket_the_amplified_size():
    sizes = calibration_sizes_for(Raster.black(64, 64), [1, 3])
    assert (64, 64) in sizes and (192, 192) in sizes
    assert len(sizes) == 6


def test_measure_scenes_noiseless(detector, forge):
    scenes = [forge(0.8, n) for n in (2, 6, 12)]
    df = measure_scenes(detector, scenes, [1, 2], Clock.noiseless())
    assert list(df.columns) == MEASUREMENT_COLUMNS + ['confidence']
    assert len(df) == 6
    assert df[df.k == 1]['B'].tolist() == [2, 6, 12]
    assert df[df.k == 2]['B'].tolist() == [8, 24, 48]
    assert df[df.k == 2]['o'].tolist() == [4, 4, 4]
    # the neural phase depends on the size only
    assert df.groupby('k')['neural_time'].nunique().tolist() == [1, 1]
    np.testing.assert_allclose(df['estimated_nms_time'], df['nms_time'], rtol=1e-6)


def test_leakage_table_from_frame():
    frame = pd.DataFrame({
        'scene_id': [0, 1, 2, 0, 1, 2], 'k': [1, 1, 1, 3, 3, 3], 'B': [1, 2, 3, 9, 18, 27],
        'o': [1] * 3 + [9] * 3, 'comparisons': [0, 1, 2, 72, 153, 234],
        'neural_time': [1.0] * 6, 'nms_time': [1, 3, 2, 1, 2, 3],
        'total_time': [2, 4, 3, 2, 3, 4], 'estimated_nms_time': [1, 3, 2, 1, 2, 3],
        'confidence': [0.7, 0.8, 0.9, 0.7, 0.8, 0.9],
    })
    table = leakage_table(frame)
    assert table['k'].tolist() == [1, 3]
    assert table['rho_time'].tolist() == pytest.approx([0.5, 1.0])


def test_leakage_report_constant_time_without_noise_is_undefined(detector, forge):
    scenes = [forge(0.8, n) for n in (2, 6, 12)]
    constant = detector.with_variant('constant_time', capacity=64)
    with pytest.raises(StatisticsError):
        leakage_report(constant, scenes, [1], Clock.noiseless())


@pytest.mark.slow
def test_leakage_grows_with_amplification(detector):
    scenes = detector.random_scenes(np.random.default_rng(4), 120, (0.65, 0.95), (1, 36))
    clock = Clock(ClockSpec(noise=NoiseSpec('gaussian', {'sigma': 3e-5}), rng_seed=5))
    table = leakage_report(detector, scenes, [1, 3], clock)
    rho = dict(zip(table['k'], table['rho_time']))
    assert rho[1] >= 0.8
    assert rho[3] >= rho[1] - 1e-9
