import numpy as np
import pytest

from nmsleak.clock import Clock, ClockSpec
from nmsleak.detector import (CANVAS_LEVEL, AnchorGridConfig, LocalDetectorHandle, SyntheticDetector, amplify,
                              attenuated_tiling, copy_attenuation, erase_region, gray_canvas)
from nmsleak.errors import ConfigError, InfeasiblePlantError
from nmsleak.geometry import BoundingBox
from nmsleak.noise import NoiseSpec
from nmsleak.raster import Raster


def test_flat_rasters_produce_no_candidates(detector, noiseless_clock):
    for raster in (Raster.black(64, 96), gray_canvas(64, 64), Raster.filled(32, 32, 1.0)):
        detections, obs = detector.detect(raster, noiseless_clock)
        assert detections == []
        assert obs.box_count_B == 0
        assert obs.comparison_count == 0


def test_weights_are_seeded(detector):
    raster = Raster(np.random.default_rng(0).uniform(0, 1, (64, 64, 3)))
    same = SyntheticDetector(weight_seed=7)
    other = SyntheticDetector(weight_seed=8)
    np.testing.assert_array_equal(detector.anchor_logits(raster), same.anchor_logits(raster))
    assert not np.allclose(detector.anchor_logits(raster), other.anchor_logits(raster))


def test_constant_raster_logits_are_the_biases(detector):
    raster = Raster.filled(64, 96, 0.3)
    logits = detector.anchor_logits(raster)
    assert logits.shape == (9, 17, 4)
    for iy, ix, a in [(0, 0, 0), (3, 5, 2), (8, 16, 3)]:
        assert logits[iy, ix, a] == pytest.approx(detector.anchor_logit(raster.pixels, iy, ix, a), abs=1e-9)


def test_vectorized_logits_match_per_anchor_logits(detector):
    raster = Raster(np.random.default_rng(2).uniform(0, 1, (64, 96, 3)))
    logits = detector.anchor_logits(raster)
    assert logits.shape == (9, 17, 4)
    for iy, ix, a in [(0, 0, 0), (3, 5, 2), (8, 16, 3), (7, 9, 1)]:
        assert logits[iy, ix, a] == pytest.approx(detector.anchor_logit(raster.pixels, iy, ix, a), abs=1e-9)


@pytest.mark.parametrize('n_boxes', [1, 4, 9, 17, 36])
def test_planted_object_has_exact_box_count(detector, noiseless_clock, forge, n_boxes):
    scene = forge(0.8, n_boxes)
    detections, obs = detector.detect(scene.raster, noiseless_clock)
    assert obs.box_count_B == n_boxes
    assert obs.object_count_o == 1
    assert len(detections) == 1
    assert detections[0].score == pytest.approx(0.8, abs=1e-6)
    assert obs.comparison_count == n_boxes - 1


def test_objects_in_a_row(detector, noiseless_clock, forge):
    scene = forge(0.75, 6, n_objects=3)
    assert scene.raster.shape == (64, 192, 3)
    _, obs = detector.detect(scene.raster, noiseless_clock)
    assert obs.box_count_B == 18
    assert obs.object_count_o == 3


def test_plant_rejects_infeasible_requests(detector):
    canvas = gray_canvas(64, 64)
    region = detector.object_region(32, 32)
    with pytest.raises(InfeasiblePlantError):
        detector.plant_object(canvas, region, 0.55, 3)
    with pytest.raises(InfeasiblePlantError):
        detector.plant_object(canvas, region, 0.8, 101)
    with pytest.raises(InfeasiblePlantError):
        detector.plant_object(canvas, BoundingBox(40, 40, 90, 90), 0.8, 3)


def test_erase_region_removes_the_object(detector, noiseless_clock, forge):
    scene = forge(0.8, 9)
    erased = erase_region(scene.raster, detector.object_region(32, 32))
    assert erased == gray_canvas(64, 64)
    assert detector.detect(erased, noiseless_clock)[0] == []


def test_amplify_tiles_and_multiplies_boxes(detector, noiseless_clock, forge):
    scene = forge(0.7, 5)
    amplified = amplify(scene.raster, 3)
    assert amplified.shape == (192, 192, 3)
    np.testing.assert_array_equal(amplified.pixels[64:128, 128:192], scene.raster.pixels)
    _, obs = detector.detect(amplified, noiseless_clock)
    assert obs.box_count_B == 45
    assert obs.object_count_o == 9
    assert amplify(scene.raster, 1) is scene.raster
    with pytest.raises(ValueError):
        amplify(scene.raster, 0)


def test_resampling_loss_drops_copies(detector, forge):
    handle = LocalDetectorHandle(detector)
    scene = forge(0.9, 12)
    assert handle.query(attenuated_tiling(scene.raster, 3, 1.0)).object_count == 9
    assert handle.query(attenuated_tiling(scene.raster, 3, 0.0)).object_count == 1


@pytest.mark.parametrize('k', [2, 3])
def test_resize_back_keeps_the_original_size(forge, k):
    scene = forge(0.9, 12)
    resized = amplify(scene.raster, k, resize_back=True, degradation=0.7)
    assert resized.shape == scene.raster.shape
    h, w, c = scene.raster.shape
    tiled = attenuated_tiling(scene.raster, k, 0.7).pixels
    block_means = tiled.reshape(h, k, w, k, c).mean(axis=(1, 3))
    np.testing.assert_allclose(resized.pixels, block_means, atol=1e-5)


def test_copy_attenuation():
    np.testing.assert_array_equal(copy_attenuation(1, 0.1), [[1.0]])
    ramp = copy_attenuation(3, 0.25)
    assert ramp[0, 0] == 1.0
    assert ramp[2, 2] == pytest.approx(0.25)
    assert np.all(np.diff(ramp.ravel()) < 0)


def test_modeled_timing_decomposes(detector, noiseless_clock, forge):
    scene = forge(0.8, 10)
    _, obs = detector.detect(scene.raster, noiseless_clock)
    cost = detector.nms_cost
    assert obs.neural_time == pytest.approx(detector.neural_cost_fixed + detector.neural_cost_per_pixel * 64 * 64)
    assert obs.nms_time == pytest.approx(cost.fixed_cost + cost.cost_per_iteration + 9 * cost.cost_per_comparison)
    assert obs.total_time == pytest.approx(obs.neural_time + obs.nms_time)
    assert obs.noise_realization == pytest.approx(0.0, abs=1e-15)


def test_more_contrast_never_removes_boxes(detector, noiseless_clock, forge):
    pixels = forge(0.9, 12, n_objects=2).raster.pixels
    counts, top_scores = [], []
    for alpha in np.linspace(0.0, 1.0, 21):
        detections, obs = detector.detect(Raster(CANVAS_LEVEL + alpha * (pixels - CANVAS_LEVEL)), noiseless_clock)
        counts.append(obs.box_count_B)
        top_scores.append(max((d.score for d in detections), default=0.0))
    assert counts[0] == 0
    assert counts[-1] == 24
    assert counts == sorted(counts)
    assert top_scores == sorted(top_scores)


def test_higher_target_scores_never_lower_the_box_count(detector, noiseless_clock, forge):
    counts = [detector.detect(forge(score, 9).raster, noiseless_clock)[1].box_count_B for score in (0.65, 0.75, 0.85, 0.95)]
    assert counts == sorted(counts)
    assert counts[0] >= 9


def test_more_boxes_take_longer(detector, noiseless_clock, forge):
    times = [detector.detect(forge(0.8, n).raster, noiseless_clock)[1].nms_time for n in (2, 8, 20, 36)]
    assert times == sorted(times)
    assert len(set(times)) == 4


def test_remote_rtt_clock_adds_jitter(detector, forge):
    clock = Clock(ClockSpec(mode='remote_rtt', jitter=NoiseSpec('constant', {'value': 1e-3})))
    _, obs = detector.detect(forge(0.8, 4).raster, clock)
    assert obs.total_time == pytest.approx(obs.neural_time + obs.nms_time + 1e-3)
    assert obs.mode == 'remote_rtt'


def test_noise_is_reproducible(detector, forge):
    spec = ClockSpec(noise=NoiseSpec('gaussian', {'sigma': 1e-4}), repeats=5, rng_seed=3)
    scene = forge(0.8, 4)
    first = detector.detect(scene.raster, Clock(spec))[1]
    second = detector.detect(scene.raster, Clock(spec))[1]
    assert first == second
    assert first.noise_realization != 0.0


def test_wall_clock_mode_measures_real_time(detector, forge):
    _, obs = detector.detect(forge(0.8, 4).raster, Clock.noiseless('wall_clock'))
    assert obs.total_time > 0
    assert obs.box_count_B == 4
    assert obs.mode == 'wall_clock'


def test_variants_share_weights_and_detections(detector, noiseless_clock, forge):
    scene = forge(0.8, 20, n_objects=2)
    constant = detector.with_variant('constant_time', capacity=64)
    delayed = detector.with_variant('random_delay', delay=NoiseSpec('uniform', {'low': 0.0, 'high': 1e-3}))
    greedy_dets, greedy_obs = detector.detect(scene.raster, noiseless_clock)
    ct_dets, ct_obs = constant.detect(scene.raster, noiseless_clock)
    rd_dets, rd_obs = delayed.detect(scene.raster, Clock.noiseless())
    assert greedy_dets == ct_dets == rd_dets
    assert ct_obs.comparison_count == 64 * 63 // 2
    assert rd_obs.nms_time >= greedy_obs.nms_time


def test_constant_time_needs_capacity():
    with pytest.raises(ConfigError):
        SyntheticDetector(nms_variant='constant_time')


def test_config_round_trip(detector):
    rebuilt = SyntheticDetector.from_dict(detector.to_dict())
    assert rebuilt.to_dict() == detector.to_dict()
    with pytest.raises(ConfigError):
        SyntheticDetector.from_dict({'detection_threshold': 0.6, 'colour': 'red'})


def test_grid_validation():
    with pytest.raises(ConfigError):
        AnchorGridConfig(period=12)
    with pytest.raises(ConfigError):
        AnchorGridConfig(window=2)
    assert AnchorGridConfig().residues == 8


def test_random_scenes_respect_ranges(detector):
    scenes = detector.random_scenes(np.random.default_rng(0), 5, (0.7, 0.8), (3, 6), (1, 2))
    assert [s.scene_id for s in scenes] == list(range(5))
    for s in scenes:
        assert 0.7 <= s.target_score <= 0.8
        assert 3 <= s.n_boxes <= 6
        assert s.raster.width == 64 * s.n_objects


def test_local_handle_counts_queries(detector, forge):
    handle = LocalDetectorHandle(detector)
    result = handle(forge(0.8, 3).raster)
    assert result.detected
    assert result.observation.box_count_B == 3
    assert handle.query_count == 1
