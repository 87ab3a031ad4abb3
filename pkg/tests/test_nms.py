import itertools

import numpy as np
import pytest

from nmsleak.errors import CapacityExceededError, ConfigError
from nmsleak.geometry import BoundingBox, Detection, iou
from nmsleak.nms import (NmsCostModel, NmsInput, constant_time_comparisons, constant_time_nms, greedy_nms,
                         modeled_nms_time, random_delay_nms, run_nms_variant)
from nmsleak.noise import NoiseSpec


def reference_nms(detections, threshold):
    """Independent greedy NMS: sort once, then keep a box unless a kept box overlaps it."""
    def overlap(a, b):
        iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
        ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
        if iw <= 0 or ih <= 0:
            return 0.0
        inter = iw * ih
        union = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter
        return 1.0 if a == b else inter / union

    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    kept = []
    for i in order:
        if all(overlap(detections[j].box, detections[i].box) < threshold for j in kept):
            kept.append(i)
    return [detections[i] for i in kept]


def check_against_reference(make_detections, cases, max_boxes, seed):
    rng = np.random.default_rng(seed)
    for case in range(cases):
        n = int(rng.integers(0, max_boxes + 1))
        threshold = float(rng.choice([0.3, 0.5, 0.7]))
        dets = make_detections(n, seed=case)
        outcome = greedy_nms(NmsInput(dets, threshold))
        assert list(outcome.kept) == reference_nms(dets, threshold)
        assert outcome.comparison_count <= outcome.object_count * n
        assert outcome.comparison_count == sum(outcome.remaining_sizes)
        assert outcome.object_count == len(outcome.kept) == outcome.outer_iterations


def test_matches_reference_on_random_inputs(make_detections):
    check_against_reference(make_detections, cases=300, max_boxes=120, seed=123)


@pytest.mark.slow
def test_matches_reference_on_large_random_inputs(make_detections):
    check_against_reference(make_detections, cases=1000, max_boxes=200, seed=321)


@pytest.mark.parametrize('threshold', [0.3, 0.5, 0.7])
def test_dropped_boxes_overlap_a_stronger_kept_box(make_detections, threshold):
    for seed in range(40):
        dets = make_detections(60, seed=seed)
        kept = greedy_nms(NmsInput(dets, threshold)).kept
        kept_ids = {id(d) for d in kept}
        for det in dets:
            if id(det) in kept_ids:
                continue
            assert any(iou(k.box, det.box) >= threshold and k.score >= det.score for k in kept)


@pytest.mark.parametrize('threshold', [0.3, 0.5, 0.7])
def test_kept_boxes_are_mutually_compatible(make_detections, threshold):
    for seed in range(40):
        kept = greedy_nms(NmsInput(make_detections(60, seed=seed), threshold)).kept
        for a, b in itertools.combinations(kept, 2):
            assert iou(a.box, b.box) < threshold


def test_adding_a_weakest_box_never_lowers_the_comparison_count(make_detections):
    rng = np.random.default_rng(5)
    for seed in range(60):
        dets = make_detections(int(rng.integers(1, 50)), seed=seed)
        weakest = min(d.score for d in dets)
        x, y = rng.uniform(0, 100, 2)
        extra = Detection(BoundingBox(x, y, x + 10, y + 10), 0, weakest / 2)
        before = greedy_nms(NmsInput(dets, 0.5))
        after = greedy_nms(NmsInput(dets + [extra], 0.5))
        assert after.comparison_count >= before.comparison_count
        assert after.kept[:before.object_count] == before.kept


def test_a_strong_box_can_lower_the_comparison_count():
    # a new top box covering every other one turns n(n-1)/2 comparisons into n
    dets = [Detection(BoundingBox(10 * i, 0, 10 * i + 10, 10), 0, 0.5) for i in range(6)]
    cover = Detection(BoundingBox(0, 0, 60, 10), 0, 0.9)
    assert greedy_nms(NmsInput(dets, 0.1)).comparison_count == 15
    assert greedy_nms(NmsInput(dets + [cover], 0.1)).comparison_count == 6


def test_empty_input():
    outcome = greedy_nms(NmsInput([], 0.5))
    assert outcome.kept == ()
    assert outcome.comparison_count == 0
    assert outcome.outer_iterations == 0


def test_single_cluster_costs_b_minus_one_comparisons():
    dets = [Detection(BoundingBox(i * 0.1, 0, 10 + i * 0.1, 10), 0, 0.5 + i / 100) for i in range(12)]
    outcome = greedy_nms(NmsInput(dets, 0.45))
    assert outcome.object_count == 1
    assert outcome.kept[0].score == pytest.approx(0.61)
    assert outcome.comparison_count == 11


def test_disjoint_boxes_cost_quadratic_comparisons():
    dets = [Detection(BoundingBox(20 * i, 0, 20 * i + 10, 10), 0, 0.5) for i in range(10)]
    outcome = greedy_nms(NmsInput(dets, 0.45))
    assert outcome.object_count == 10
    assert outcome.comparison_count == 45


def test_score_ties_go_to_the_lowest_index():
    a = Detection(BoundingBox(0, 0, 10, 10), 1, 0.8)
    b = Detection(BoundingBox(0.5, 0, 10.5, 10), 2, 0.8)
    assert greedy_nms(NmsInput([a, b], 0.45)).kept == (a,)
    assert greedy_nms(NmsInput([b, a], 0.45)).kept == (b,)


def test_threshold_must_be_open_unit_interval():
    with pytest.raises(ConfigError):
        NmsInput([], 1.0)


@pytest.mark.parametrize('threshold', [0.3, 0.5, 0.7])
def test_constant_time_matches_greedy_with_fixed_cost(make_detections, threshold):
    capacity = 40
    for seed in range(capacity + 1):
        dets = make_detections(seed, seed=seed)
        nms_input = NmsInput(dets, threshold)
        padded = constant_time_nms(nms_input, capacity)
        assert padded.kept == greedy_nms(nms_input).kept
        assert padded.comparison_count == constant_time_comparisons(capacity) == 780
        assert padded.padded


def test_constant_time_capacity_exceeded(make_detections):
    with pytest.raises(CapacityExceededError):
        constant_time_nms(NmsInput(make_detections(5), 0.5), 4)


def test_random_delay_is_seeded_and_non_negative(make_detections):
    nms_input = NmsInput(make_detections(20), 0.5)
    delay = NoiseSpec('gaussian', {'mean': 0.0, 'sigma': 1e-3})
    first = random_delay_nms(nms_input, delay, rng_seed=3)
    second = random_delay_nms(nms_input, delay, rng_seed=3)
    assert first == second
    assert first[1] >= 0.0
    assert first[0].kept == greedy_nms(nms_input).kept


def test_modeled_time():
    model = NmsCostModel(cost_per_comparison=1e-5, cost_per_iteration=1e-4, fixed_cost=1e-3)
    dets = [Detection(BoundingBox(20 * i, 0, 20 * i + 10, 10), 0, 0.5) for i in range(4)]
    outcome = greedy_nms(NmsInput(dets, 0.45))
    assert modeled_nms_time(outcome, model) == pytest.approx(1e-3 + 4 * 1e-4 + 6 * 1e-5)


def test_variant_dispatch(make_detections):
    nms_input = NmsInput(make_detections(8), 0.5)
    assert run_nms_variant(nms_input, 'greedy')[1] == 0.0
    with pytest.raises(ConfigError):
        run_nms_variant(nms_input, 'constant_time')
    with pytest.raises(ConfigError):
        run_nms_variant(nms_input, 'soft')
