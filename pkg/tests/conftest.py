import numpy as np
import pytest

from nmsleak.clock import Clock, ClockSpec
from nmsleak.detector import QueryResult, SyntheticDetector
from nmsleak.geometry import BoundingBox, Detection
from nmsleak.noise import NoiseSpec


@pytest.fixture(scope='session')
def detector():
    return SyntheticDetector(weight_seed=7)


@pytest.fixture
def noiseless_clock():
    return Clock.noiseless()


@pytest.fixture
def noisy_clock():
    return Clock(ClockSpec(noise=NoiseSpec('gaussian', {'sigma': 3e-5}), rng_seed=11))


@pytest.fixture(scope='session')
def forge(detector):
    """Cached scene factory: forge(target_score, n_boxes, n_objects=1)."""
    cache = {}

    def _forge(target_score, n_boxes, n_objects=1):
        key = (target_score, n_boxes, n_objects)
        if key not in cache:
            cache[key] = detector.forge_scene(target_score, n_boxes, n_objects)
        return cache[key]
    return _forge


class MeanBrightnessHandle:
    """Stub detector: 'detects' while the mean pixel value stays above `threshold`.

    Its time is the mean pixel value, so a darker raster is a faster one.
    """

    def __init__(self, threshold):
        self.threshold = threshold
        self.query_count = 0

    def query(self, raster):
        self.query_count += 1
        mean = float(raster.pixels.mean())
        detections = (Detection(BoundingBox(0, 0, 8, 8), 0, 0.9),) if mean > self.threshold else ()
        return QueryResult(detections, mean)

    __call__ = query


@pytest.fixture
def brightness_handle():
    return MeanBrightnessHandle


def random_detections(rng, n, size=100.0):
    dets = []
    for _ in range(n):
        x, y = rng.uniform(0, size, 2)
        w, h = rng.uniform(2, 30, 2)
        dets.append(Detection(BoundingBox(x, y, x + w, y + h), 0, float(rng.uniform(0, 1))))
    return dets


@pytest.fixture
def make_detections():
    return lambda n, seed=0: random_detections(np.random.default_rng(seed), n)
