import numpy as np
import pytest

from nmsleak.clock import Clock, ClockSpec
from nmsleak.errors import ConfigError
from nmsleak.noise import NoiseSpec


def test_none_is_zero():
    spec = NoiseSpec()
    assert spec.is_zero
    assert spec.sample(np.random.default_rng(0)) == 0.0
    assert spec.mean == 0.0


def test_from_dict_accepts_flat_and_nested_params():
    flat = NoiseSpec.from_dict({'family': 'gaussian', 'sigma': 2e-5})
    nested = NoiseSpec.from_dict({'family': 'gaussian', 'params': {'sigma': 2e-5}})
    assert flat == nested
    assert NoiseSpec.from_dict(None) == NoiseSpec()


def test_samples_are_reproducible():
    spec = NoiseSpec('lognormal', {'median': 1e-3, 'sigma': 0.2})
    a = spec.sample(np.random.default_rng(5), size=100)
    b = spec.sample(np.random.default_rng(5), size=100)
    np.testing.assert_array_equal(a, b)
    assert np.all(a > 0)


def test_means():
    assert NoiseSpec('uniform', {'low': 1.0, 'high': 3.0}).mean == 2.0
    assert NoiseSpec('constant', {'value': 0.5}).mean == 0.5
    shifted = NoiseSpec('shifted_lognormal', {'shift': 1.0, 'median': 1.0, 'sigma': 0.0})
    assert shifted.mean == pytest.approx(2.0)


def test_empirical_mean_matches():
    spec = NoiseSpec('lognormal', {'median': 1.0, 'sigma': 0.5})
    draws = spec.sample(np.random.default_rng(1), size=200000)
    assert draws.mean() == pytest.approx(spec.mean, rel=0.02)


def test_scaled_keeps_shape_parameter():
    spec = NoiseSpec('lognormal', {'median': 2.0, 'sigma': 0.3}).scaled(0.5)
    assert spec.params == {'median': 1.0, 'sigma': 0.3}


@pytest.mark.parametrize('family,params', [
    ('cauchy', {}),
    ('constant', {}),
    ('gaussian', {'sigma': -1.0}),
    ('uniform', {'low': 2.0, 'high': 1.0}),
    ('lognormal', {'median': 0.0, 'sigma': 0.1}),
])
def test_invalid_specs(family, params):
    with pytest.raises(ConfigError):
        NoiseSpec(family, params)


def test_clock_spec_validation_and_round_trip():
    with pytest.raises(ConfigError):
        ClockSpec(mode='sundial')
    with pytest.raises(ConfigError):
        ClockSpec(repeats=0)
    spec = ClockSpec(mode='remote_rtt', noise=NoiseSpec('gaussian', {'sigma': 1e-5}), repeats=3, rng_seed=4)
    assert ClockSpec.from_dict(spec.to_dict()) == spec


def test_clock_streams_are_seeded():
    spec = ClockSpec(noise=NoiseSpec('gaussian', {'sigma': 1.0}), rng_seed=9)
    assert [Clock(spec).phase_noise() for _ in range(2)] == [Clock(spec).phase_noise()] * 2
    assert Clock.noiseless().phase_noise() == 0.0
