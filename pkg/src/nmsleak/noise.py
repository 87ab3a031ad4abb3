"""Parametric noise distributions for clocks, random-delay NMS and service jitter.

All draws go through a caller-owned ``numpy.random.Generator`` so every noise
realization is reproducible from the run's master seed.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np

from .errors import ConfigError

FAMILIES = ('none', 'constant', 'gaussian', 'uniform', 'lognormal', 'shifted_lognormal')


@dataclass(frozen=True)
class NoiseSpec:
    """A noise distribution in seconds.

    Families and their parameters:
        none:               always 0
        constant:           value
        gaussian:           mean (default 0), sigma
        uniform:            low, high
        lognormal:          median, sigma (log-space shape); draws exp(N(log median, sigma))
        shifted_lognormal:  shift, median, sigma; draws shift + lognormal
    """
    family: str = 'none'
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError('noise.family', f"unknown family '{self.family}', expected one of {FAMILIES}")
        p = self.params
        if self.family == 'constant' and 'value' not in p:
            raise ConfigError('noise.params.value', "constant noise needs 'value'")
        if self.family == 'gaussian' and p.get('sigma', 0.0) < 0:
            raise ConfigError('noise.params.sigma', 'sigma must be non-negative')
        if self.family == 'uniform':
            if 'low' not in p or 'high' not in p or p['low'] > p['high']:
                raise ConfigError('noise.params', "uniform noise needs low <= high")
        if self.family in ('lognormal', 'shifted_lognormal'):
            if p.get('median', 0.0) <= 0 or p.get('sigma', -1.0) < 0:
                raise ConfigError('noise.params', 'lognormal noise needs median > 0 and sigma >= 0')

    @classmethod
    def from_dict(cls, data: Optional[Union[Mapping[str, Any], 'NoiseSpec']]) -> 'NoiseSpec':
        if data is None:
            return cls()
        if isinstance(data, NoiseSpec):
            return data
        data = dict(data)
        family = data.pop('family', 'none')
        params = data.pop('params', None)
        if params is None:
            params = data
        return cls(family=family, params={k: float(v) for k, v in params.items()})

    def to_dict(self) -> Dict[str, Any]:
        return {'family': self.family, 'params': dict(self.params)}

    @property
    def mean(self) -> float:
        p = self.params
        if self.family == 'none':
            return 0.0
        if self.family == 'constant':
            return p['value']
        if self.family == 'gaussian':
            return p.get('mean', 0.0)
        if self.family == 'uniform':
            return (p['low'] + p['high']) / 2.0
        lognormal_mean = p['median'] * math.exp(p['sigma'] ** 2 / 2.0)
        if self.family == 'lognormal':
            return lognormal_mean
        return p.get('shift', 0.0) + lognormal_mean

    @property
    def is_zero(self) -> bool:
        if self.family == 'none':
            return True
        if self.family == 'constant':
            return self.params['value'] == 0.0
        if self.family == 'gaussian':
            return self.params.get('sigma', 0.0) == 0.0 and self.params.get('mean', 0.0) == 0.0
        return False

    def sample(self, rng: np.random.Generator, size: Optional[int] = None):
        """Draw one value (size=None) or an array of `size` values."""
        p = self.params
        shape = () if size is None else (size,)
        if self.family == 'none':
            out = np.zeros(shape)
        elif self.family == 'constant':
            out = np.full(shape, p['value'])
        elif self.family == 'gaussian':
            sigma = p.get('sigma', 0.0)
            if sigma == 0.0:
                out = np.full(shape, p.get('mean', 0.0))
            else:
                out = rng.normal(p.get('mean', 0.0), sigma, size=shape)
        elif self.family == 'uniform':
            out = rng.uniform(p['low'], p['high'], size=shape)
        else:
            out = rng.lognormal(math.log(p['median']), p['sigma'], size=shape)
            if self.family == 'shifted_lognormal':
                out = out + p.get('shift', 0.0)
        if size is None:
            return float(out)
        return np.asarray(out, dtype=float)

    def scaled(self, factor: float) -> 'NoiseSpec':
        """Same family with every time-valued parameter multiplied by `factor`."""
        if self.family == 'none':
            return self
        shape_keys = {'sigma'} if self.family in ('lognormal', 'shifted_lognormal') else set()
        params = {k: (v if k in shape_keys else v * factor) for k, v in self.params.items()}
        return NoiseSpec(self.family, params)
