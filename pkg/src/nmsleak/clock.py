"""Clock handles: how a detection query turns into a timing observation."""

import threading
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional

import numpy as np

from .errors import ConfigError
from .noise import NoiseSpec

CLOCK_MODES = ('modeled', 'wall_clock', 'remote_rtt')


@dataclass(frozen=True)
class ClockSpec:
    """Timing mode, per-phase noise, repeats per query and the noise seed.

    In `remote_rtt` mode an in-process detector adds `jitter` to the total,
    emulating the network path; a real network path is measured by
    `service.timed_query` instead.
    """
    mode: str = 'modeled'
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    repeats: int = 1
    rng_seed: Optional[int] = 0
    jitter: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if self.mode not in CLOCK_MODES:
            raise ConfigError('clock.mode', f"unknown mode '{self.mode}', expected one of {CLOCK_MODES}")
        if self.repeats < 1:
            raise ConfigError('clock.repeats', f"must be >= 1, got {self.repeats}")

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]]) -> 'ClockSpec':
        data = dict(data or {})
        return cls(
            mode=data.get('mode', 'modeled'),
            noise=NoiseSpec.from_dict(data.get('noise')),
            repeats=int(data.get('repeats', 1)),
            rng_seed=data.get('rng_seed', 0),
            jitter=NoiseSpec.from_dict(data.get('jitter')),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mode': self.mode,
            'noise': self.noise.to_dict(),
            'repeats': self.repeats,
            'rng_seed': self.rng_seed,
            'jitter': self.jitter.to_dict(),
        }


class Clock:
    """A measuring instrument with its own noise stream.

    Only one detect call may be in flight per clock; `measuring()` is the
    lock that detect holds while it takes a measurement.
    """

    def __init__(self, spec: Optional[ClockSpec] = None, rng: Optional[np.random.Generator] = None):
        self.spec = spec or ClockSpec()
        self.rng = rng if rng is not None else np.random.default_rng(self.spec.rng_seed)
        self._lock = threading.Lock()

    @property
    def mode(self) -> str:
        return self.spec.mode

    @property
    def repeats(self) -> int:
        return self.spec.repeats

    def measuring(self):
        return self._lock

    def phase_noise(self) -> float:
        return float(self.spec.noise.sample(self.rng))

    def network_jitter(self) -> float:
        return float(self.spec.jitter.sample(self.rng))

    @classmethod
    def noiseless(cls, mode: str = 'modeled') -> 'Clock':
        return cls(ClockSpec(mode=mode))
