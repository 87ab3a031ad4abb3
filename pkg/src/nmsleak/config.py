"""Run configuration: packaged defaults, user files, flag overrides and seed streams."""

import copy
import os
import pathlib
import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Union

import numpy as np
import yaml

from .clock import ClockSpec
from .detector import SyntheticDetector
from .errors import ConfigError
from .evasion import EvasionConfig
from .logger import logger

EXPERIMENT_KINDS = (
    'profile', 'amplify-sweep', 'calibrate', 'evade', 'evade-baseline', 'lambda-sweep',
    'infer-dataset', 'fp-bound-curve', 'countermeasure-eval', 'serve',
)
TOP_LEVEL_KEYS = ('seed', 'detector', 'clock', 'scenes', 'experiments')


class ConfigManager:

    def __init__(self):
        self.package_root = pathlib.Path(__file__).parent.absolute()
        self.data_dir = self.package_root / 'data'

        if not self.data_dir.exists():
            raise FileNotFoundError(f"Package data directory not found at {self.data_dir}")

        self._data_files = {
            'default_config': self.data_dir / 'default_config.yaml',
        }
        self._validated = False
        self._validate_data_files()

    def _validate_data_files(self):
        if self._validated:
            return
        for name, path in self._data_files.items():
            if not path.exists():
                raise FileNotFoundError(f"Required data file '{name}' not found at {path}")
        self._validated = True

    def get_data_path(self, name: str) -> str:
        if name not in self._data_files:
            raise ValueError(f"Unknown data file '{name}'. Available: {list(self._data_files.keys())}")
        return str(self._data_files[name])

    @property
    def available_data_files(self) -> List[str]:
        return list(self._data_files.keys())

    def defaults(self) -> Dict[str, Any]:
        with open(self.get_data_path('default_config')) as handle:
            return yaml.safe_load(handle)

    def load(self, config_path: Optional[Union[str, pathlib.Path]] = None,
             overrides: Iterable[str] = (), seed: Optional[int] = None) -> Dict[str, Any]:
        """Defaults, deep-merged with the user file, then `key.path=value` overrides, then `seed`."""
        config = self.defaults()
        if config_path is not None:
            path = pathlib.Path(config_path)
            if not path.is_file():
                raise ConfigError('config', f"file not found: {path}")
            try:
                with open(path) as handle:
                    user = yaml.safe_load(handle) or {}
            except yaml.YAMLError as e:
                raise ConfigError('config', f"could not parse {path}: {e}") from e
            if not isinstance(user, dict):
                raise ConfigError('config', f"{path} must hold a mapping at the top level")
            config = deep_merge(config, user)
            logger.info(f"Loaded configuration from {path}")
        for override in overrides:
            apply_override(config, override)
        if seed is not None:
            config['seed'] = int(seed)
        validate_config(config)
        return config


def deep_merge(base: Mapping[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(dict(base))
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_override(config: Dict[str, Any], override: str) -> None:
    """Set a dotted key path from a `a.b.c=value` string; the value is parsed as YAML."""
    if '=' not in override:
        raise ConfigError(override, "override must look like 'key.path=value'")
    path, raw = override.split('=', 1)
    keys = [k for k in path.strip().split('.') if k]
    if not keys:
        raise ConfigError(override, 'empty key path')
    node = config
    for key in keys[:-1]:
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        if not isinstance(child, dict):
            raise ConfigError(path, f"'{key}' is not a section")
        node = child
    try:
        node[keys[-1]] = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(path, f"could not parse value '{raw}': {e}") from e


def validate_config(config: Mapping[str, Any]) -> None:
    for key in config:
        if key not in TOP_LEVEL_KEYS:
            raise ConfigError(key, f"unknown top-level key, expected one of {TOP_LEVEL_KEYS}")
    if not isinstance(config.get('seed'), int):
        raise ConfigError('seed', f"master seed must be an integer, got {config.get('seed')!r}")
    for kind in (config.get('experiments') or {}):
        if kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"experiments.{kind}", f"unknown experiment kind, expected one of {EXPERIMENT_KINDS}")


class SeedStreams:
    """Independent, named random streams derived from one master seed."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)

    def _sequence(self, name: str) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.master_seed, spawn_key=(zlib.crc32(name.encode('utf-8')),))

    def generator(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self._sequence(name))

    def seed(self, name: str) -> int:
        return int(self._sequence(name).generate_state(1)[0])


@dataclass
class RunConfig:
    kind: str
    settings: Dict[str, Any]
    output_dir: pathlib.Path
    streams: SeedStreams = field(init=False)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError('kind', f"unknown experiment kind '{self.kind}', expected one of {EXPERIMENT_KINDS}")
        self.output_dir = pathlib.Path(self.output_dir)
        self.streams = SeedStreams(self.seed)

    @classmethod
    def from_sources(cls, kind: str, config_path: Optional[str] = None, overrides: Iterable[str] = (),
                     seed: Optional[int] = None, output_dir: Optional[str] = None) -> 'RunConfig':
        settings = ConfigManager().load(config_path, overrides, seed)
        if output_dir is None:
            output_dir = os.path.join(os.environ.get('RUN_DIR', 'runs'), f"{kind}-{settings['seed']}")
        return cls(kind, settings, pathlib.Path(output_dir))

    @property
    def seed(self) -> int:
        return int(self.settings['seed'])

    @property
    def params(self) -> Dict[str, Any]:
        return dict((self.settings.get('experiments') or {}).get(self.kind) or {})

    def detector(self) -> SyntheticDetector:
        data = copy.deepcopy(self.settings.get('detector') or {})
        if data.get('weight_seed') is None:
            data['weight_seed'] = self.streams.seed('detector')
        return SyntheticDetector.from_dict(data)

    def clock_spec(self, stream: str = 'clock') -> ClockSpec:
        data = copy.deepcopy(self.settings.get('clock') or {})
        if data.get('rng_seed') is None:
            data['rng_seed'] = self.streams.seed(stream)
        return ClockSpec.from_dict(data)

    def evasion_config(self, overrides: Optional[Mapping[str, Any]] = None) -> EvasionConfig:
        base = ((self.settings.get('experiments') or {}).get('evade') or {}).get('evasion') or {}
        data = deep_merge(base, self.params.get('evasion') or {})
        data = deep_merge(data, overrides or {})
        return EvasionConfig.from_dict(data)

    def scene_settings(self) -> Dict[str, Any]:
        return dict(self.settings.get('scenes') or {})

    def snapshot(self) -> str:
        return yaml.safe_dump({'kind': self.kind, **self.settings}, sort_keys=True)
