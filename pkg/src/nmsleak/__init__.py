__version__ = "0.1.0"

from .cli import main
from .config import ConfigManager, RunConfig
from .detector import SyntheticDetector, amplify
from .experiments import ExperimentRunner
from .logger import logger
from .service import RemoteDetectorHandle, serve

__all__ = [
	"main",
	"ConfigManager",
	"RunConfig",
	"SyntheticDetector",
	"amplify",
	"ExperimentRunner",
	"RemoteDetectorHandle",
	"serve",
	"logger",
]
