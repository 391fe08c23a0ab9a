"""eastlab: simulator and verification suite for East-model front dynamics."""

__version__ = "0.1.0"

from .core import Config, FrontedConfig, Params, ZeroLadder
from .streams import EventStream

__all__ = ["Config", "FrontedConfig", "Params", "ZeroLadder", "EventStream", "__version__"]
