from .config import AppConfig, Splits
from .core import AbGroup, BadRequest, CreativeService, InstrumentedBackend, in_request_path
from .api import create_app

__all__ = [
    "AppConfig",
    "Splits",
    "AbGroup",
    "BadRequest",
    "CreativeService",
    "InstrumentedBackend",
    "in_request_path",
    "create_app",
]
