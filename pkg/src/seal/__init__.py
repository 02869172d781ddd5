from seal.services import SealRuntimeService
from seal.utils import _setup_logging

__version__ = "0.1.0"

_setup_logging()
