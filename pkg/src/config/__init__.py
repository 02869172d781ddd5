import os
from typing import Final

LLM_BASE_URL = os.getenv('SEAL_LLM_BASE_URL')
LLM_MODEL = os.getenv('SEAL_LLM_MODEL', 'deepseek-v3')
LLM_API_KEY_ENV = os.getenv('SEAL_LLM_API_KEY_ENV', 'SEAL_LLM_API_KEY')
LLM_TIMEOUT = float(os.getenv('SEAL_LLM_TIMEOUT', '60'))
ZMQ_SERVER = os.getenv('SEAL_ZMQ_SERVER')
MEMORY_PATH = os.getenv('SEAL_MEMORY_PATH')

LLM_MAX_ATTEMPTS: Final = 3
LLM_BACKOFF_BASE: Final = 0.5
MAX_NESTING_DEPTH: Final = 256
BRUTE_FORCE_MAX_ENTITIES: Final = 200
EMBEDDING_DIM: Final = 256
DEFAULT_MAX_RETRIES: Final = 3
DEFAULT_MIN_LINK_SCORE: Final = 0.5
