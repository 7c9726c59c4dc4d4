import logging
from utils import resource_path

logger = logging.getLogger(__name__)

# Application identifiers
APP_NAME = "chainbench"
APP_VERSION_FILE = "version.txt"
RECIPES_DIR = "recipes"

def get_version():
    """
    Get the application version from the version file.
    This is the centralized version reading function used by reports and traces.

    Returns:
        str: Version string, or "0.0.0" if version file can't be read
    """
    try:
        with open(resource_path(APP_VERSION_FILE), "r", encoding="utf-8") as f:
            return f.read().strip()
    except Exception as e:
        logger.error(f"Error reading version file: {e}")
        return "0.0.0"

APP_VERSION = get_version()

# Experiment config schema versions this build accepts
CONFIG_SCHEMA_VERSION = "1.0"
SUPPORTED_SCHEMA_SPECIFIER = ">=1.0,<2.0"

# Simulated time: 1 tick = 1 ms
TICKS_PER_SECOND = 1000

# Hashing
HASH_ALGORITHM = "sha256"
DIGEST_SIZE = 32
HASH_SPACE = 2 ** 256

# Ledger defaults
DEFAULT_BATCH_SIZE = 500
DEFAULT_CONFIRMATION_DEPTH = 5

# State store defaults
DEFAULT_NUM_BUCKETS = 1024

# Contract runtime defaults
DEFAULT_STEP_BUDGET = 10 ** 8

# PBFT defaults
DEFAULT_CHECKPOINT_INTERVAL = 10
DEFAULT_VIEW_CHANGE_BACKOFF_CAP = 4

# Network defaults
DEFAULT_QUEUE_CAPACITY = 1000
DEFAULT_DELAY_BASE_TICKS = 1
DEFAULT_DELAY_JITTER_TICKS = 4

# Workload defaults
DEFAULT_ZIPF_THETA = 0.99
DEFAULT_ACCOUNTS = 1024
YCSB_VALUE_SIZE = 100
IOHEAVY_KEY_SIZE = 20
IOHEAVY_VALUE_SIZE = 100

# Exit codes
EXIT_OK = 0
EXIT_ASSERTION_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3
EXIT_REPLAY_MISMATCH = 4
