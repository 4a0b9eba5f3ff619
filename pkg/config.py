"""
Configuration settings for the KV-cache eviction toolkit
Every runtime knob can be overridden from the environment or a .env file
"""

import logging
import os
from pathlib import Path

from dotenv import load_dotenv

from errors import ConfigError

# Load environment variables
load_dotenv()


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from None


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{name} must be a number, got {raw!r}") from None


def _env_str(name: str, default: str) -> str:
    raw = os.getenv(name)
    return default if raw is None or raw.strip() == "" else raw.strip()


# ============================================================================
# Logging
# ============================================================================

LOG_LEVEL = _env_str("KVSAGE_LOG_LEVEL", "WARNING").upper()
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# ============================================================================
# Model Configuration
# ============================================================================

# Shapes of the synthetic decoder the harness feeds
DEFAULT_LAYERS = _env_int("KVSAGE_LAYERS", 2)
DEFAULT_Q_HEADS = _env_int("KVSAGE_Q_HEADS", 4)
DEFAULT_KV_HEADS = _env_int("KVSAGE_KV_HEADS", 1)
DEFAULT_HEAD_DIM = _env_int("KVSAGE_HEAD_DIM", 16)
ROPE_BASE = _env_float("KVSAGE_ROPE_BASE", 10000.0)

# ============================================================================
# Workload Configuration
# ============================================================================

DEFAULT_SEQ_LEN = _env_int("KVSAGE_SEQ_LEN", 512)
DEFAULT_STEPS = _env_int("KVSAGE_STEPS", 8)
DEFAULT_SEED = _env_int("KVSAGE_SEED", 0)

# Share of every query that follows a persistent per-head direction
QUERY_CORRELATION = _env_float("KVSAGE_QUERY_CORRELATION", 0.9)

# Needle workload
NEEDLE_SEQ_LEN = _env_int("KVSAGE_NEEDLE_SEQ_LEN", 4096)
NEEDLE_BUDGET = _env_int("KVSAGE_NEEDLE_BUDGET", 512)
NEEDLE_POSITION = _env_int("KVSAGE_NEEDLE_POSITION", 2048)
NEEDLE_STRENGTH = _env_float("KVSAGE_NEEDLE_STRENGTH", 10.0)
NEEDLE_DAMPING = _env_float("KVSAGE_NEEDLE_DAMPING", 0.05)

# Prefill row chunk (bounds the N x N score buffer)
PREFILL_CHUNK = _env_int("KVSAGE_PREFILL_CHUNK", 256)

# ============================================================================
# Policy Configuration
# ============================================================================

DEFAULT_BUDGET = _env_int("KVSAGE_BUDGET", 128)
DEFAULT_BLOCK_SIZE = _env_int("KVSAGE_BLOCK_SIZE", 16)
DEFAULT_POOLING = _env_str("KVSAGE_POOLING", "minmax").lower()

# ============================================================================
# Sweep Configuration
# ============================================================================

SWEEP_BUDGETS = [512, 1024, 2048, 4096, 8192]
SWEEP_SEQ_LEN = _env_int("KVSAGE_SWEEP_SEQ_LEN", 4096)
SWEEP_SEEDS = list(range(1, 11))
SWEEP_POLICIES = ["sage", "streamllm_r", "streamllm_abs", "block_topk"]
WORKERS = _env_int("KVSAGE_WORKERS", 1)

# ============================================================================
# Analysis Configuration
# ============================================================================

ANALYSIS_TOP_K = [64]
ANALYSIS_TOP_P = [0.9, 0.99]

# Upper edges of the score-mass intervals (0,0.5] (0.5,0.8] (0.8,0.9] (0.9,1]
PIE_EDGES = [0.5, 0.8, 0.9]
PIE_LABELS = ["(0,0.5]", "(0.5,0.8]", "(0.8,0.9]", "(0.9,1]"]

# ============================================================================
# Accounting / Output
# ============================================================================

# fp16 caches
ELEMENT_BYTES = _env_int("KVSAGE_ELEMENT_BYTES", 2)

CSV_FLOAT_FORMAT = "%.6g"

BASE_DIR = Path(__file__).parent
OUTPUT_DIR = Path(_env_str("KVSAGE_OUTPUT_DIR", str(BASE_DIR / "results")))


def setup_logging(level: str = LOG_LEVEL) -> None:
    """Configure root logging once for CLI runs"""
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise ConfigError(f"Unknown log level: {level}")
    logging.basicConfig(level=numeric, format=LOG_FORMAT)
    logging.getLogger().setLevel(numeric)
