"""
config.py — Central configuration for the crowd-flow forecasting engine.
"""
import os

# ── Grid defaults ─────────────────────────────────────────────────────────────
DEFAULT_INTERVAL_SECONDS = 1800          # 30 min
SECONDS_PER_DAY = 86400

# ── Model defaults ────────────────────────────────────────────────────────────
DEFAULT_FILTERS = 64
DEFAULT_KERNEL = 3
DEFAULT_RESIDUAL_UNITS = 4
DEFAULT_EXT_HIDDEN = 10
DEFAULT_LEN_CLOSENESS = 3
DEFAULT_LEN_PERIOD = 1
DEFAULT_LEN_TREND = 1
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99

# ── Training defaults ─────────────────────────────────────────────────────────
BATCH_SIZE = 32
LEARNING_RATE = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
PATIENCE_EPOCHS = 10
MAX_EPOCHS = 100
FINETUNE_EPOCHS = 10
VALIDATION_FRACTION = 0.1

# ── External features ─────────────────────────────────────────────────────────
# One-hot weather block; the last slot is reserved for unknown codes.
DEFAULT_WEATHER_CATEGORIES = 4
DEFAULT_TEMPERATURE_RANGE = (-24.6, 41.0)   # °C
DEFAULT_WIND_RANGE = (0.0, 48.6)             # mph

# ── Serving defaults ──────────────────────────────────────────────────────────
RETENTION_DAYS = 2
DEFAULT_HORIZON = 4
DEFAULT_TICK_SECONDS = 60.0
KV_TIMEOUT_SECONDS = 2.0
CACHE_URL_ENV = "CITYFLOW_CACHE_URL"
TRAJ_KEY_FMT = "traj:{t}"
EXT_KEY_FMT = "ext:{t}"
PRED_KEY_FMT = "flow:pred:{t}"
API_VERSION = "v1"
FUSION_THRESHOLD = 0.3

# ── Binary formats ────────────────────────────────────────────────────────────
FLW1_MAGIC = b"FLW1"
STRN_MAGIC = b"STRN"
STRN_VERSION = 1

# ── CSV schemas ───────────────────────────────────────────────────────────────
TRAJECTORY_COLUMNS = ["object_id", "timestamp", "lon", "lat"]
EXTERNAL_COLUMNS = ["interval", "is_holiday", "weather_code", "temperature", "wind_speed"]
HISTORY_COLUMNS = ["epoch", "train_loss", "val_rmse"]

# ── File paths ────────────────────────────────────────────────────────────────
BASE_DIR = os.path.dirname(os.path.abspath(__file__))
REPORTS_DIR = os.path.join(BASE_DIR, "reports")
EXPERIMENTS_DIR = os.path.join(BASE_DIR, "experiments")
LOG_PATH = os.path.join(REPORTS_DIR, "run.log")
