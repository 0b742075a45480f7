import os

import yaml

from .errors import InvalidConfig
from .logging_config import logger, setup_logging

config_path = os.getenv("TRACE_SIGNALS_CONFIG", "config.yaml")

DEFAULTS = {
    "logging": {"log_level": "info", "log_file": None},
    "output": {"directory": "traces"},
    "simulation": {
        "delay_min": 1,
        "delay_max": 5,
        "duplicate_prob": 0.0,
        "reorder": True,
        "tick_ms": 10,
        "max_ticks": 100_000,
        "actions_per_ops": 10,
        "signals": 5,
    },
    "demo": {"actions": 12},
    "actions": {"fuzzy_threshold": 90},
    "rdf": {"base_iri": "urn:trace-signals:"},
    "exhaustive": {"max_transactions": 6},
}


def set_defaults(cfg: dict, defaults: dict, mode: str = "default", merge_keys: list | None = None) -> dict:
    merged = cfg.copy()
    for key, value in defaults.items():
        if key not in merged:
            merged[key] = value
        elif mode == "override":
            merged[key] = value
        elif mode == "merge":
            if (merge_keys is None or key in merge_keys) and isinstance(value, dict) and isinstance(merged[key], dict):
                merged[key] = set_defaults(merged[key], value, mode="merge", merge_keys=merge_keys)
    return merged


def load_config(path: str | None) -> dict:
    if not path or not os.path.isfile(path):
        return set_defaults({}, DEFAULTS, mode="merge")
    try:
        with open(path, "r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise InvalidConfig(f"cannot read config {path}: {e}") from e
    loaded = loaded or {}
    if not isinstance(loaded, dict):
        raise InvalidConfig(f"config {path} must be a mapping, got {type(loaded).__name__}")
    return set_defaults(loaded, DEFAULTS, mode="merge")


config = load_config(config_path)

log_level = str(config["logging"].get("log_level") or "info").upper()
LOG_FILE = config["logging"].get("log_file")

setup_logging(log_level, LOG_FILE)

# --- Config ---
OUTPUT_DIRECTORY = os.getenv("TRACE_SIGNALS_OUTPUT_DIR") or config["output"].get("directory", "traces")

SIM_DELAY_MIN = int(config["simulation"]["delay_min"])
SIM_DELAY_MAX = int(config["simulation"]["delay_max"])
SIM_DUPLICATE_PROB = float(config["simulation"]["duplicate_prob"])
SIM_REORDER = bool(config["simulation"]["reorder"])
SIM_TICK_MS = int(config["simulation"]["tick_ms"])
SIM_MAX_TICKS = int(config["simulation"]["max_ticks"])
SIM_ACTIONS_PER_OPS = int(config["simulation"]["actions_per_ops"])
SIM_SIGNALS = int(config["simulation"]["signals"])

DEMO_ACTIONS = int(config["demo"]["actions"])
FUZZY_THRESHOLD = int(config["actions"]["fuzzy_threshold"])
RDF_BASE_IRI = str(config["rdf"]["base_iri"])
EXHAUSTIVE_MAX_TRANSACTIONS = int(config["exhaustive"]["max_transactions"])

if SIM_DELAY_MIN < 1 or SIM_DELAY_MAX < SIM_DELAY_MIN:
    raise InvalidConfig(f"simulation delays must satisfy 1 <= delay_min <= delay_max, got {SIM_DELAY_MIN}..{SIM_DELAY_MAX}")

logger.debug(f"Configuration loaded from {config_path if os.path.isfile(config_path) else 'built-in defaults'}")
