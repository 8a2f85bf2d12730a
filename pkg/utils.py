"""
Shared helpers: config and document loading, logging setup, hashing
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

from errors import InputError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent / "config.yaml"

DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    "solver": {
        "dx_m": 100.0,
        "n_v": 32,
        "n_w": 100,
        "v_min_mps": 0.5,
        "v_max_mps": 16.0,
        "tie_epsilon_s": 1e-12,
    },
    "simulation": {"tick_s": 1.0, "substep_s": 0.05, "max_duration_s": 21600.0},
    "course": {"smoothing_window": 1},
    "logging": {"level": "INFO", "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s"},
}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def load_config(path: Optional[PathLike] = None) -> Dict[str, Dict[str, Any]]:
    """Load config.yaml merged over the built-in defaults"""
    if path is None:
        path = os.environ.get("PACER_CONFIG") or DEFAULT_CONFIG_PATH
    path = Path(path)

    config = {section: dict(values) for section, values in DEFAULT_CONFIG.items()}
    if not path.exists():
        logger.debug("No config file at %s, using defaults", path)
        return config

    with open(path, "r") as f:
        try:
            loaded = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise InputError(f"invalid YAML: {e}", source=str(path))

    if not isinstance(loaded, dict):
        raise InputError("top level must be a mapping", source=str(path))
    for section, values in loaded.items():
        if isinstance(values, dict):
            config.setdefault(section, {}).update(values)
        else:
            config[section] = values
    return config


def load_json_document(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, encoding="utf-8-sig") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise InputError("file not found", source=str(path))
    except json.JSONDecodeError as e:
        raise InputError(f"invalid JSON at line {e.lineno}: {e.msg}", source=str(path))
    if not isinstance(data, dict):
        raise InputError("expected a JSON object at top level", source=str(path))
    return data


def write_json_document(data: Dict[str, Any], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def configure_logging(level: Union[str, int] = "INFO", fmt: Optional[str] = None) -> None:
    logging.basicConfig(
        level=level,
        format=fmt or DEFAULT_CONFIG["logging"]["format"],
        force=True,
    )


def canonical_json(payload: Any) -> bytes:
    """Stable byte encoding used for fingerprints (sorted keys, repr floats)"""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def fingerprint(payload: Any) -> str:
    return f"{fnv1a_64(canonical_json(payload)):016x}"


def resolve_workers(requested: Optional[int] = None) -> int:
    """Worker count for the solver: explicit value, else PACER_THREADS, 0 meaning all cores"""
    if requested is None:
        raw = os.environ.get("PACER_THREADS", "0").strip() or "0"
        try:
            requested = int(raw)
        except ValueError:
            raise InputError(f"PACER_THREADS must be an integer, got {raw!r}")
    if requested < 0:
        raise ValueError("worker count must be >= 0")
    if requested == 0:
        return os.cpu_count() or 1
    return requested
