import logging
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml
from pydantic import ValidationError

from core.errors import ConfigurationError
from schemas.run_config import RunConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent / "ridde_config.yaml"

# Top-level keys every config file must define
REQUIRED_KEYS = ["profiles", "synthetic"]

# CLI override name -> (path inside the profile, type)
CAST = {
    "T": (("T",), int),
    "L": (("L",), int),
    "patch_len": (("patch", "patch_len"), int),
    "patch_stride": (("patch", "stride"), int),
    "window_stride": (("window_stride",), int),
    "d": (("d",), int),
    "K": (("K",), int),
    "temperature": (("temperature",), float),
    "dropout": (("dropout",), float),
    "rho": (("rho",), float),
    "lr": (("lr",), float),
    "steps": (("steps",), int),
    "batch_size": (("batch_size",), int),
    "ablation": (("ablation",), str),
    "seed": (("seed",), int),
    "eval_interval": (("eval_interval",), int),
    "checkpoint_interval": (("checkpoint_interval",), int),
    "val_fraction": (("val_fraction",), float),
    "threads": (("threads",), int),
}


def load_yaml(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"[CONFIG] {path} is not valid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigurationError(f"[CONFIG] {path} must hold a mapping at the top level")
    return raw


def _apply_overrides(profile: dict, overrides: Mapping[str, Any]) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in profile.items()}
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in CAST:
            raise ConfigurationError(f"[CONFIG] unknown override {key!r}; valid: {sorted(CAST)}")
        path, cast = CAST[key]
        try:
            val = cast(val)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"[CONFIG] Invalid value for {key!r}: {val!r} ({e})") from e
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = val
    return out


def load_run_config(path: Optional[str | Path] = None, profile: str = "desk",
                    overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Resolve a RunConfig: model defaults, then the named YAML profile, then
    explicit overrides (CLI flags). Raises ConfigurationError naming the
    offending key on anything invalid.
    """
    path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    raw = load_yaml(path)

    missing = [k for k in REQUIRED_KEYS if k not in raw]
    if missing:
        raise ConfigurationError(f"[CONFIG] Missing required keys in {path}: {missing}")
    profiles = raw["profiles"] or {}
    if profile not in profiles:
        raise ConfigurationError(f"[CONFIG] Unknown profile {profile!r}; available: {sorted(profiles)}")

    train = _apply_overrides(profiles[profile] or {}, overrides or {})
    try:
        cfg = RunConfig(
            profile=profile,
            train=train,
            synthetic=raw.get("synthetic") or {},
            period=raw.get("period"),
            study=raw.get("study") or {},
        )
    except ValidationError as e:
        raise ConfigurationError(f"[CONFIG] Invalid configuration in {path} (profile {profile!r}): {e}") from e

    logger.info(f"[CONFIG] Loaded profile {profile!r} from {path}")
    return cfg
