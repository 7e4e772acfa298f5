"""
config.py — QLIP Lab
Single source of truth for all configuration.
Every stage reads its settings from a RunConfig built here; nothing else
parses TOML, environment variables or CLI overrides.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

from dotenv import load_dotenv

from errors import ConfigError
from models import BitMenu

# Always load .env relative to this file's directory, not cwd
BASE_DIR = Path(__file__).resolve().parent
load_dotenv(dotenv_path=BASE_DIR / ".env")

# ── Directories ────────────────────────────────────────────────────────────────

DEFAULT_CACHE_DIR = BASE_DIR / "runs"

# ── Run defaults ───────────────────────────────────────────────────────────────

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "schedule": {
        "steps": 100,
        "beta_start": 1e-3,
        "beta_end": 0.2,
    },
    "model": {
        "data_dim": 4,
        "hidden": 64,
        "quant_layers": 6,
        "time_dim": 16,
        "embed_dim": 64,
        "outlier_scale": 64.0,
    },
    "denoiser": {
        "iterations": 3000,
        "batch_size": 128,
        "lr": 2e-3,
        "n_train": 4000,
    },
    "menu": {
        "b_low": 6,
        "b_med": 8,
        "b_high": 10,
        "weight_bits": 4,
    },
    "calibration": {
        "n_prompts": 256,
    },
    "t2q": {
        "epochs": 20,
        "lr": 1e-3,
        "batch_size": 32,
        "hidden": 128,
        "n_samples": 2000,
        "holdout": 0.2,
        "quality_metric": "gmm",
        "n_components": 8,
        "draws_per_prompt": 4,
    },
    "q2b": {
        "lambda_bit": 1.0,
        "group_size": 0,        # 0 → T / 5
        "forced_steps": -1,     # -1 → T / 10
        "variant": "full",
        "iterations": 5000,
        "lr": 0.01,
        "batch_size": 8,
        "n_prompts": 256,
        "criterion": "t2q",     # t2q | prompt_length
    },
    "sample": {
        "n_samples": 500,
        "batch": 1,
    },
    "eval": {
        "n_reference": 2000,
        "bandwidth": 0.0,       # 0 → median heuristic
        "batch_sweep": [1, 4, 16],
    },
    "ablate": {
        "lambda_bit": [0.1, 1.0, 10.0],
        "group_size": [10, 20, 50],
        "variant": ["full", "q_only", "q_plus_h", "q_plus_m"],
        "menu": [[4, 6, 8], [6, 8, 10], [8, 10, 12]],
        "quality_metric": ["gmm", "realism"],
        "batch": [1, 4, 16],
        "criterion": ["t2q", "prompt_length"],
    },
    "paths": {
        "cache_dir": "",
    },
}

VARIANTS = ("full", "q_only", "q_plus_h", "q_plus_m")
QUALITY_METRICS = ("gmm", "realism")
CRITERIA = ("t2q", "prompt_length")
ABLATION_AXES = tuple(DEFAULT_CONFIG["ablate"])


def cache_root(config: Optional["RunConfig"] = None) -> Path:
    """Artifact root: QLIP_CACHE_DIR, then paths.cache_dir, then <repo>/runs."""
    env = os.environ.get("QLIP_CACHE_DIR", "").strip()
    if env:
        return Path(env)
    if config is not None and config.data["paths"]["cache_dir"]:
        return Path(config.data["paths"]["cache_dir"])
    return DEFAULT_CACHE_DIR


# ── Hashing ────────────────────────────────────────────────────────────────────

def config_hash(payload: Any) -> str:
    """First 16 hex chars of sha256 over canonical JSON."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


# ── RunConfig ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class RunConfig:
    data: dict

    def section(self, name: str) -> dict:
        return self.data[name]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def steps(self) -> int:
        return int(self.data["schedule"]["steps"])

    @property
    def menu(self) -> BitMenu:
        m = self.data["menu"]
        return BitMenu(m["b_low"], m["b_med"], m["b_high"], weight_bits=m["weight_bits"])

    @property
    def group_size(self) -> int:
        value = int(self.data["q2b"]["group_size"])
        return value if value > 0 else max(1, self.steps // 5)

    @property
    def forced_steps(self) -> int:
        value = int(self.data["q2b"]["forced_steps"])
        return value if value >= 0 else self.steps // 10

    @property
    def hash(self) -> str:
        return config_hash(self.data)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Copy with dotted-key overrides applied (values already typed or strings)."""
        data = copy.deepcopy(self.data)
        for key, value in overrides.items():
            _apply_override(data, key, value)
        _validate(data)
        return RunConfig(data)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)


def load_run_config(path: Optional[str | Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Defaults, deep-merged with the TOML file at `path` (if any), then the
    dotted overrides (`q2b.lambda-bit` and `q2b.lambda_bit` are the same key).
    Unknown sections or keys raise ConfigError.
    """
    data = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with path.open("rb") as fh:
                loaded = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        _merge(data, loaded, prefix="")
    for key, value in (overrides or {}).items():
        _apply_override(data, key, value)
    _validate(data)
    return RunConfig(data)


def _merge(base: dict, incoming: Mapping, prefix: str) -> None:
    for key, value in incoming.items():
        key = key.replace("-", "_")
        where = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"'{where}' must be a table")
            _merge(base[key], value, prefix=f"{where}.")
        else:
            base[key] = _coerce(where, base[key], value)


def _apply_override(data: dict, dotted: str, value: Any) -> None:
    parts = [p.replace("-", "_") for p in dotted.split(".")]
    node = data
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key '{dotted}'")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"unknown config key '{dotted}'")
    node[leaf] = _coerce(dotted, node[leaf], value)


def _coerce(where: str, default: Any, value: Any) -> Any:
    """Convert `value` to the type of `default`; strings come from the command line."""
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                text = value.strip()
                value = json.loads(text) if text.startswith("[") else [v for v in text.split(",") if v.strip()]
            if not isinstance(value, list):
                raise ValueError(value)
            if default:
                return [_coerce(where, default[0], v) for v in value]
            return list(value)
        return str(value)
    except (TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"'{where}': cannot use {value!r} as {type(default).__name__}") from exc


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _validate(data: dict) -> None:
    sched = data["schedule"]
    steps = sched["steps"]
    _require(steps >= 2, f"schedule.steps must be at least 2, got {steps}")
    _require(
        0.0 < sched["beta_start"] <= sched["beta_end"] < 1.0,
        f"need 0 < beta_start <= beta_end < 1, got {sched['beta_start']} / {sched['beta_end']}",
    )

    model = data["model"]
    _require(model["quant_layers"] >= 3, f"model.quant_layers must be at least 3, got {model['quant_layers']}")
    for key in ("data_dim", "hidden", "embed_dim"):
        _require(model[key] >= 1, f"model.{key} must be positive")
    _require(model["time_dim"] >= 2 and model["time_dim"] % 2 == 0, "model.time_dim must be an even number >= 2")
    _require(model["outlier_scale"] >= 0, "model.outlier_scale must be non-negative")

    m = data["menu"]
    BitMenu(m["b_low"], m["b_med"], m["b_high"], weight_bits=m["weight_bits"])

    q2b = data["q2b"]
    _require(q2b["variant"] in VARIANTS, f"q2b.variant must be one of {VARIANTS}, got '{q2b['variant']}'")
    _require(q2b["group_size"] >= 0, "q2b.group_size must be >= 1 (or 0 for T/5)")
    _require(q2b["group_size"] <= steps, f"q2b.group_size cannot exceed schedule.steps ({steps})")
    _require(-1 <= q2b["forced_steps"] <= steps, f"q2b.forced_steps must lie in [0, {steps}] (or -1 for T/10)")
    _require(q2b["lambda_bit"] >= 0, "q2b.lambda_bit must be non-negative")
    _require(
        q2b["criterion"] in CRITERIA, f"q2b.criterion must be one of {CRITERIA}, got '{q2b['criterion']}'"
    )

    t2q = data["t2q"]
    _require(0.0 < t2q["holdout"] < 1.0, f"t2q.holdout must lie in (0, 1), got {t2q['holdout']}")
    _require(
        t2q["quality_metric"] in QUALITY_METRICS,
        f"t2q.quality_metric must be one of {QUALITY_METRICS}, got '{t2q['quality_metric']}'",
    )
    _require(t2q["n_samples"] >= 5, "t2q.n_samples must be at least 5")

    for section, key in (
        ("denoiser", "iterations"), ("denoiser", "batch_size"), ("denoiser", "n_train"),
        ("calibration", "n_prompts"), ("t2q", "epochs"), ("t2q", "batch_size"), ("t2q", "hidden"),
        ("t2q", "n_components"), ("t2q", "draws_per_prompt"), ("q2b", "iterations"), ("q2b", "batch_size"), ("q2b", "n_prompts"),
        ("sample", "batch"),
    ):
        _require(data[section][key] >= 1, f"{section}.{key} must be at least 1")
    _require(data["sample"]["n_samples"] >= 2, "sample.n_samples must be at least 2")
    _require(data["eval"]["n_reference"] >= 2, "eval.n_reference must be at least 2")
    _require(data["eval"]["bandwidth"] >= 0, "eval.bandwidth must be non-negative")
    _require(all(s >= 1 for s in data["eval"]["batch_sweep"]), "eval.batch_sweep sizes must be positive")
    _require(all(v in VARIANTS for v in data["ablate"]["variant"]), "ablate.variant lists an unknown variant")
    _require(all(v in CRITERIA for v in data["ablate"]["criterion"]), "ablate.criterion lists an unknown criterion")
    _require(
        all(isinstance(m, list) and len(m) == 3 for m in data["ablate"]["menu"]),
        "ablate.menu entries must be [b_low, b_med, b_high]",
    )
