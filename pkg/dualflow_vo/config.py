"""
dualflow-vo Config Loader

Loads and validates the JSON run configuration and simulator configuration.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import ConfigError


PROVIDERS = ("oracle", "correlation")
MASK_SUPERVISION = ("artificial", "gt")
TRAJECTORY_KINDS = ("line", "arc", "orbit")


def get_default_config() -> Dict[str, Any]:
    """Get default run configuration."""
    return {
        "version": 1,
        "mu": 0.5,
        "eta": 10.0,
        "radius": 3,
        "provider": "oracle",
        "noise_sigma": 0.0,
        "max_outer_iters": 8,
        "step_tol": 1e-6,
        "seed": 0,
        "single_flow": False,
        "invert_mask_weight": False,
        "damping": 1e-4,
        "depth_prior_weight": 1e-3,
        "divergence_patience": 3,
        "oracle_logit": 0.0,
        "mask_scale_factor": 3.0,
        "window": 3,
        "n_fixed": 2,
        "feature_dim": 25,
        "mask_supervision": "artificial",
        "init": {
            "pose_sigma": 0.02,
            "depth_sigma": 0.05,
        },
        "loss": {
            "alpha": 0.85,
            "lambda1": 100.0,
            "lambda2": 5.0,
            "lambda3": 0.05,
            "gamma": 0.9,
            "ssim_window": 7,
        },
    }


def get_default_sim_config() -> Dict[str, Any]:
    """Get default simulator configuration: a 6-frame 48x64 static scene."""
    return {
        "version": 1,
        "width": 64,
        "height": 48,
        "intrinsics": None,
        "n_frames": 6,
        "frame_interval": 0.1,
        "trajectory": {
            "kind": "line",
            "speed": 0.05,
            "direction": [1.0, 0.0, 0.0],
            "radius": 2.0,
        },
        "background": {
            "depth": 5.0,
            "normal": [0.0, 0.0, -1.0],
        },
        "objects": [],
        "texture_seed": 0,
        "noise_sigma": 0.0,
        "seed": 0,
    }


def _read_json(config_path: Path) -> Dict[str, Any]:
    text = config_path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{config_path}: {e.msg}", line=e.lineno, column=e.colno) from e
    if not isinstance(data, dict):
        raise ConfigError(f"{config_path}: top-level JSON value must be an object")
    return data


def _merge(defaults: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(config_path: Optional[Path] = None) -> Dict[str, Any]:
    """
    Load run configuration from a JSON file.

    Args:
        config_path: Path to config file; None yields the defaults

    Returns:
        Validated configuration dictionary

    Raises:
        ConfigError: on malformed JSON (with line/column) or invalid values
        OSError: if the file cannot be read
    """
    if config_path is None:
        return get_default_config()
    return validate_config(_read_json(config_path))


def load_sim_config(config_path: Optional[Path] = None) -> Dict[str, Any]:
    """Load simulator configuration; same contract as load_config."""
    if config_path is None:
        return get_default_sim_config()
    return validate_sim_config(_read_json(config_path))


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def validate_config(config: Dict[str, Any]) -> Dict[str, Any]:
    """Fill missing keys from defaults and check value ranges."""
    config = _merge(get_default_config(), config)
    _require(config["provider"] in PROVIDERS, f"provider must be one of {PROVIDERS}")
    _require(config["mask_supervision"] in MASK_SUPERVISION, f"mask_supervision must be one of {MASK_SUPERVISION}")
    _require(float(config["mu"]) > 0, "mu must be positive")
    _require(float(config["eta"]) >= 0, "eta must be non-negative")
    _require(int(config["radius"]) >= 1, "radius must be >= 1")
    _require(float(config["noise_sigma"]) >= 0, "noise_sigma must be non-negative")
    _require(int(config["max_outer_iters"]) >= 0, "max_outer_iters must be non-negative")
    _require(float(config["step_tol"]) > 0, "step_tol must be positive")
    _require(float(config["damping"]) > 0, "damping must be positive")
    _require(float(config["depth_prior_weight"]) >= 0, "depth_prior_weight must be non-negative")
    _require(int(config["divergence_patience"]) >= 1, "divergence_patience must be >= 1")
    _require(float(config["mask_scale_factor"]) >= 0, "mask_scale_factor must be non-negative")
    _require(int(config["window"]) >= 1, "window must be >= 1")
    _require(int(config["n_fixed"]) >= 2, "n_fixed must be >= 2")
    _require(int(config["feature_dim"]) >= 1, "feature_dim must be >= 1")
    _require(float(config["init"]["pose_sigma"]) >= 0, "init.pose_sigma must be non-negative")
    _require(float(config["init"]["depth_sigma"]) >= 0, "init.depth_sigma must be non-negative")
    loss = config["loss"]
    _require(0.0 <= float(loss["alpha"]) <= 1.0, "loss.alpha must lie in [0, 1]")
    _require(0.0 < float(loss["gamma"]) <= 1.0, "loss.gamma must lie in (0, 1]")
    _require(int(loss["ssim_window"]) >= 1 and int(loss["ssim_window"]) % 2 == 1, "loss.ssim_window must be odd")
    return config


def validate_sim_config(config: Dict[str, Any]) -> Dict[str, Any]:
    """Fill missing simulator keys from defaults and check value ranges."""
    config = _merge(get_default_sim_config(), config)
    _require(int(config["width"]) > 0 and int(config["height"]) > 0, "width and height must be positive")
    _require(int(config["n_frames"]) >= 2, "n_frames must be >= 2")
    _require(float(config["frame_interval"]) > 0, "frame_interval must be positive")
    _require(config["trajectory"]["kind"] in TRAJECTORY_KINDS, f"trajectory.kind must be one of {TRAJECTORY_KINDS}")
    _require(float(config["background"]["depth"]) > 0, "background.depth must be positive")
    _require(float(config["noise_sigma"]) >= 0, "noise_sigma must be non-negative")
    intr = config.get("intrinsics")
    if intr is not None:
        for key in ("fx", "fy", "cx", "cy"):
            _require(key in intr, f"intrinsics.{key} missing")
    for idx, obj in enumerate(config["objects"]):
        _require(len(obj.get("center", [])) == 3, f"objects[{idx}].center must have 3 values")
        _require(len(obj.get("half_extents", [])) == 2, f"objects[{idx}].half_extents must have 2 values")
        _require(all(float(h) > 0 for h in obj["half_extents"]), f"objects[{idx}].half_extents must be positive")
        obj.setdefault("twist", [0.0] * 6)
        _require(len(obj["twist"]) == 6, f"objects[{idx}].twist must have 6 values")
    return config


def config_digest(config: Dict[str, Any]) -> str:
    """sha256 of the canonical JSON form."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_config(config: Dict[str, Any], config_path: Path) -> None:
    config_path.parent.mkdir(parents=True, exist_ok=True)
    config_path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class LossConfig:
    """Weights of the self-supervised loss suite."""
    alpha: float = 0.85
    lambda1: float = 100.0
    lambda2: float = 5.0
    lambda3: float = 0.05
    gamma: float = 0.9
    ssim_window: int = 7
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> LossConfig:
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


@dataclass
class RunConfig:
    """Typed view of a validated run configuration."""
    mu: float = 0.5
    eta: float = 10.0
    radius: int = 3
    provider: str = "oracle"
    noise_sigma: float = 0.0
    max_outer_iters: int = 8
    step_tol: float = 1e-6
    seed: int = 0
    single_flow: bool = False
    invert_mask_weight: bool = False
    damping: float = 1e-4
    depth_prior_weight: float = 1e-3
    divergence_patience: int = 3
    oracle_logit: float = 0.0
    mask_scale_factor: float = 3.0
    window: int = 3
    n_fixed: int = 2
    feature_dim: int = 25
    mask_supervision: str = "artificial"
    init_pose_sigma: float = 0.02
    init_depth_sigma: float = 0.05
    loss: LossConfig = field(default_factory=LossConfig)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> RunConfig:
        data = validate_config(data)
        scalars = {
            k: data[k] for k in cls.__dataclass_fields__
            if k in data and k not in ("loss", "init")
        }
        return cls(
            **scalars,
            init_pose_sigma=float(data["init"]["pose_sigma"]),
            init_depth_sigma=float(data["init"]["depth_sigma"]),
            loss=LossConfig.from_dict(data["loss"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            k: getattr(self, k) for k in self.__dataclass_fields__
            if k not in ("loss", "init_pose_sigma", "init_depth_sigma")
        }
        out["init"] = {"pose_sigma": self.init_pose_sigma, "depth_sigma": self.init_depth_sigma}
        out["loss"] = {
            "alpha": self.loss.alpha,
            "lambda1": self.loss.lambda1,
            "lambda2": self.loss.lambda2,
            "lambda3": self.loss.lambda3,
            "gamma": self.loss.gamma,
            "ssim_window": self.loss.ssim_window,
        }
        return out

    def with_overrides(self, **overrides: Any) -> RunConfig:
        """Copy with CLI flags applied; None values are ignored."""
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(data)
