"""Run configuration: YAML file validated into pydantic models."""

import hashlib
import json
import os
import re
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import UsageError

THREADS_ENV = "ROBOCOOKLAB_THREADS"
_ENV_PATTERN = re.compile(r"^\$\{([A-Za-z_][A-Za-z0-9_]*)\}$")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WorkspaceConfig(_Section):
    half_width: float = Field(0.05, gt=0)  # x, y in [-half_width, half_width]
    height: float = Field(0.1, gt=0)  # z in [0, height]


class SimConfig(_Section):
    n_particles: int = Field(300, ge=8)
    dough_size: List[float] = [0.06, 0.06, 0.03]
    reset_shape: str = "blob"
    yield_ratio: float = Field(1.05, gt=1.0)
    damping: float = Field(0.98, ge=0.0, le=1.0)
    iterations: int = Field(10, ge=1)
    substeps: int = Field(4, ge=1)
    phase_frames: int = Field(15, ge=1)
    frames: int = Field(16, ge=2)
    frame_dt: float = Field(0.02, gt=0)
    contact_margin: float = Field(0.002, ge=0)
    roll_factor: float = Field(1.5, gt=0)
    knife_offset: float = Field(0.01, ge=0)
    normal_k: int = Field(8, ge=3)

    @field_validator("reset_shape")
    @classmethod
    def _known_shape(cls, v: str) -> str:
        if v not in ("block", "cylinder", "blob"):
            raise ValueError(f"unknown dough shape '{v}'")
        return v


class GraphConfig(_Section):
    radius: Optional[float] = Field(None, gt=0)
    radius_factor: float = Field(1.5, gt=0)
    max_tool_edges: int = Field(4, ge=0)


class DynamicsConfig(_Section):
    """Dynamics training settings."""
    s: int = Field(2, ge=1)
    stride: int = Field(3, ge=1)
    rollout_steps: int = Field(15, ge=1)
    w1: float = Field(0.5, ge=0)
    w2: float = Field(0.5, ge=0)
    hidden: int = Field(64, ge=1)
    blocks: int = Field(3, ge=1)
    epochs: int = Field(200, ge=1)
    windows_per_epoch: int = Field(32, ge=1)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-3, gt=0)
    clip_norm: Optional[float] = 1.0
    holdout_fraction: float = Field(0.1, ge=0, lt=1)
    holdout_windows: int = Field(32, ge=1)


class PolicyConfig(_Section):
    """Multi-bin policy training and synthetic data settings."""
    w: float = Field(1.0, ge=0)
    translation_bins: int = Field(8, ge=1)
    rotation_bins: int = Field(32, ge=1)
    aperture_bins: int = Field(8, ge=1)
    encoder_widths: List[int] = [64, 128]
    head_hidden: int = Field(128, ge=1)
    n_points: int = Field(300, ge=8)
    epochs: int = Field(60, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    n_states: int = Field(30, ge=1)
    actions_per_state: int = Field(16, ge=1)
    walk_length: int = Field(1, ge=1)
    holdout_fraction: float = Field(0.2, ge=0, lt=1)


class ToolselConfig(_Section):
    encoder_widths: List[int] = [64, 128]
    head_hidden: int = Field(64, ge=1)
    n_points: int = Field(300, ge=8)
    epochs: int = Field(40, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    holdout_fraction: float = Field(0.2, ge=0, lt=1)
    include_precoded: bool = True


class PlanConfig(_Section):
    """Closed-loop planning settings."""
    planner: str = "policy"
    rollout_steps: int = Field(15, ge=1)
    population: int = Field(32, ge=1)
    elites: int = Field(6, ge=1)
    cem_iterations: int = Field(4, ge=0)
    init_std: float = Field(0.25, gt=0)  # fraction of each parameter range
    gd_steps: int = Field(20, ge=0)
    gd_lr: float = Field(0.05, gt=0)
    gd_restarts: int = Field(2, ge=1)
    random_samples: Optional[int] = None  # defaults to population * (cem_iterations + 1)
    epsilon: float = Field(0.3, ge=0)
    max_actions_per_tool: int = Field(5, ge=1)
    top_k: int = Field(3, ge=1)

    @field_validator("planner")
    @classmethod
    def _known_planner(cls, v: str) -> str:
        if v not in ("policy", "cem", "gd", "random"):
            raise ValueError(f"unknown planner '{v}'")
        return v

    @model_validator(mode="after")
    def _elites_fit(self) -> "PlanConfig":
        if self.elites > self.population:
            raise ValueError("population must be >= elites")
        return self


class PathsConfig(_Section):
    tools_dir: Optional[str] = None
    data_dir: str = "data"
    models_dir: str = "models"
    runs_dir: str = "runs"


class RunConfig(_Section):
    """Complete, validated run configuration."""
    seed: int = 0
    threads: Optional[int] = Field(None, ge=1)
    workspace: WorkspaceConfig = WorkspaceConfig()
    sim: SimConfig = SimConfig()
    graph: GraphConfig = GraphConfig()
    dynamics: DynamicsConfig = DynamicsConfig()
    policy: PolicyConfig = PolicyConfig()
    toolsel: ToolselConfig = ToolselConfig()
    plan: PlanConfig = PlanConfig()
    paths: PathsConfig = PathsConfig()
    tool_overrides: Dict[str, Dict[str, Any]] = {}


def _expand_env(value: Any) -> Any:
    """Replace "${VAR}" strings by the environment value."""
    if isinstance(value, dict):
        return {k: _expand_env(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_expand_env(v) for v in value]
    if isinstance(value, str):
        match = _ENV_PATTERN.match(value)
        if match:
            return os.getenv(match.group(1))
    return value


def load_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Load configuration from YAML, falling back to defaults.

    Args:
        config_path: Path to config YAML file (missing file -> defaults)
        overrides: Nested values applied over the file contents

    Returns:
        Validated RunConfig

    Raises:
        UsageError: If the file holds unknown keys or invalid values
    """
    load_dotenv()
    data: Dict[str, Any] = {}
    if config_path and Path(config_path).exists():
        with open(config_path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    data = _expand_env(data)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise UsageError(f"invalid configuration: {e}", code="CONFIG")


def config_hash(cfg: RunConfig) -> str:
    """First 16 hex digits of SHA-256 over the canonical JSON of cfg."""
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def thread_count(cfg: Optional[RunConfig] = None) -> int:
    """Worker threads: ROBOCOOKLAB_THREADS, else cfg.threads, else min(4, cpus)."""
    env = os.getenv(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got '{env}'", code="CONFIG")
    if cfg is not None and cfg.threads:
        return cfg.threads
    return max(1, min(4, os.cpu_count() or 1))
