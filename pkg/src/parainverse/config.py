"""Run configuration: one YAML file, validated on load, unknown keys rejected."""
from __future__ import annotations

from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .carleman import CarlemanParams
from .forward import ProblemSpec, default_problem
from .grid import Grid
from .inverse import ReconstructionConfig

__all__ = ["RunConfig", "ConfigError", "load_config", "build_grid", "build_problem",
           "build_reconstruction", "build_carleman", "reference"]


class ConfigError(ValueError):
    """Invalid configuration file or values."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(_Strict):
    cells: int = 256
    length: float = Field(1.0, gt=0)
    dim: Literal[1, 2] = 1


class ProblemConfig(_Strict):
    eps: float = Field(0.05, ge=0)
    lam: float = 1.0
    alpha: Optional[List[float]] = None
    b: float = 0.5
    c: float = -1.0
    t0: float = Field(0.5, gt=0)
    delta: float = Field(0.1, gt=0)
    faces: List[str] = ["x1+"]
    linear: bool = False
    warm_start: bool = True

    @model_validator(mode="after")
    def _window(self):
        if self.t0 - self.delta < 0:
            raise ValueError("window (t0 - delta, t0 + delta) must start at or after t = 0")
        return self


class SolverConfig(_Strict):
    dt: float = Field(1e-4, gt=0)
    frame_stride: int = Field(10, ge=1)


class BesovConfig(_Strict):
    s: Optional[float] = Field(None, gt=0)


class CarlemanConfig(_Strict):
    lam_c: float = Field(2.0, ge=1)
    beta: float = Field(1.0, gt=0)
    s_c: float = Field(4.0, ge=0)
    s_values: List[float] = [2.0, 4.0, 8.0, 16.0]
    ensemble_size: int = Field(20, ge=1)
    eps_values: List[float] = [0.01, 0.05, 0.2]


class InverseConfig(_Strict):
    method: Literal["direct_slice", "tikhonov"] = "tikhonov"
    gamma: float = Field(1e-8, ge=0)
    max_iters: int = Field(200, ge=0)
    grad_tol: float = Field(1e-6, ge=0)
    snapshot_weight: float = Field(1.0, ge=0)
    time_h1_weight: float = Field(1e-3, ge=0)
    carleman_weighting: bool = False
    omega0_margin: float = Field(0.1, ge=0, lt=1)
    preconditioner: Literal["hessian", "none"] = "hessian"


class ExperimentConfig(_Strict):
    seed: int = 0
    noise_level: float = Field(0.0, ge=0)
    noise_levels: List[float] = [0.0025, 0.005, 0.01, 0.02, 0.04, 0.08]
    seeds: List[int] = list(range(10))
    gamma_rule: Literal["proportional", "fixed"] = "proportional"
    gamma_scale: float = Field(0.1, gt=0)
    verify_trials: int = Field(100, ge=1)
    partition_profile: Literal["raised_cosine", "broken"] = "raised_cosine"
    zero: bool = False

    @field_validator("noise_levels")
    @classmethod
    def _positive(cls, v):
        if any(x < 0 for x in v):
            raise ValueError("noise levels must be nonnegative")
        return v


class RunConfig(_Strict):
    grid: GridConfig = GridConfig()
    problem: ProblemConfig = ProblemConfig()
    solver: SolverConfig = SolverConfig()
    besov: BesovConfig = BesovConfig()
    carleman: CarlemanConfig = CarlemanConfig()
    inverse: InverseConfig = InverseConfig()
    experiment: ExperimentConfig = ExperimentConfig()
    output_dir: str = "out"

    @model_validator(mode="after")
    def _cross_checks(self):
        dim = self.grid.dim
        if self.problem.alpha is not None and len(self.problem.alpha) != dim:
            raise ValueError("problem.alpha needs one entry per axis")
        steps = 2 * self.problem.delta / self.solver.dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps) or round(steps) < 2:
            raise ValueError("solver.dt must divide the window length 2*delta into at least two steps")
        return self

    @property
    def s_besov(self) -> float:
        return self.besov.s if self.besov.s is not None else (1.0 if self.grid.dim == 1 else 1.5)


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Read and validate a YAML file (or defaults when ``path`` is None)."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    try:
        cfg = RunConfig.model_validate(raw)
        build_grid(cfg)
    except (ValidationError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def build_grid(cfg: RunConfig) -> Grid:
    return Grid.uniform(cfg.grid.cells, cfg.grid.length, cfg.grid.dim)


def build_problem(cfg: RunConfig, eps: Optional[float] = None, linear: Optional[bool] = None) -> ProblemSpec:
    p = cfg.problem
    grid = build_grid(cfg)
    spec = default_problem(
        grid, eps=p.eps if eps is None else eps, lam=p.lam,
        alpha=None if p.alpha is None else tuple(p.alpha), b=p.b, c=p.c, t0=p.t0, delta=p.delta,
        dt=cfg.solver.dt, s=cfg.s_besov, faces=tuple(p.faces),
        linear=p.linear if linear is None else linear, warm_start=p.warm_start,
    )
    if cfg.experiment.zero:
        spec = spec.scaled(0.0)
    return spec


def build_carleman(cfg: RunConfig) -> CarlemanParams:
    c = cfg.carleman
    return CarlemanParams.default(build_grid(cfg), cfg.problem.t0, c.lam_c, c.beta, c.s_c)


def build_reconstruction(cfg: RunConfig) -> ReconstructionConfig:
    i = cfg.inverse
    return ReconstructionConfig(
        method=i.method, gamma=i.gamma, max_iters=i.max_iters, grad_tol=i.grad_tol,
        snapshot_weight=i.snapshot_weight, time_h1_weight=i.time_h1_weight,
        carleman_weighting=build_carleman(cfg) if i.carleman_weighting else None,
        omega0_margin=i.omega0_margin, dt=cfg.solver.dt, preconditioner=i.preconditioner,
    )


def reference() -> str:
    """YAML listing of every key with its default value."""
    return yaml.safe_dump(RunConfig().model_dump(), sort_keys=False)
