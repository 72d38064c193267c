"""Scenario configuration files (YAML) and their validation."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .evolve import SolverConfig
from .immigration import MassTransitionScheme
from .mechanism import BranchingMechanism
from .montecarlo import Scenario


class ConfigError(ValueError):
    """Schema violation, with the offending field and (when known) line."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MechanismBlock(_Strict):
    family: Literal["quadratic", "stable", "neveu", "stable_subcrit_drift"]
    a: Optional[float] = None
    b: Optional[float] = Field(default=None, gt=0)
    c: Optional[float] = Field(default=None, gt=0)
    alpha: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _parameters_match_family(self):
        need = {"quadratic": {"a", "b"}, "stable": {"a", "c", "alpha"}, "neveu": set(), "stable_subcrit_drift": {"alpha"}}[self.family]
        given = {k for k in ("a", "b", "c", "alpha") if getattr(self, k) is not None}
        if need - given:
            raise ValueError(f"{self.family} needs parameters {sorted(need - given)}")
        if given - need:
            raise ValueError(f"{self.family} does not take parameters {sorted(given - need)}")
        return self

    def build(self) -> BranchingMechanism:
        if self.family == "quadratic":
            return BranchingMechanism.quadratic(self.a, self.b)
        if self.family == "stable":
            return BranchingMechanism.stable(self.a, self.c, self.alpha)
        if self.family == "neveu":
            return BranchingMechanism.neveu()
        return BranchingMechanism.stable_subcrit_drift(self.alpha)


class ScenarioBlock(_Strict):
    x: float = Field(default=1.0, gt=0)
    horizon: float = Field(default=1.0, gt=0)
    checkpoints: list[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0])
    backbone_init: Literal["poissonized", "fixed"] = "poissonized"
    fixed_count: int = Field(default=0, ge=0)
    replicates: int = Field(default=10_000, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    block_size: int = Field(default=1024, ge=1)
    thetas: list[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0, 5.0])
    joint_points: list[tuple[float, float]] = Field(default_factory=lambda: [(1.0, 0.5)])
    poissonization_s: list[float] = Field(default_factory=lambda: [0.25, 0.5, 0.9])

    @field_validator("checkpoints")
    @classmethod
    def _increasing(cls, v):
        if not v or any(b <= a for a, b in zip(v, v[1:])) or v[0] < 0:
            raise ValueError("checkpoints must be non-empty, non-negative and strictly increasing")
        return v

    @field_validator("thetas")
    @classmethod
    def _nonneg(cls, v):
        if any(t < 0 for t in v):
            raise ValueError("thetas must be non-negative")
        return v

    @field_validator("poissonization_s")
    @classmethod
    def _unit(cls, v):
        if any(not 0 <= s <= 1 for s in v):
            raise ValueError("s values must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def _within_horizon(self):
        if self.checkpoints[-1] > self.horizon:
            raise ValueError("checkpoints must not exceed the horizon")
        return self


class SchemeBlock(_Strict):
    transition: Literal["auto", "exact_quadratic", "tau_leap"] = "auto"
    step: float = Field(default=1e-3, gt=0)
    small_jump_cutoff: float = Field(default=1e-2, gt=0)
    small_jump_policy: Literal["drop", "diffusion"] = "diffusion"
    jump_budget: int = Field(default=64, ge=1)
    rain_mass: float = Field(default=1e-3, gt=0)
    eps: Optional[float] = Field(default=None, gt=0)
    live_cap: int = Field(default=10_000, ge=1)
    rel_tol: Optional[float] = Field(default=None, ge=0)

    def build(self, family: str) -> MassTransitionScheme:
        """``auto`` means exact transitions for the quadratic family, tau-leaping otherwise."""
        variant = self.transition
        if variant == "auto":
            variant = "exact_quadratic" if family == "quadratic" else "tau_leap"
        if variant == "exact_quadratic":
            return MassTransitionScheme.exact_quadratic()
        return MassTransitionScheme.tau_leap(
            self.step, self.small_jump_cutoff, self.small_jump_policy,
            jump_budget=self.jump_budget, rain_mass=self.rain_mass,
        )


class SolverBlock(_Strict):
    rtol: float = Field(default=1e-11, gt=0)
    atol: float = Field(default=1e-12, gt=0)
    theta_cap_factor: float = Field(default=1e6, gt=1)
    time_floor: float = Field(default=1e-4, gt=0)
    grid_points: int = Field(default=301, ge=2)

    def build(self) -> SolverConfig:
        return SolverConfig(self.rtol, self.atol, "DOP853", self.theta_cap_factor, self.time_floor, self.grid_points)


class OutputBlock(_Strict):
    directory: str = "out"
    formats: list[Literal["csv", "json", "png", "jsonl"]] = Field(default_factory=lambda: ["csv", "json", "png"])


class Config(_Strict):
    mechanism: MechanismBlock
    scenario: ScenarioBlock = Field(default_factory=ScenarioBlock)
    scheme: SchemeBlock = Field(default_factory=SchemeBlock)
    solver: SolverBlock = Field(default_factory=SolverBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)

    def to_scenario(self, seed: int | None = None, replicates: int | None = None) -> Scenario:
        s = self.scenario
        return Scenario(
            mechanism=self.mechanism.build(),
            x=s.x,
            horizon=s.horizon,
            checkpoints=tuple(s.checkpoints),
            backbone_init=s.backbone_init,
            fixed_count=s.fixed_count,
            replicates=s.replicates if replicates is None else replicates,
            seed=s.seed if seed is None else seed,
            scheme=self.scheme.build(self.mechanism.family),
            eps=self.scheme.eps,
            block_size=s.block_size,
            live_cap=self.scheme.live_cap,
        )

    def dumps(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    def digest(self) -> str:
        """Short hash of the canonical JSON form."""
        canon = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _line_index(text: str) -> dict[tuple, int]:
    """Map key paths to 1-based source lines."""
    index: dict[tuple, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for key, val in node.value:
                p = path + (key.value,)
                index[p] = key.start_mark.line + 1
                walk(val, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, val in enumerate(node.value):
                p = path + (i,)
                index[p] = val.start_mark.line + 1
                walk(val, p)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return index
    if root is not None:
        walk(root, ())
    return index


def parse_config(text: str, source: str = "<config>") -> Config:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return Config.model_validate(data)
    except ValidationError as exc:
        lines = _line_index(text)
        msgs = []
        for err in exc.errors():
            loc = tuple(err["loc"])
            line = next((lines[loc[:k]] for k in range(len(loc), 0, -1) if loc[:k] in lines), None)
            where = ".".join(str(p) for p in loc) or "<root>"
            msgs.append(f"{source}:{line if line else '?'}: {where}: {err['msg']}")
        raise ConfigError("\n".join(msgs)) from exc


def load_config(path: str | Path) -> Config:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def save_config(cfg: Config, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(cfg.dumps())
    return path
