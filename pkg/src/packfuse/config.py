"""Run configuration (JSON file; unknown keys are rejected)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

Method = Literal["packllm-sim", "packllm-opt", "top1", "ensemble", "cbtm", "dexperts", "exhaustive"]
METHODS: tuple[str, ...] = Method.__args__  # type: ignore[attr-defined]


class ModelSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    path: str | None = None
    url: str | None = None
    # vocabulary JSON; required for remote models
    vocab: str | None = None
    role: Literal["seed", "base", "anti"] = "seed"

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.url is None):
            raise ValueError(f"model {self.name!r}: give exactly one of 'path' or 'url'")
        if self.url is not None and self.vocab is None:
            raise ValueError(f"remote model {self.name!r} needs a 'vocab' file")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: list[Method]
    models: list[ModelSpec] = Field(min_length=1)
    tau: float = Field(1.0, gt=0)
    step: float = 0.05
    early_stop: bool = True
    # "top1" or the name of the model whose vocabulary is the reference
    reference: str = "top1"
    seed: int = 0
    corpus: str | None = None
    output: str | None = None
    summary: str | None = None
    sample: int | None = Field(None, ge=1)
    workers: int = Field(1, ge=1)
    prompt_fraction: float = Field(0.2, gt=0, lt=1)
    prompt_cap: int | None = Field(32, ge=1)
    clusters: str | None = None
    dexperts_lambda: float = 1.0
    timings: bool = False

    @field_validator("method", mode="before")
    @classmethod
    def _listify(cls, v):
        return [v] if isinstance(v, str) else v

    @model_validator(mode="after")
    def _method_fields(self):
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ValueError("model names must be unique")
        roles = [m.role for m in self.models]
        if "seed" not in roles:
            raise ValueError("at least one model must have role 'seed'")
        if "dexperts" in self.method and not ("base" in roles and "anti" in roles):
            raise ValueError("method 'dexperts' needs one model with role 'base' and one with role 'anti'")
        if roles.count("base") > 1 or roles.count("anti") > 1:
            raise ValueError("at most one 'base' and one 'anti' model")
        if "cbtm" in self.method and self.clusters is None:
            raise ValueError("method 'cbtm' needs a 'clusters' file")
        if self.reference != "top1" and self.reference not in names:
            raise ValueError(f"reference {self.reference!r} is neither 'top1' nor a model name")
        if not 0 < self.step <= 0.5 or abs(round(1 / self.step) * self.step - 1) > 1e-9:
            raise ValueError("step must lie in (0, 0.5] with 1/step an integer")
        return self

    @property
    def seeds(self) -> list[ModelSpec]:
        return [m for m in self.models if m.role == "seed"]

    def role(self, role: str) -> ModelSpec | None:
        return next((m for m in self.models if m.role == role), None)


def load_config(path) -> RunConfig:
    """Parse a config file; relative file paths resolve against its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = path.parent

    def resolve(p):
        return p if p is None or Path(p).is_absolute() else str(base / p)

    if isinstance(raw, dict):
        for key in ("corpus", "output", "summary", "clusters"):
            if key in raw:
                raw[key] = resolve(raw[key])
        for m in raw.get("models", []) if isinstance(raw.get("models"), list) else []:
            if isinstance(m, dict):
                for key in ("path", "vocab"):
                    if key in m:
                        m[key] = resolve(m[key])
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
