"""Experiment specification models and config-file handling.

An :class:`ExperimentSpec` fully describes one run: the problem, the
communication topology, and the optimizer settings. Specs load from YAML
config files, and CLI flags override file values field by field; resolution
is pure, so the same (file, flags) pair always yields the same spec.

Optimizer scalars left as null are derived at run time from the worker count,
the topology's second eigenvalue, and the accuracy target ``epsilon``, using
the theory scalings with unit constants.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

__all__ = [
    "TopologySpec",
    "QuadraticSpec",
    "LogisticSpec",
    "RunSettings",
    "ExperimentSpec",
    "deep_merge",
    "load_config_file",
]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TopologySpec(_Strict):
    kind: Literal["ring", "torus", "random"] = "ring"
    k: int = 8
    rows: int | None = None
    cols: int | None = None
    p: float = 0.4
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "torus":
            if self.rows is None or self.cols is None:
                raise ValueError("torus topology needs rows and cols")
        elif self.k < 1:
            raise ValueError("worker count must be positive")
        return self

    @property
    def num_workers(self) -> int:
        if self.kind == "torus":
            return int(self.rows * self.cols)
        return self.k

    def label(self) -> str:
        if self.kind == "torus":
            return f"torus{self.rows}x{self.cols}"
        return f"{self.kind}{self.k}"


class QuadraticSpec(_Strict):
    path: str | None = None
    dim_x: int = 5
    dim_y: int = 5
    eig_min: float = 0.5
    eig_max: float = 2.0
    coupling_scale: float = 1.0
    offset_scale: float = 1.0
    rho: float = 1.0
    noise_sigma: float = 0.0
    n_virtual: int = 100_000
    seed: int = 0
    x_ref_radius: float = 10.0


class LogisticSpec(_Strict):
    data_path: str
    imbalance_ratios: list[float] | None = None
    data_seed: int = 0
    x_min_bound: float = -5.0


class RunSettings(_Strict):
    """Optimizer scalars; null fields fall back to theory-derived defaults.

    ``sgd-baseline`` is an alias for the simultaneous order with the
    forgetting factors forced to alpha_i = 1/eta^2, which degrades the
    variance-reduced estimators to plain stochastic gradients.
    """

    mode: Literal["simultaneous", "alternating", "sgd-baseline"] = "simultaneous"
    epsilon: float = Field(default=0.01, gt=0.0)
    eta: float | None = None
    alpha1: float | None = None
    alpha2: float | None = None
    alpha3: float | None = None
    beta1: float | None = None
    beta2: float | None = None
    beta3: float | None = None
    t_iterations: int = Field(default=2000, ge=0)
    batch_b0: int | None = None
    batch_b: int | None = None
    radius: float | None = None
    seed: int = 0
    eval_every: int = 10
    parallel_workers: int = 1
    x0_fill: float = 0.0
    y0_fill: float = 0.0
    z0_fill: float = 0.0


class ExperimentSpec(_Strict):
    problem: Literal["quadratic", "logistic"] = "quadratic"
    quadratic: QuadraticSpec = Field(default_factory=QuadraticSpec)
    logistic: LogisticSpec | None = None
    topology: TopologySpec = Field(default_factory=TopologySpec)
    run: RunSettings = Field(default_factory=RunSettings)
    output: str | None = None
    output_dir: str = "."

    @model_validator(mode="after")
    def _check(self):
        if self.problem == "logistic" and self.logistic is None:
            raise ValueError("logistic runs need a logistic section with a data_path")
        return self


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Recursively merge ``override`` into ``base`` without mutating either."""
    merged = dict(base)
    for key, value in override.items():
        if key in merged and isinstance(merged[key], dict) and isinstance(value, dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config_file(path) -> dict[str, Any]:
    data = yaml.safe_load(Path(path).read_text())
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must contain a mapping")
    return data
