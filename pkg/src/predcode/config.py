"""Experiment configuration: a versioned YAML schema validated before any compute.

Every list-valued hyperparameter under ``schedule`` is a grid axis; the
runner enumerates their cartesian product. ``overrides`` replaces axes for
a single algorithm (for example ``zil: {gamma: [1.0]}``).
"""

from __future__ import annotations

import hashlib
import itertools
import json
from importlib import resources
from pathlib import Path
from typing import Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

SCHEMA_VERSION = 1

ExperimentKind = Literal["classify", "generate", "efficiency", "bench-smm", "bench-wallclock", "calibrate"]
AlgorithmName = Literal["pc", "zil", "ipc", "bp"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSpec(_Strict):
    name: Literal["mnist", "fashion_mnist", "digits", "synthetic"]
    subset: int | None = None  # training samples kept (seeded, see subset_seed)
    stratified: bool = False
    subset_seed: int = 0
    test_subset: int | None = None
    root: str | None = None  # overrides $PREDCODE_DATA/<name>
    teacher_dims: list[int] | None = None  # synthetic only, output end first
    n_samples: int = 100  # synthetic only
    teacher_seed: int = 0


class NetworkSpec(_Strict):
    dims: list[int]  # output end first, input (or top latent) last
    activation: Literal["tanh", "relu", "identity"] = "tanh"
    init: Literal["uniform_fan_in", "xavier_uniform"] = "uniform_fan_in"

    @field_validator("dims")
    @classmethod
    def _dims(cls, v):
        if len(v) < 2 or min(v) < 1:
            raise ValueError("dims needs at least two positive widths")
        return v


class GridAxes(_Strict):
    gamma: list[float] | None = None
    alpha: list[float] | None = None
    T: list[int] | None = None
    weight_decay: list[float] | None = None


class ScheduleSpec(_Strict):
    algorithms: list[AlgorithmName] = Field(min_length=1)
    gamma: list[float] = [0.5]
    alpha: list[float] = [1e-3]
    T: list[int] = [1]
    weight_decay: list[float] = [0.0]
    batch_size: Union[int, Literal["full"]] = "full"
    epochs: int = 1
    total_steps: int = 100
    patience: int | None = None
    warm_start: bool = False
    sequential: bool = False
    plateau_tol: float = 1e-6
    plateau_window: int = 10
    latent_std: float = 0.1
    overrides: dict[AlgorithmName, GridAxes] = {}

    def cells(self, algorithm: str) -> list[dict]:
        """Grid cells (hyperparameter dicts) for one algorithm."""
        axes = {"gamma": self.gamma, "alpha": self.alpha, "T": self.T, "weight_decay": self.weight_decay}
        ov = self.overrides.get(algorithm)
        if ov is not None:
            axes.update({k: v for k, v in ov.model_dump().items() if v is not None})
        if algorithm == "zil":
            axes["gamma"] = [1.0]
        if algorithm in ("zil", "bp") or (algorithm == "ipc" and self.batch_size == "full"):
            axes["T"] = [1]
        if algorithm == "bp":
            axes["gamma"] = [1.0]
        keys = list(axes)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


class GenerateSpec(_Strict):
    iterations: int = 500  # total inference iterations per trace
    pc_T: list[int] = [8, 12, 16]


class EfficiencySpec(_Strict):
    smm_budget: int = 2000


class BenchSpec(_Strict):
    depths: list[int] = list(range(2, 17))
    widths: list[int] = [16, 64, 256]
    T: list[int] = [1, 8, 12, 16]
    repeats: int = 10
    batch: int = 1
    updates: int = 2


class CalibrateSpec(_Strict):
    checkpoints: dict[str, str]  # model name -> checkpoint path
    corruptions: list[str] | None = None
    levels: list[int] = [0, 1, 2, 3, 4, 5]
    n_bins: int = 15


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = 1
    experiment: ExperimentKind
    dataset: DatasetSpec | None = None
    network: NetworkSpec | None = None
    schedule: ScheduleSpec | None = None
    generate: GenerateSpec | None = None
    efficiency: EfficiencySpec | None = None
    bench: BenchSpec | None = None
    calibrate: CalibrateSpec | None = None
    seeds: list[int] = [0]
    output: str = "runs"
    engine: Literal["serial", "parallel"] = "serial"
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _sections(self):
        need = {
            "classify": ("dataset", "network", "schedule"),
            "generate": ("dataset", "network", "schedule"),
            "efficiency": ("dataset", "network", "schedule"),
            "bench-smm": (),
            "bench-wallclock": (),
            "calibrate": ("dataset", "calibrate"),
        }[self.experiment]
        missing = [s for s in need if getattr(self, s) is None]
        if missing:
            raise ValueError(f"experiment {self.experiment!r} needs section(s): {', '.join(missing)}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if self.schedule is not None:
            self._check_cells()
        if self.network is not None and self.dataset is not None and self.dataset.teacher_dims:
            if self.dataset.teacher_dims[0] != self.network.dims[0]:
                raise ValueError("teacher output width must match network dims[0]")
        return self

    def _check_cells(self) -> None:
        from .schedules import ScheduleConfig

        s = self.schedule
        for alg in s.algorithms:
            for cell in s.cells(alg):
                try:
                    ScheduleConfig(algorithm=alg, batch_size=s.batch_size, epochs=s.epochs,
                                   total_steps=s.total_steps, patience=s.patience,
                                   plateau_window=s.plateau_window, **cell)
                except ConfigError as exc:
                    raise ValueError(f"{alg} cell {cell}: {exc}") from None

    def digest(self) -> str:
        """Short sha256 of the canonical JSON form; embedded in every artifact.

        The output directory is left out so reruns elsewhere match byte for byte.
        """
        text = json.dumps(self.model_dump(mode="json", exclude={"output"}), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (this build reads {SCHEMA_VERSION})")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = [f"  {'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid config:\n" + "\n".join(lines)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return parse_config(data)


def preset_names() -> list[str]:
    root = resources.files("predcode").joinpath("presets")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str) -> ExperimentConfig:
    if name not in preset_names():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    res = resources.files("predcode").joinpath("presets", f"{name}.yaml")
    with resources.as_file(res) as p:
        return load_config(p)
