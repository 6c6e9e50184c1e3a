"""
Run configuration.
One JSON document validated by pydantic; CLI flags are applied as dotted-key
overrides before validation, so they are checked like file keys.
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from dpsgd_engine import ACTIVATIONS
from objective import RewardWeights, TrainTemplate
from optimizers import ALIASES, STRATEGIES, EvoConfig, GridConfig, RlConfig, TpeConfig
from scheduler import Budget
from search_space import LINEAR, LOG, Dimension, SearchSpace

OUTPUT_ENV = "DP_TUNE_OUT"
DEFAULT_OUTPUT_ROOT = "runs"


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticConfig(_Strict):
    n: int = Field(2500, ge=2)
    d: int = Field(20, ge=1)
    classes: int = Field(4, ge=2)
    separation: float = Field(3.0, ge=0)


class DatasetConfig(_Strict):
    source: Literal["synthetic", "mnist", "cifar10"] = "synthetic"
    mnist_images: Optional[str] = None
    mnist_labels: Optional[str] = None
    cifar_batches: List[str] = Field(default_factory=list)
    n_train: int = Field(2000, ge=1)
    n_valid: int = Field(500, ge=1)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)

    @model_validator(mode="after")
    def _source_inputs(self):
        if self.source == "mnist" and not (self.mnist_images and self.mnist_labels):
            raise ValueError("dataset.mnist_images and dataset.mnist_labels are required for mnist")
        if self.source == "cifar10" and not self.cifar_batches:
            raise ValueError("dataset.cifar_batches is required for cifar10")
        if self.source == "synthetic" and self.n_train + self.n_valid > self.synthetic.n:
            raise ValueError(
                f"dataset.n_train + dataset.n_valid ({self.n_train + self.n_valid}) "
                f"exceeds dataset.synthetic.n ({self.synthetic.n})"
            )
        return self


class DimensionConfig(_Strict):
    lo: float = Field(gt=0)
    hi: float = Field(gt=0)
    step: float = Field(gt=0)
    scale: Literal["linear", "log"] = LINEAR

    @model_validator(mode="after")
    def _ordered(self):
        if self.lo > self.hi:
            raise ValueError(f"lo ({self.lo}) must not exceed hi ({self.hi})")
        return self

    def to_dimension(self, name: str) -> Dimension:
        return Dimension(name, self.lo, self.hi, self.step, self.scale)


class SearchSpaceConfig(_Strict):
    sigma: DimensionConfig = Field(default_factory=lambda: DimensionConfig(lo=0.5, hi=5.0, step=0.1))
    eta: DimensionConfig = Field(default_factory=lambda: DimensionConfig(lo=1e-3, hi=1.0, step=0.1, scale=LOG))

    def to_space(self) -> SearchSpace:
        return SearchSpace((self.sigma.to_dimension("sigma"), self.eta.to_dimension("eta")))


class TrainTemplateConfig(_Strict):
    epochs: int = Field(3, ge=1)
    batch_size: int = Field(100, ge=1)
    clip_norm: float = Field(1.0, gt=0)
    delta: float = Field(1e-5, gt=0, lt=1)
    hidden: Optional[List[int]] = None
    activation: str = "tanh"
    step_log: bool = False

    @model_validator(mode="after")
    def _architecture(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"train.activation must be one of {ACTIVATIONS}")
        if self.hidden is not None and any(width < 1 for width in self.hidden):
            raise ValueError("train.hidden widths must be >= 1")
        return self

    def to_template(self) -> TrainTemplate:
        return TrainTemplate(
            epochs=self.epochs,
            batch_size=self.batch_size,
            clip_norm=self.clip_norm,
            delta=self.delta,
            hidden=tuple(self.hidden) if self.hidden is not None else None,
            activation=self.activation,
        )


class RewardConfig(_Strict):
    alpha_u: float = Field(0.5, ge=0, le=1)
    alpha_p: float = Field(0.5, ge=0, le=1)

    def to_weights(self) -> RewardWeights:
        return RewardWeights(self.alpha_u, self.alpha_p)


class StrategyConfig(_Strict):
    name: str = "grid"
    grid: GridConfig = Field(default_factory=GridConfig)
    evolutionary: EvoConfig = Field(default_factory=EvoConfig)
    bayesian: TpeConfig = Field(default_factory=TpeConfig)
    rl: RlConfig = Field(default_factory=RlConfig)

    @model_validator(mode="after")
    def _known_name(self):
        if ALIASES.get(self.name, self.name) not in STRATEGIES:
            raise ValueError(f"strategy.name {self.name!r} is not one of {', '.join(STRATEGIES)}")
        return self

    @property
    def canonical(self) -> str:
        return ALIASES.get(self.name, self.name)

    def settings(self):
        """The sub-config of the selected strategy."""
        return getattr(self, self.canonical)


class RunConfig(_Strict):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    search_space: SearchSpaceConfig = Field(default_factory=SearchSpaceConfig)
    train: TrainTemplateConfig = Field(default_factory=TrainTemplateConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    strategy: StrategyConfig = Field(default_factory=StrategyConfig)
    budget: Budget = Field(default_factory=Budget)
    seed: int = Field(0, ge=0)
    jobs: int = Field(1, ge=1)
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.train.batch_size > self.dataset.n_train:
            raise ValueError(
                f"train.batch_size ({self.train.batch_size}) exceeds dataset.n_train ({self.dataset.n_train})"
            )
        space = self.search_space.to_space()
        for dim, count in zip(space.dims, self.strategy.grid.per_dim):
            if not 1 <= count <= dim.size:
                raise ValueError(
                    f"strategy.grid.per_dim: {count} {dim.name} points outside 1..{dim.size}"
                )
        return self

    @property
    def run_id(self) -> str:
        return f"{self.strategy.canonical}-seed{self.seed}"

    def output_root(self) -> Path:
        """--out / output_dir, then $DP_TUNE_OUT, then ./runs."""
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT_ROOT)

    def run_dir(self) -> Path:
        return self.output_root() / self.run_id


def _format_errors(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{path}: {item['msg']}")
    return "; ".join(lines)


def apply_overrides(data: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Set dotted keys (e.g. "strategy.name") in a nested dict, creating levels as needed."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            child = node.get(key)
            if not isinstance(child, dict):
                child = {}
                node[key] = child
            node = child
        node[leaf] = value
    return data


def validate_config(data: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {_format_errors(e)}") from e


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Read a JSON config (or start from defaults), apply overrides and validate."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON (line {e.lineno}, column {e.colno}): {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    return validate_config(apply_overrides(data, overrides or {}))
