# src/interface/run_config.py

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np
import yaml

from ..core.hamiltonian import StructureError, StructureTag
from ..core.integrator import FixedPointConfig
from ..core.numerics import Activation, get_activation
from ..data.datasets import BoxDomain, DatasetError, TargetFunction, get_target
from ..learning.training import TrainConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised for unreadable or invalid run configurations."""
    pass


@dataclass
class RunConfig:
    """Flat run configuration; every YAML key maps onto one field."""
    n: int = 1
    depth: int = 16
    h: float = 0.1
    horizon: Optional[float] = None
    activation: str = "tanh"
    structure: str = "restricted"
    target: str = "sin_pi"
    # one bound for every axis, or a list with one bound per axis
    domain_lo: Union[float, List[float]] = -1.0
    domain_hi: Union[float, List[float]] = 1.0
    samples: int = 256
    batch_size: int = 256
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    iterations: int = 2000
    lr_factor: float = 0.5
    lr_patience: int = 200
    min_lr: float = 1e-6
    seed: int = 0
    init_scale: float = 1.0
    head_outputs: int = 0
    fp_tol: float = 1e-12
    fp_max_iter: int = 100
    fp_damping: float = 1.0
    sweep_depths: List[int] = field(default_factory=lambda: [4, 8, 16, 32, 64])
    sweep_seeds: int = 3
    estimate_cf: bool = True
    log_level: str = "INFO"
    log_every: int = 500

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")
        kwargs = {name: _coerce(name, known[name].type, value) for name, value in values.items()}
        config = cls(**kwargs)
        config.validate()
        return config

    def validate(self) -> None:
        for name in ("n", "depth", "samples", "batch_size", "sweep_seeds", "fp_max_iter"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.iterations < 0 or self.head_outputs < 0 or self.log_every < 0:
            raise ConfigError("iterations, head_outputs and log_every must be non-negative")
        if self.horizon is not None and not self.horizon > 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if not self.sweep_depths or any(d < 1 for d in self.sweep_depths):
            raise ConfigError(f"sweep_depths must be positive integers, got {self.sweep_depths}")
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError(f"Unknown log_level '{self.log_level}'")
        try:
            self.activation_fn()
            self.structure_tag()
            self.target_fn()
            self.domain()
            self.train_config()
        except (ValueError, StructureError) as e:
            raise ConfigError(str(e)) from e

    @property
    def step(self) -> float:
        return self.horizon / self.depth if self.horizon is not None else self.h

    def activation_fn(self) -> Activation:
        return get_activation(self.activation)

    def structure_tag(self) -> StructureTag:
        return StructureTag.parse(self.structure)

    def domain(self) -> BoxDomain:
        bounds = []
        for name in ("domain_lo", "domain_hi"):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.ndim == 1 and value.size != self.n:
                raise ConfigError(f"{name} needs {self.n} values, got {value.size}")
            bounds.append(np.full(self.n, float(value)) if value.ndim == 0 else value)
        return BoxDomain(self.n, *bounds)

    def target_fn(self) -> TargetFunction:
        try:
            return get_target(self.target, self.n)
        except DatasetError as e:
            raise ConfigError(str(e)) from e

    def fixed_point(self) -> FixedPointConfig:
        return FixedPointConfig(self.fp_tol, self.fp_max_iter, self.fp_damping)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            depth=self.depth,
            h=self.step,
            structure=self.structure_tag(),
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            iterations=self.iterations,
            seed=self.seed,
            init_scale=self.init_scale,
            lr_factor=self.lr_factor,
            lr_patience=self.lr_patience,
            min_lr=self.min_lr,
            log_every=self.log_every,
            fixed_point=self.fixed_point(),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


BOUND_KEYS = ("domain_lo", "domain_hi")


def _coerce(name: str, annotation: Any, value: Any) -> Any:
    text = str(annotation)
    if value is None:
        if "Optional" in text:
            return None
        raise ConfigError(f"{name} cannot be empty")
    if name in BOUND_KEYS:
        if isinstance(value, list):
            if not value:
                raise ConfigError(f"{name} cannot be an empty list")
            return [_number(name, v) for v in value]
        return _number(name, value)
    if "List" in text:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{name} must be a list of integers, got {value!r}")
        return list(value)
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return int(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string, got {value!r}")
        return value
    return _number(name, value)


def _number(name: str, value: Any) -> float:
    # YAML 1.1 reads exponents without a dot (1e-6) as strings
    if isinstance(value, bool):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if not np.isfinite(number):
        raise ConfigError(f"{name} must be finite, got {value!r}")
    return number


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Read a YAML run configuration and apply command-line overrides."""
    values: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f)
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"Error loading configuration {path}: {str(e)}") from e
        if loaded is None:
            raise ConfigError(f"Configuration file {path} is empty")
        if not isinstance(loaded, dict):
            raise ConfigError(f"Configuration file {path} must contain a mapping")
        values.update(loaded)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    config = RunConfig.from_dict(values)
    logger.debug(f"Run configuration: {config.to_dict()}")
    return config
