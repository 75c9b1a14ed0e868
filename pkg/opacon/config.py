"""
Run configuration.

A :class:`RunConfig` is read from a YAML document whose top-level sections
mirror the package modules. Unknown keys are rejected anywhere in the tree,
and every section seed left unset resolves to the top-level ``seed``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, Optional, Tuple

import yaml

from opacon import exceptions
from opacon.closed_loop import DEFAULT_STEPS, OP_REF_MODES
from opacon.engine_surrogate import PlantParams
from opacon.neural_core import LmConfig
from opacon.neurocontrol import TrainingConfig
from opacon.sysid import DEFAULT_HIDDEN, DEFAULT_SPECS, ENGINE_CHANNELS, ROLES, RegressorSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExcitationConfig:
    kind: str = "aprbs"
    n_samples: int = 3000
    low: float = 35.0
    high: float = 75.0
    n_levels: int = 8
    min_hold: int = 20
    max_hold: Optional[int] = 150
    seed: int = 0


@dataclass(frozen=True)
class IdentificationConfig:
    """
    Attributes:
        lm (LmConfig): Levenberg-Marquardt settings.
        restarts (int): Attempts per sub-model after the first; the
            lowest-SSE attempt is kept.
        train_fraction (float): Share of the log used for training when no
            separate validation log is given.
        structures (dict): Per role (``speed``, ``pressure``, ``airflow``,
            ``opacity``), ``output_lags``, ``inputs``, ``delay`` and
            ``n_hidden``.
    """

    lm: LmConfig = field(default_factory=LmConfig)
    restarts: int = 2
    train_fraction: float = 0.7
    structures: Dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        if self.restarts < 0:
            raise exceptions.ConfigError("Restart count cannot be negative")
        if not 0 < self.train_fraction < 1:
            raise exceptions.ConfigError("Training fraction must lie in (0, 1)")
        unknown = set(self.structures) - set(ROLES.values())
        if unknown:
            raise exceptions.ConfigError(f"Unknown sub-model roles {sorted(unknown)}")
        for role, entry in self.structures.items():
            extra = set(entry) - {"output_lags", "inputs", "delay", "n_hidden"}
            if extra:
                raise exceptions.ConfigError(f"Unknown keys {sorted(extra)} in {role} structure")

    def specs(self) -> Tuple[Dict[str, RegressorSpec], Dict[str, int]]:
        specs, hidden = dict(DEFAULT_SPECS), dict(DEFAULT_HIDDEN)
        for channel in ENGINE_CHANNELS:
            entry = self.structures.get(ROLES[channel])
            if not entry:
                continue
            base = DEFAULT_SPECS[channel]
            specs[channel] = RegressorSpec(
                channel,
                int(entry.get("output_lags", base.output_lags)),
                tuple(dict(entry.get("inputs", dict(base.inputs))).items()),
                int(entry.get("delay", base.delay)),
            )
            hidden[channel] = int(entry.get("n_hidden", hidden[channel]))
        return specs, hidden


@dataclass(frozen=True)
class SelectionConfig:
    output_orders: Tuple[int, ...] = (1, 2, 3, 4)
    input_orders: Tuple[int, ...] = (1, 2, 3, 4)
    nodes: Tuple[int, ...] = tuple(range(2, 13))
    phase1_nodes: int = 10

    def __post_init__(self):
        for name in ("output_orders", "input_orders", "nodes"):
            values = tuple(int(v) for v in getattr(self, name))
            if not values:
                raise exceptions.ConfigError(f"Selection grid {name} cannot be empty")
            object.__setattr__(self, name, values)
        if self.phase1_nodes < 1 or min(self.nodes) < 1:
            raise exceptions.ConfigError("Hidden-unit counts must be positive")


@dataclass(frozen=True)
class ControllerConfig:
    training: TrainingConfig = field(default_factory=TrainingConfig)
    etas: Tuple[float, ...] = (0.0, 0.2, 0.8)

    def __post_init__(self):
        etas = tuple(float(e) for e in self.etas)
        if any(e < 0 for e in etas):
            raise exceptions.ConfigError("Opacity weights cannot be negative")
        object.__setattr__(self, "etas", etas)


@dataclass(frozen=True)
class ProfileConfig:
    steps: Tuple[Tuple[float, float], ...] = DEFAULT_STEPS
    mode: str = "ceiling"
    duration: float = 60.0
    ceiling: float = 15.0

    def __post_init__(self):
        try:
            steps = tuple((float(t), float(level)) for t, level in self.steps)
        except (TypeError, ValueError):
            raise exceptions.ConfigError(f"Profile steps must be (time, rpm) pairs, got {self.steps}")
        object.__setattr__(self, "steps", steps)
        if self.mode not in OP_REF_MODES:
            raise exceptions.ConfigError(f"Unknown opacity reference mode {self.mode!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    plant: PlantParams = field(default_factory=PlantParams)
    excitation: ExcitationConfig = field(default_factory=ExcitationConfig)
    identification: IdentificationConfig = field(default_factory=IdentificationConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def digest(self) -> str:
        """First 16 hex digits of the SHA-256 of the canonical JSON form."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


_NESTED = {
    RunConfig: {
        "plant": PlantParams,
        "excitation": ExcitationConfig,
        "identification": IdentificationConfig,
        "selection": SelectionConfig,
        "controller": ControllerConfig,
        "profile": ProfileConfig,
    },
    IdentificationConfig: {"lm": LmConfig},
    ControllerConfig: {"training": TrainingConfig},
}


def _build(cls, data, where, seed):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise exceptions.ConfigError(f"Section {where} must be a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise exceptions.ConfigError(f"Unknown keys in {where}: {sorted(unknown)}")

    kwargs = dict(data)
    for name, sub in _NESTED.get(cls, {}).items():
        kwargs[name] = _build(sub, data.get(name), f"{where}.{name}", seed)
    if "seed" in names and "seed" not in data and cls is not RunConfig:
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise exceptions.ConfigError(f"Invalid section {where}: {exc}")


def config_from_dict(data) -> RunConfig:
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise exceptions.ConfigError("Configuration document must be a mapping")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise exceptions.ConfigError(f"Seed must be an integer, got {seed!r}")
    return _build(RunConfig, data, "config", seed)


def load_config(path=None) -> RunConfig:
    """Load ``path``, or the packaged ``default_config.yaml``."""
    try:
        if path is None:
            text = resources.files("opacon").joinpath("default_config.yaml").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        data = yaml.safe_load(text)
    except OSError as exc:
        raise exceptions.ConfigError(f"Cannot read configuration {path}: {exc}")
    except yaml.YAMLError as exc:
        raise exceptions.ConfigError(f"Configuration {path} is not valid YAML: {exc}")
    config = config_from_dict(data)
    logger.debug("Loaded configuration %s (digest %s)", path or "default", config.digest)
    return config


def override(config: RunConfig, section: str, **values) -> RunConfig:
    """Copy of ``config`` with ``values`` replaced in ``section``; ``None`` values are ignored."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return config
    try:
        updated = dataclasses.replace(getattr(config, section), **values)
    except TypeError as exc:
        raise exceptions.ConfigError(f"Invalid override of {section}: {exc}")
    return dataclasses.replace(config, **{section: updated})
