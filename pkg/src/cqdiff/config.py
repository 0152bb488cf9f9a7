"""Experiment configuration: a flat ``section.key = value`` text file.

Example::

    seed = 7
    scenario.aois = urban, suburb, rural
    scenario.n_users = 300
    schedule.steps = 50
    plan.name = T1S4
    plan.gamma = 0.8
    plan.delta = 0.2

Lines starting with ``#`` are comments. Lists are comma separated; ``none``
clears an optional value. Unknown keys and invalid values are rejected
before any work starts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .denoiser import DenoiserConfig
from .diffusion import NoiseSchedule, make_schedule
from .metrics import DEFAULT_BINS
from .scenario import AOI, ScenarioParams
from .training import Stage, StagePlan, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleParams:
    steps: int = 50
    kind: str = "quadratic"
    beta_min: float = 1e-4
    beta_max: float = 0.5

    def build(self) -> NoiseSchedule:
        return make_schedule(self.steps, self.kind, self.beta_min, self.beta_max)


@dataclass(frozen=True)
class PlanParams:
    name: str = "T1S4"
    stages: str = ""
    gamma: float = 0.8
    delta: float = 0.2
    physical_weighting: str = "alpha_bar"

    def build(self) -> StagePlan:
        if self.stages:
            stages = []
            for item in self.stages.split(","):
                kind, _, patience = item.strip().partition(":")
                stages.append(Stage(kind.strip(), int(patience)))
        elif self.name.upper() == "T1S4":
            stages = [Stage("teacher", 1), Stage("student", 4)]
        elif self.name.upper() == "T0S5":
            stages = [Stage("student", 5)]
        else:
            raise ConfigError(f"plan.name {self.name!r} is not T1S4 or T0S5 and plan.stages is empty")
        return StagePlan(tuple(stages), self.gamma, self.delta, self.physical_weighting)


@dataclass(frozen=True)
class EvalParams:
    bins: int = DEFAULT_BINS
    n_samples: int = 10
    test_fraction: float = 0.2
    target_aoi: str = "rural"

    def __post_init__(self):
        if self.bins < 1 or self.n_samples < 1:
            raise ValueError("metrics.bins and metrics.n_samples must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ValueError("metrics.test_fraction must lie in (0, 1)")
        AOI(self.target_aoi)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    aois: tuple = ("urban", "suburb", "rural")
    scenario: ScenarioParams = field(default_factory=ScenarioParams)
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    plan: PlanParams = field(default_factory=PlanParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: EvalParams = field(default_factory=EvalParams)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "aois": list(self.aois)}
        for name in SECTIONS:
            section = getattr(self, name)
            out[name] = {f.name: _plain(getattr(section, f.name)) for f in dataclasses.fields(section) if f.name not in _HIDDEN.get(name, ())}
        return out

    def flat(self) -> dict:
        """Fully resolved ``key -> value`` mapping, defaults applied."""
        d = self.to_dict()
        flat = {"seed": d["seed"], "scenario.aois": d["aois"]}
        for name in SECTIONS:
            flat.update({f"{name}.{k}": v for k, v in d[name].items()})
        return flat


SECTIONS = ("scenario", "schedule", "denoiser", "plan", "train", "metrics")
_SECTION_TYPES = {
    "scenario": ScenarioParams,
    "schedule": ScheduleParams,
    "denoiser": DenoiserConfig,
    "plan": PlanParams,
    "train": TrainConfig,
    "metrics": EvalParams,
}
# the per-dataset AOI comes from scenario.aois; the training seed is the top-level seed
_HIDDEN = {"scenario": ("aoi",), "train": ("seed",)}


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    if hasattr(v, "value"):
        return v.value
    return v


def _coerce(key: str, text: str, default):
    text = text.strip()
    try:
        if text.lower() == "none":
            if default is not None and not key.startswith("scenario."):
                raise ValueError("value is required")
            return None
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return text.lower() == "true"
        if isinstance(default, int) and not hasattr(default, "value"):
            return int(text)
        if isinstance(default, float) or default is None:
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(x) for x in text.split(",") if x.strip())
        return text
    except ValueError as e:
        raise ConfigError(f"{key}: cannot use {text!r} ({e})") from e


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return build_config(values, source)


def build_config(values: dict[str, str], source: str = "<config>") -> ExperimentConfig:
    values = dict(values)
    base = ExperimentConfig()
    seed = int(_coerce("seed", values.pop("seed"), 0)) if "seed" in values else base.seed
    aois = base.aois
    if "scenario.aois" in values:
        aois = tuple(a.strip() for a in values.pop("scenario.aois").split(",") if a.strip())
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        defaults = getattr(base, name)
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = f"{name}.{f.name}"
            if key in values and f.name not in _HIDDEN.get(name, ()):
                kwargs[f.name] = _coerce(key, values.pop(key), getattr(defaults, f.name))
        sections[name] = kwargs
    if values:
        raise ConfigError(f"{source}: unknown keys {sorted(values)}")
    try:
        for a in aois:
            AOI(a)
        if not aois or len(set(aois)) != len(aois):
            raise ValueError("scenario.aois must list distinct AOIs")
        cfg = ExperimentConfig(
            seed=seed,
            aois=aois,
            **{name: dataclasses.replace(getattr(base, name), **kw) for name, kw in sections.items()},
        )
        # build derived objects now so every inconsistency surfaces before work starts
        cfg.schedule.build()
        cfg.plan.build()
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{source}: {e}") from e
    return cfg


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise OSError(e.errno, f"cannot read config {path}: {e.strerror or e}") from e
    return parse_config(text, str(path))


def format_config(cfg: ExperimentConfig) -> str:
    """Inverse of parse_config for a resolved config."""
    lines = []
    for key, value in cfg.flat().items():
        if isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        elif value is None:
            value = "none"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
