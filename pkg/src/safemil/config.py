"""Experiment configuration: nested dataclasses read from and written to TOML."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .cmdp import TabularCmdp, env_from_spec
from .errors import ConfigError
from .mil import CostModelConfig
from .policy import METHODS, PolicyLearnConfig


@dataclass
class EnvSpec:
    kind: str = "speed_chain"
    length: int = 10
    side: int = 5
    hazards: list = field(default_factory=lambda: [[3, 2], [4, 2]])
    horizon: int | None = None
    threshold: float | None = None
    gamma: float = 0.99
    slip: float = 0.05

    def __post_init__(self):
        if self.kind not in ("speed_chain", "hazard_grid"):
            raise ConfigError(f"unknown env kind {self.kind!r}")

    @property
    def name(self) -> str:
        return self.kind

    def build(self) -> TabularCmdp:
        spec = {k: v for k, v in asdict(self).items() if v is not None}
        return env_from_spec(spec)


@dataclass
class DataSpec:
    """Pool generation, labelling and dataset assembly.

    The raw pool has an expert tier (noised safe and risky experts) and a
    uniform-random tier of varied quality.  The safe expert is the constrained
    optimum at ``safe_threshold_scale`` times the environment threshold.
    """

    n_expert: int = 1000
    n_random: int = 1000
    epsilon: float = 0.05
    safe_threshold_scale: float = 0.5
    reward_quantile: float = 0.5
    cost_hi: float = 0.75
    cost_lo: float = 0.25
    alpha: float = 0.5
    n_unlabeled: int = 200
    n_negative: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_expert < 2 or self.n_random < 0:
            raise ConfigError("pool sizes out of range")
        if not 0 <= self.epsilon <= 0.3:
            raise ConfigError("epsilon must lie in [0, 0.3]")
        if not 0 < self.safe_threshold_scale <= 1:
            raise ConfigError("safe_threshold_scale must lie in (0, 1]")


@dataclass
class EvalSpec:
    episodes: int = 50
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    resamples: int = 1000
    level: float = 0.95
    eval_seed: int = 12345
    baseline: str = "rollout"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds list must be non-empty")
        if self.episodes < 1 or self.resamples < 1 or not 0 < self.level < 1:
            raise ConfigError("eval settings out of range")
        if self.baseline not in ("rollout", "exact"):
            raise ConfigError("baseline must be 'rollout' or 'exact'")
        self.seeds = [int(s) for s in self.seeds]


@dataclass
class SweepSpec:
    K: list = field(default_factory=lambda: [1, 8, 16, 64, 128])
    H: list = field(default_factory=lambda: [1, 5, 10])
    methods: list = field(default_factory=lambda: ["safemil-trajectory"])

    def __post_init__(self):
        if not self.K or not self.H or min(self.K) < 1 or min(self.H) < 1:
            raise ConfigError("sweep lists must hold positive integers")
        bad = [m for m in self.methods if not m.startswith("safemil")]
        if bad:
            raise ConfigError(f"sweeps only vary cost-learning methods, got {bad}")


@dataclass
class ExperimentConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    data: DataSpec = field(default_factory=DataSpec)
    cost: CostModelConfig = field(default_factory=CostModelConfig)
    policy: PolicyLearnConfig = field(default_factory=PolicyLearnConfig)
    methods: list = field(default_factory=lambda: list(METHODS))
    eval: EvalSpec = field(default_factory=EvalSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown methods {bad}; expected a subset of {METHODS}")

    def policy_config(self, method: str, seed: int) -> PolicyLearnConfig:
        return PolicyLearnConfig(**{**asdict(self.policy), "method": method, "seed": seed})

    def cost_config(self, seed: int, K: int | None = None, H: int | None = None) -> CostModelConfig:
        c = asdict(self.cost)
        c.update(seed=seed, K=K or c["K"], H=H or c["H"])
        return CostModelConfig(**c)

    def to_dict(self) -> dict:
        return _drop_none(asdict(self))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml())


SECTIONS = {"env": EnvSpec, "data": DataSpec, "cost": CostModelConfig,
            "policy": PolicyLearnConfig, "eval": EvalSpec, "sweep": SweepSpec}


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, (list, tuple)):
        return [_drop_none(v) for v in d]
    return d


def config_from_dict(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - set(SECTIONS) - {"methods"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    kwargs = {}
    for name, cls in SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        allowed = {f.name for f in fields(cls)}
        extra = set(section) - allowed
        if extra:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
        try:
            kwargs[name] = cls(**section)
        except TypeError as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    if "methods" in raw:
        kwargs["methods"] = list(raw["methods"])
    return ExperimentConfig(**kwargs)


def preset(name: str) -> ExperimentConfig:
    """Desk-scale defaults for the two synthetic environments."""
    if name == "speed_chain":
        return ExperimentConfig(env=EnvSpec("speed_chain"), cost=CostModelConfig(K=128, H=5))
    if name == "hazard_grid":
        return ExperimentConfig(env=EnvSpec("hazard_grid"), cost=CostModelConfig(K=128, H=10))
    raise ConfigError(f"unknown preset {name!r}")


def load_config(source) -> ExperimentConfig:
    """Read a TOML file, or build a preset when given its name."""
    if str(source) in ("speed_chain", "hazard_grid"):
        return preset(str(source))
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)
