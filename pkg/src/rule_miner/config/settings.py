"""Configuration settings for the rule miner."""

import hashlib
import json
import os
import re
import yaml
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, get_type_hints

from ..dyn_transformer import AblationFlags
from ..exceptions import ConfigError


THREADS_ENV = "RULE_MINER_THREADS"


@dataclass
class DataConfig:
    """Input data configuration."""
    source: str = "synth"  # "synth", a CMAPSS text file, or a saved synthetic dataset dir
    eval_fraction: float = 0.0  # held-out share of units/windows; 0 evaluates on training data


@dataclass
class SynthConfig:
    """Planted-rule generator configuration."""
    seed: int = 7
    rules: int = 5
    windows: int = 2000
    injection_rates: Optional[List[float]] = None
    overlaps: List[List[float]] = field(default_factory=list)  # [rule_a, rule_b, jaccard]
    n_sensors: int = 21
    window: int = 30
    amplitude: float = 2.0
    spike: float = 1.0
    noise: float = 0.1
    atoms_per_rule: int = 2


@dataclass
class WindowingConfig:
    """Sliding window configuration."""
    window: int = 30
    stride: int = 5
    rul_cap: float = 125.0
    bands: int = 4
    level_bins: int = 3


@dataclass
class ModelConfig:
    """Encoder, rule generator and codebook configuration."""
    d_model: int = 32
    d_ff: int = 64
    layers: int = 2
    d_k: int = 32
    n_heads: int = 1
    m: int = 16
    d_r: int = 16
    temperature: float = 0.5
    similarity: str = "cosine"
    decay_init: float = 0.01
    timestamp_base: float = 10000.0


@dataclass
class TrainConfig:
    """Optimisation configuration."""
    steps: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    w_nll: float = 1.0
    w_rul: float = 1.0
    w_ent: float = 0.1
    w_rep: float = 0.1
    kappa: float = 1.0
    drift_decay: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    codebook_init_windows: int = 256
    revive_every: int = 10  # steps between dead-code revivals; 0 disables
    min_codes_in_use: int = 4
    log_every: int = 10


@dataclass
class RuleConfig:
    """Rule discretisation and filtering configuration."""
    top_k: int = 3
    salience_ratio: float = 0.75
    anomaly_z: float = 3.0
    trend_factor: float = 0.01
    min_support: float = 0.01
    min_confidence: float = 0.5
    min_members: int = 3
    cooccurrence: float = 0.9
    max_rules_per_code: int = 8


@dataclass
class EvalConfig:
    """Evaluation, baseline and ablation configuration."""
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    apriori_min_support: float = 0.05
    apriori_min_confidence: float = 0.5
    apriori_max_size: int = 3
    apriori_include_levels: bool = True
    record_wall_time: bool = True


@dataclass
class LoggingConfig:
    """Logging configuration."""
    level: str = "INFO"
    format: str = "text"
    output: str = "stderr"


@dataclass
class RunConfig:
    """Main configuration for a rule mining run."""
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    windowing: WindowingConfig = field(default_factory=WindowingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)
    rules: RuleConfig = field(default_factory=RuleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def fingerprint(self) -> str:
        """SHA-256 of the canonical config, logging section excluded."""
        data = self.to_dict()
        data.pop("logging")
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_variant(self, flags: AblationFlags, seed: int) -> "RunConfig":
        return replace(self, flags=flags, train=replace(self.train, seed=seed))

    def validate(self) -> "RunConfig":
        m, t, r, w = self.model, self.train, self.rules, self.windowing
        _require(all(v > 0 for v in (m.d_model, m.d_ff, m.layers, m.d_k, m.n_heads, m.d_r)),
                 "model dimensions must be positive")
        _require(m.d_k % m.n_heads == 0, f"model.d_k={m.d_k} is not divisible by n_heads={m.n_heads}")
        _require(m.m >= 2, f"model.m must be >= 2, got {m.m}")
        _require(m.temperature > 0, f"model.temperature must be positive, got {m.temperature}")
        _require(m.similarity in ("cosine", "dot"), f"unknown model.similarity {m.similarity!r}")
        _require(m.decay_init > 0, f"model.decay_init must be positive, got {m.decay_init}")
        _require(t.steps >= 0, f"train.steps must be >= 0, got {t.steps}")
        _require(t.batch_size >= 1, f"train.batch_size must be >= 1, got {t.batch_size}")
        _require(t.lr >= 0, f"train.lr must be >= 0, got {t.lr}")
        _require(min(t.w_nll, t.w_rul, t.w_ent, t.w_rep, t.kappa) >= 0,
                 "loss weights and kappa must be non-negative")
        _require(0 < t.drift_decay < 1, f"train.drift_decay must be in (0, 1), got {t.drift_decay}")
        _require(t.seed >= 0, f"train.seed must be non-negative, got {t.seed}")
        _require(t.revive_every >= 0 and t.min_codes_in_use >= 0,
                 "train.revive_every and train.min_codes_in_use must be >= 0")
        _require(w.window >= 4 and w.stride >= 1, f"invalid windowing {w.window}/{w.stride}")
        _require(w.bands >= 1 and w.level_bins >= 1 and w.rul_cap > 0, "invalid band/bin settings")
        _require(0 < r.min_support <= 1, f"rules.min_support must be in (0, 1], got {r.min_support}")
        _require(0 <= r.min_confidence <= 1, f"rules.min_confidence must be in [0, 1]")
        _require(r.top_k >= 1 and r.min_members >= 1, "rules.top_k and rules.min_members must be >= 1")
        _require(0 < r.cooccurrence <= 1, f"rules.cooccurrence must be in (0, 1], got {r.cooccurrence}")
        _require(r.max_rules_per_code >= 1, "rules.max_rules_per_code must be >= 1")
        _require(0 < self.eval.apriori_min_support <= 1,
                 f"eval.apriori_min_support must be in (0, 1], got {self.eval.apriori_min_support}")
        _require(self.eval.apriori_max_size >= 1, "eval.apriori_max_size must be >= 1")
        _require(0 <= self.data.eval_fraction < 1, f"data.eval_fraction must be in [0, 1)")
        return self


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


ENV_REFERENCE = re.compile(r"\$\{(?P<name>[A-Za-z_][A-Za-z0-9_]*)(?::(?P<default>[^}]*))?\}")


def _expand_env(value: Any, path: str) -> Any:
    """Replace ``${NAME}`` / ``${NAME:default}`` references in strings, also inside lists.

    A reference that is the whole string may resolve to None (unset, no default); an
    embedded one may not.
    """
    if isinstance(value, list):
        return [_expand_env(item, f"{path}[{i}]") for i, item in enumerate(value)]
    if not isinstance(value, str) or "${" not in value:
        return value

    whole = ENV_REFERENCE.fullmatch(value)
    if whole:
        return os.environ.get(whole["name"], whole["default"])

    def lookup(match: "re.Match[str]") -> str:
        resolved = os.environ.get(match["name"], match["default"])
        if resolved is None:
            raise ConfigError(f"'{path}' references unset environment variable {match['name']}")
        return resolved

    return ENV_REFERENCE.sub(lookup, value)


def _coerce(value: Any, hint: Any, path: str) -> Any:
    """Expand environment references, then convert YAML scalars to the declared field type."""
    value = _expand_env(value, path)
    if value is None:
        return None
    try:
        if hint is bool:
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return lowered in ("true", "1", "yes")
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if hint is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if hint is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if hint is str:
            return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value {value!r} for '{path}'") from e
    return value


def _build_section(cls: Any, data: Any, path: str) -> Any:
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"'{path}' must be a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key '{path}.{unknown[0]}'")
    hints = get_type_hints(cls)
    return cls(**{key: _coerce(value, hints[key], f"{path}.{key}") for key, value in data.items()})


SECTIONS = {
    "data": DataConfig,
    "synth": SynthConfig,
    "windowing": WindowingConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "flags": AblationFlags,
    "rules": RuleConfig,
    "eval": EvalConfig,
    "logging": LoggingConfig,
}


def config_from_dict(config_data: Optional[Dict[str, Any]]) -> RunConfig:
    """Build and validate a RunConfig from an already-parsed document."""
    config_data = config_data or {}
    if not isinstance(config_data, dict):
        raise ConfigError("configuration document must be a mapping")
    unknown = sorted(set(config_data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config key '{unknown[0]}'")
    sections = {
        name: _build_section(cls, config_data.get(name), name) for name, cls in SECTIONS.items()
    }
    return RunConfig(**sections).validate()


def load_config(config_file: str) -> RunConfig:
    """Load configuration from a YAML (or JSON) file."""

    with open(config_file, 'r') as f:
        try:
            config_data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {config_file}: {e}") from e

    return config_from_dict(config_data)


def thread_count() -> int:
    """Worker cap for ablation grids, from RULE_MINER_THREADS (default 1)."""
    raw = os.getenv(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {threads}")
    return threads
