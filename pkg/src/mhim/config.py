"""Flat ``key = value`` experiment configuration with typed validation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data import SyntheticSpec
from .training import TrainConfig, TrainConfigError

FRAMEWORK_PRESETS = ("baseline", "mhim_v1_attention", "mhim_v2")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset: a BAGF manifest, or the synthetic generator when empty
    manifest: str = ""
    n_bags: int = 200
    min_instances: int = 128
    max_instances: int = 384
    d_in: int = 64
    pos_ratio: float = 0.05
    separation: float = 2.0
    noise_ratio: float = 0.1
    # model
    model: str = "gated"
    dim: int = 512
    attn_dim: int = 128
    msa_layers: int = 2
    msa_heads: int = 8
    # framework and mining
    framework: str = "mhim_v2"
    mask_ratio_high: float = 0.02
    ratio_decay: bool = True
    mask_ratio_low: float = 0.8
    mask_strategy: str = "rsm"
    score_source: str = "instance_probability"
    grn_queries: int = 16
    grn_momentum: float = 0.9
    grn_heads: int = 8
    alpha: float = 0.5
    temperature: float = 0.5
    # optimisation
    lr: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 200
    pretrain_epochs: int = -1
    early_stopping: bool = True
    patience: int = 20
    ema_momentum: float = 0.9999
    init_mode: str = "teacher_and_student_proj_init"
    # protocol
    folds: int = 5
    seed: int = 0

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(self.n_bags, self.min_instances, self.max_instances, self.d_in,
                             self.pos_ratio, self.separation, self.noise_ratio)

    def train_config(self) -> TrainConfig:
        """Translate the framework preset into trainer settings.

        ``mhim_v1_attention`` scores instances by attention and drops the
        recycle network; ``mhim_v2`` uses the configured values as given.
        """
        shared = {f.name: getattr(self, f.name) for f in fields(TrainConfig)
                  if hasattr(self, f.name) and f.name != "framework"}
        if self.framework == "baseline":
            cfg = TrainConfig(**shared, framework="baseline")
        elif self.framework == "mhim_v1_attention":
            shared.update(score_source="attention", grn_queries=0)
            cfg = TrainConfig(**shared, framework="mhim")
        else:
            cfg = TrainConfig(**shared, framework="mhim")
        return cfg

    @property
    def needs_pretrain(self) -> bool:
        return self.framework != "baseline" and self.init_mode != "scratch"

    def validate(self) -> "ExperimentConfig":
        if self.framework not in FRAMEWORK_PRESETS:
            raise ConfigError(f"framework must be one of {FRAMEWORK_PRESETS}, got {self.framework!r}")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        try:
            self.train_config().validate()
            if not self.manifest:
                self.synthetic_spec()
        except (TrainConfigError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def with_overrides(self, pairs: dict[str, str]) -> "ExperimentConfig":
        return replace(self, **{k: _coerce(k, v) for k, v in pairs.items()})

    def to_text(self) -> str:
        lines = ["# resolved experiment configuration"]
        for k, v in asdict(self).items():
            lines.append(f"{k} = {_format(v)}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}") from None


def parse_pairs(lines) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return (base or ExperimentConfig()).with_overrides(parse_pairs(text.splitlines()))


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        try:
            cfg = parse_config(Path(path).read_text(), cfg)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
    if overrides:
        pairs = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            pairs[k.strip()] = v
        cfg = cfg.with_overrides(pairs)
    return cfg
