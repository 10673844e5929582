"""Experiment configuration: sectioned INI files, validated field by field."""

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..geometry import GridMeta


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    height: int = 40
    width: int = 96
    resolution: float = 0.4
    z_min: float = -3.5
    z_max: float = 1.5

    def meta(self) -> GridMeta:
        return GridMeta.centered(self.height, self.width, self.resolution, z_min=self.z_min, z_max=self.z_max)


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    heads: int = 2
    deform_heads: int = 2
    points: int = 4
    max_radius: float = 3.0
    attention: str = "local"
    dtype: str = "float64"


@dataclass(frozen=True)
class ModulesConfig:
    distillation: bool = True
    compensation: bool = True
    collaborative_fusion: bool = True
    temporal_fusion: bool = True


@dataclass(frozen=True)
class LossConfig:
    detection: float = 1.0
    distill: float = 0.5
    kl: float = 0.1
    distill_kind: str = "kl"
    reg_weight: float = 2.0


@dataclass(frozen=True)
class OptimConfig:
    optimizer: str = "momentum"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    decay_epochs: tuple[int, ...] = (6,)
    decay_factor: float = 0.1
    epochs: int = 8
    batch_size: int = 4
    grad_clip: float = 10.0
    teacher_epochs: int = 6


@dataclass(frozen=True)
class NoiseConfig:
    train_distribution: str = "gaussian"
    train_trans: float = 0.2  # metres
    train_rot_deg: float = 0.2
    eval_distribution: str = "gaussian"
    eval_levels: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6)


@dataclass(frozen=True)
class DataConfig:
    train_scenes: int = 200
    eval_scenes: int = 50
    min_objects: int = 3
    max_objects: int = 7
    frame_dt: float = 0.1
    max_delay: float = 0.3
    max_speed: float = 8.0
    ego_max_speed: float = 10.0
    ego_density: float = 1.0
    infra_density: float = 3.0
    ego_z_noise: float = 0.06
    infra_z_noise: float = 0.02
    clutter_points: int = 600
    clutter_clusters: int = 6
    infra_fov_deg: float = 100.0
    train_ap_scenes: int = 16


@dataclass(frozen=True)
class EvalConfig:
    score_threshold: float = 0.1
    nms_iou: float = 0.1
    top_k: int = 200
    max_detections: int = 50


SECTIONS = {
    "grid": GridConfig,
    "model": ModelConfig,
    "modules": ModulesConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "noise": NoiseConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    modules: ModulesConfig = field(default_factory=ModulesConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        validate(self)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with section fields overridden, e.g. ``replace(optim={"epochs": 0})``."""
        kw = {}
        for name, value in sections.items():
            if name == "seed":
                kw["seed"] = int(value)
            elif name not in SECTIONS:
                raise ConfigError(f"unknown section {name!r}")
            elif isinstance(value, dict):
                kw[name] = _replace_section(getattr(self, name), name, value)
            else:
                kw[name] = value
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            out[name] = {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in dataclasses.asdict(getattr(self, name)).items()}
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _replace_section(section, name, values: dict):
    known = {f.name for f in dataclasses.fields(section)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    hints = _TYPES[type(section)]
    coerced = {}
    for k, v in values.items():
        if isinstance(v, str) and hints[k] is not str:
            v = _parse(v, hints[k], f"{name}.{k}")
        elif isinstance(v, list):
            v = tuple(v)
        coerced[k] = v
    return dataclasses.replace(section, **coerced)


_TYPES = {cls: typing.get_type_hints(cls) for cls in SECTIONS.values()}


def _parse(raw: str, hint, where: str):
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if typing.get_origin(hint) is tuple:
            elem = typing.get_args(hint)[0]
            return tuple(elem(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None
    raise ConfigError(f"{where}: unsupported type {hint}")


def load_config(path) -> ExperimentConfig:
    """Read an INI file; every section and key must be known."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return parse_sections({s: dict(cp[s]) for s in cp.sections()})


def parse_sections(sections: dict) -> ExperimentConfig:
    kw = {}
    for name, values in sections.items():
        if name == "experiment":
            extra = set(values) - {"seed"}
            if extra:
                raise ConfigError(f"unknown key(s) in [experiment]: {', '.join(sorted(extra))}")
            if "seed" in values:
                kw["seed"] = _parse(values["seed"], int, "experiment.seed")
            continue
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        cls = SECTIONS[name]
        hints = _TYPES[cls]
        unknown = set(values) - set(hints)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
        kw[name] = cls(**{k: _parse(v, hints[k], f"{name}.{k}") for k, v in values.items()})
    return ExperimentConfig(**kw)


def dump_config(config: ExperimentConfig) -> str:
    lines = ["[experiment]", f"seed = {config.seed}", ""]
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for k, v in dataclasses.asdict(getattr(config, name)).items():
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: ExperimentConfig) -> None:
    _require(0 <= cfg.seed < 2**64, "seed must be a u64")
    g, m, o, n, d, e, lo = cfg.grid, cfg.model, cfg.optim, cfg.noise, cfg.data, cfg.eval, cfg.loss
    _require(g.height >= 2 and g.width >= 2, "grid must be at least 2x2")
    _require(g.resolution > 0, "grid resolution must be positive")
    _require(g.z_max > g.z_min, "z_max must exceed z_min")
    _require(m.channels > 0 and m.heads > 0 and m.channels % m.heads == 0, "channels must split into heads")
    _require(m.deform_heads > 0 and m.channels % m.deform_heads == 0, "channels must split into deform heads")
    _require(m.points >= 1, "need at least one sampling point")
    _require(m.max_radius > 0, "max_radius must be positive")
    _require(m.attention in ("local", "full"), "attention must be 'local' or 'full'")
    _require(m.dtype in ("float32", "float64"), "dtype must be float32 or float64")
    _require(all(w >= 0 for w in (lo.detection, lo.distill, lo.kl, lo.reg_weight)), "loss weights must be >= 0")
    _require(lo.distill_kind in ("kl", "l2"), "distill_kind must be 'kl' or 'l2'")
    _require(o.optimizer in ("momentum", "sgd", "adam"), "optimizer must be momentum, sgd or adam")
    _require(o.lr > 0 and 0 <= o.momentum < 1, "bad lr / momentum")
    _require(o.weight_decay >= 0 and 0 < o.decay_factor <= 1, "bad weight decay / decay factor")
    _require(list(o.decay_epochs) == sorted(o.decay_epochs) and all(x > 0 for x in o.decay_epochs),
             "decay_epochs must be increasing positive integers")
    _require(o.epochs >= 0 and o.teacher_epochs >= 0 and o.batch_size >= 1, "bad epoch / batch counts")
    _require(o.grad_clip >= 0, "grad_clip must be >= 0 (0 disables)")
    for dist in (n.train_distribution, n.eval_distribution):
        _require(dist in ("gaussian", "laplace"), f"unknown noise distribution {dist!r}")
    _require(n.train_trans >= 0 and n.train_rot_deg >= 0, "noise scales must be >= 0")
    _require(len(n.eval_levels) > 0 and all(v >= 0 for v in n.eval_levels), "eval levels must be >= 0")
    _require(0.0 in n.eval_levels, "eval levels must include the clean case 0.0")
    _require(d.train_scenes >= 0 and d.eval_scenes >= 0, "scene counts must be >= 0")
    _require(0 <= d.min_objects <= d.max_objects, "need 0 <= min_objects <= max_objects")
    _require(d.frame_dt > 0 and d.max_delay >= 0, "bad frame_dt / max_delay")
    _require(d.max_speed >= 0 and d.ego_max_speed >= 0, "speeds must be >= 0")
    _require(d.ego_density > 0 and d.infra_density > 0, "densities must be positive")
    _require(d.ego_z_noise >= 0 and d.infra_z_noise >= 0, "z noise must be >= 0")
    _require(d.clutter_points >= 0 and d.clutter_clusters >= 0, "clutter counts must be >= 0")
    _require(0 < d.infra_fov_deg <= 360, "infra_fov_deg must be in (0, 360]")
    _require(d.train_ap_scenes >= 0, "train_ap_scenes must be >= 0")
    _require(0 <= e.score_threshold <= 1 and 0 <= e.nms_iou <= 1, "thresholds must lie in [0, 1]")
    _require(e.top_k >= 1 and e.max_detections >= 1, "top_k / max_detections must be >= 1")
