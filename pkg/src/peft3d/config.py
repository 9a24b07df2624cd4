"""Run configuration: an INI file with sections [data], [model], [train],
[lora], [eval], [tasks].

Every numeric default of the toolkit appears here; unknown sections or keys
are rejected so typos fail loudly.  The canonical serialization (and its
digest) is recorded in every artifact a run produces.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .evalsuite import EmbedderConfig
from .generator import GeneratorConfig, RenderConfig
from .serialization import digest_text
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    resolution: int = 64
    pretrain_identities: int = 20
    pretrain_images: int = 60
    heldout_identities: int = 8
    heldout_images: int = 60
    target_identities: int = 1
    target_images: int = 110
    n_test: int = 10
    dp_size: int = 50  # default personalization training-set size


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 1
    variant: str = "correct"


@dataclass(frozen=True)
class EvalConfig:
    embedder_steps: int = 1200
    embedder_batch: int = 32
    embedder_lr: float = 2e-3
    min_accuracy: float = 0.90
    interp_pairs: int = 10
    interp_steps: int = 10
    interp_views: int = 20
    diversity_n: int = 1000


@dataclass(frozen=True)
class TasksConfig:
    sr_factor: int = 4
    edit_attribute: str = "smile"
    edit_magnitudes: tuple[float, ...] = (-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0)
    n_task_images: int = 4
    n_synthesize: int = 200
    edit_probe_per_class: int = 30
    edit_probe_steps: int = 120


@dataclass(frozen=True)
class ModelSection:
    latent_dim: int = 64
    plane_channels: int = 8
    plane_resolution: int = 32
    backbone_channels: tuple[int, ...] = (128, 128, 96, 64)
    decoder_hidden: int = 32
    sr_channels: int = 16
    image_resolution: int = 64
    raw_resolution: int = 32
    n_samples: int = 16
    near: float = 1.1
    far: float = 2.9

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            latent_dim=self.latent_dim,
            plane_channels=self.plane_channels,
            plane_resolution=self.plane_resolution,
            backbone_channels=self.backbone_channels,
            decoder_hidden=self.decoder_hidden,
            sr_channels=self.sr_channels,
            image_resolution=self.image_resolution,
            render=RenderConfig(
                n_samples=self.n_samples,
                near=self.near,
                far=self.far,
                raw_resolution=self.raw_resolution,
            ),
        )


_TRAIN_KEYS = (
    "lambda_l2", "lambda_perc", "resolution_weights", "anchor_steps",
    "personalize_steps", "pti_latent_steps", "pti_model_steps",
    "pretrain_steps", "batch_size", "lr_latent", "lr_adapters", "lr_full",
    "lr_gan", "r1_gamma", "r1_interval", "ema_decay",
)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    tasks: TasksConfig = field(default_factory=TasksConfig)

    @property
    def seed(self) -> int:
        return self.data.seed

    def generator_config(self) -> GeneratorConfig:
        return self.model.generator_config()

    def embedder_config(self) -> EmbedderConfig:
        return EmbedderConfig(
            steps=self.eval.embedder_steps,
            batch_size=self.eval.embedder_batch,
            lr=self.eval.embedder_lr,
            min_accuracy=self.eval.min_accuracy,
            seed=self.data.seed,
        )

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, obj in (
            ("data", self.data), ("model", self.model), ("train", self.train),
            ("lora", self.lora), ("eval", self.eval), ("tasks", self.tasks),
        ):
            parser[section] = {}
            d = asdict(obj)
            if section == "train":
                d = {k: v for k, v in d.items() if k in _TRAIN_KEYS}
            for key, val in d.items():
                if isinstance(val, (tuple, list)):
                    val = ",".join(format(v, "g") if isinstance(v, float) else str(v) for v in val)
                parser[section][key] = str(val)
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return digest_text(self.to_ini())


def _coerce(value: str, like) -> object:
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        parts = [p for p in value.split(",") if p.strip()]
        elem = like[0] if like else 0.0
        return tuple(type(elem)(float(p) if isinstance(elem, float) else int(p)) if not isinstance(elem, str) else p.strip() for p in parts)
    return value


class ConfigError(ValueError):
    pass


def _section_from(parser: configparser.ConfigParser, name: str, cls, train_seed: int | None = None):
    defaults = cls() if train_seed is None else cls(seed=train_seed)
    if not parser.has_section(name):
        return defaults
    allowed = {f.name for f in fields(cls)}
    if cls is TrainConfig:
        allowed = set(_TRAIN_KEYS)
    overrides = {}
    for key, raw in parser.items(name):
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        current = getattr(defaults, key)
        overrides[key] = _coerce(raw, current)
    if cls is TrainConfig and train_seed is not None:
        overrides.setdefault("seed", train_seed)
    return cls(**{**{k: getattr(defaults, k) for k in (f.name for f in fields(cls))}, **overrides})


def load_run_config(path: str | Path | None = None, seed: int | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional INI file, and a seed override."""
    parser = configparser.ConfigParser()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string(text)
        known = {"data", "model", "train", "lora", "eval", "tasks"}
        unknown = set(parser.sections()) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    data = _section_from(parser, "data", DataConfig)
    if seed is not None:
        data = DataConfig(**{**asdict(data), "seed": seed})
    model = _section_from(parser, "model", ModelSection)
    train = _section_from(parser, "train", TrainConfig, train_seed=data.seed)
    lora = _section_from(parser, "lora", LoraConfig)
    eval_cfg = _section_from(parser, "eval", EvalConfig)
    tasks = _section_from(parser, "tasks", TasksConfig)
    if lora.variant not in ("correct", "legacy"):
        raise ConfigError(f"lora variant must be 'correct' or 'legacy', got {lora.variant!r}")
    cfg = RunConfig(data=data, model=model, train=train, lora=lora, eval=eval_cfg, tasks=tasks)
    cfg.generator_config()  # validates model-section consistency
    return cfg


def default_config_ini() -> str:
    return RunConfig().to_ini()
