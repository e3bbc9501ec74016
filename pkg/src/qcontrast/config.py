"""Declarative run configuration: JSON with ``//`` and ``#`` comments allowed."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import LongTailSpec
from .errors import ConfigurationError
from .qnn import BackboneConfig, ModelConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1
SOURCES = ("synthetic", "manifest")


@dataclass
class DataConfig:
    source: str = "synthetic"
    n_classes: int = 10
    noise_std: float = 0.5
    recording_length: int = 200_000
    manifest: str | None = None  # relative paths resolve against the config file
    window: int = 2048

    def validate(self) -> None:
        if self.source not in SOURCES:
            raise ConfigurationError(f"data.source must be one of {SOURCES}, got {self.source!r}")
        if self.source == "manifest" and not self.manifest:
            raise ConfigurationError("data.source 'manifest' requires data.manifest")
        if self.n_classes < 2:
            raise ConfigurationError("data.n_classes must be at least 2")
        if self.window < 1 or self.recording_length < self.window:
            raise ConfigurationError("data.recording_length must be at least data.window")


@dataclass
class ModelSection:
    neuron: str = "quadratic"
    variant: str = "full"
    channels: list[int] = field(default_factory=lambda: [16, 16, 32, 64, 128])
    stem_kernel: int = 7
    block_kernel: int = 3
    proj_hidden: int = 128
    proj_dim: int = 64


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    split: LongTailSpec = field(default_factory=LongTailSpec)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)

    def model_config(self) -> ModelConfig:
        m = self.model
        backbone = BackboneConfig(m.neuron, m.variant, list(m.channels), m.stem_kernel, m.block_kernel, self.data.window)
        return ModelConfig(backbone, self.data.n_classes, m.proj_hidden, m.proj_dim)

    def train_config(self) -> TrainConfig:
        d = asdict(self.train)
        d["seed"] = self.seed
        return TrainConfig(**d)

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})")
        self.data.validate()
        _ = self.split.n_fault_per_class
        self.model_config().backbone.validate()
        self.train_config().validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"].pop("seed")  # the root seed lives at the top level
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigurationError("config root must be an object")
        if "schema_version" not in raw:
            raise ConfigurationError("config is missing mandatory field 'schema_version'")
        _check_keys(raw, cls, "")
        sections = {"data": DataConfig, "split": LongTailSpec, "model": ModelSection, "train": TrainConfig}
        kwargs = {k: v for k, v in raw.items() if k not in sections}
        for name, typ in sections.items():
            body = raw.get(name, {})
            if not isinstance(body, dict):
                raise ConfigurationError(f"section '{name}' must be an object")
            if name == "train" and "seed" in body:
                raise ConfigurationError("set the seed at the top level, not in 'train'")
            _check_keys(body, typ, f"{name}.")
            kwargs[name] = typ(**body)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def _check_keys(raw: dict, typ, prefix: str) -> None:
    known = {f.name for f in fields(typ)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")


def strip_comments(text: str) -> str:
    """Blank out ``//`` and ``#`` comments outside strings, keeping line numbers."""
    out = []
    in_str = escaped = False
    i = 0
    while i < len(text):
        ch = text[i]
        if in_str:
            out.append(ch)
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
            i += 1
            continue
        if ch == '"':
            in_str = True
        elif ch == "#" or text.startswith("//", i):
            end = text.find("\n", i)
            end = len(text) if end < 0 else end
            out.append(" " * (end - i))
            i = end
            continue
        out.append(ch)
        i += 1
    return "".join(out)


def loads(text: str, source: str = "<config>") -> RunConfig:
    try:
        raw = json.loads(strip_comments(text))
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno <= len(text.splitlines()) else ""
        raise ConfigurationError(
            f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}\n    {' ' * (exc.colno - 1)}^"
        ) from None
    try:
        return RunConfig.from_dict(raw)
    except TypeError as exc:  # wrong value types reaching dataclass constructors
        raise ConfigurationError(f"{source}: {exc}") from None


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    cfg = loads(text, str(path))
    if cfg.data.manifest and not Path(cfg.data.manifest).is_absolute():
        cfg.data.manifest = str((path.parent / cfg.data.manifest).resolve())
    return cfg
