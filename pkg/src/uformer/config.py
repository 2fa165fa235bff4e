"""Flat ``key = value`` run configuration.

Keys are dotted by section (``model.base_channels``, ``train.lr_start``,
``paths.checkpoint``, ``run.deterministic``); ``#`` starts a comment.  Every
key must be known, so a typo is an error rather than a silently ignored
setting.  ``model.variant = T`` seeds the model section from a preset before
the remaining ``model.*`` keys are applied.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .model import ConfigError, UformerConfig, variant
from .train import TrainConfig


@dataclass
class Paths:
    data_dir: str = ""
    checkpoint: str = "checkpoint.uft"
    out_dir: str = "."
    resume: str = ""


@dataclass
class RunFlags:
    deterministic: bool = False
    f64: bool = False
    check_finite: bool = False
    zero_output_proj: bool = False


@dataclass
class RunConfig:
    model: UformerConfig = field(default_factory=UformerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)
    run: RunFlags = field(default_factory=RunFlags)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, current: Any, key: str) -> Any:
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(current, int) or current is None and raw.lstrip("-").isdigit():
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def _fields(obj, prefix: str):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            yield from _fields(value, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", obj, f.name, value


def dump(cfg: RunConfig) -> str:
    lines = []
    for key, _, _, value in _fields(cfg, ""):
        lines.append(f"{key} = {_format(value)}")
    return "\n".join(lines) + "\n"


def dump_model(cfg: UformerConfig) -> str:
    return "".join(f"model.{k} = {_format(v)}\n" for k, _, _, v in _fields(cfg, ""))


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    entries: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in entries:
            raise ConfigError(f"{source}:{n}: duplicate key {key}")
        entries[key] = value
    return entries


def parse(text: str, source: str = "<config>") -> RunConfig:
    entries = parse_lines(text, source)
    cfg = RunConfig()
    if "model.variant" in entries:
        cfg.model = variant(entries.pop("model.variant"))
    slots = {key: (obj, name, value) for key, obj, name, value in _fields(cfg, "")}
    unknown = sorted(set(entries) - set(slots))
    if unknown:
        raise ConfigError(f"{source}: unknown key(s): {', '.join(unknown)}")
    for key, raw in entries.items():
        obj, name, current = slots[key]
        if raw == "" and current is None:
            continue
        setattr(obj, name, _parse(raw, current, key))
    # derived defaults follow the keys they derive from unless set explicitly
    if "model.encoder_depths" in entries and "model.bottleneck_depth" not in entries:
        cfg.model.bottleneck_depth = None
    if "model.base_channels" in entries and "model.head_dim" not in entries:
        cfg.model.head_dim = None
    cfg.model.__post_init__()
    cfg.model.validate()
    cfg.train.validate()
    return cfg


BUNDLED = Path(__file__).parent / "configs"


def bundled() -> list[str]:
    return sorted(p.stem for p in BUNDLED.glob("*.cfg"))


def resolve(path) -> Path:
    """A file path, or the name of a bundled config (``tiny``, ``smoke``, ``uformer-t``...)."""
    path = Path(path)
    if not path.exists() and path.suffix == "" and (BUNDLED / f"{path.name}.cfg").exists():
        return BUNDLED / f"{path.name}.cfg"
    return path


def load(path) -> RunConfig:
    path = resolve(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse(text, str(path))


def model_from_text(text: str) -> UformerConfig:
    """Rebuild a model config from the ``model.*`` lines of a checkpoint header."""
    entries = {k: v for k, v in parse_lines(text).items() if k.startswith("model.")}
    return parse("\n".join(f"{k} = {v}" for k, v in entries.items())).model


