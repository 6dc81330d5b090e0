"""Flat ``key=value`` run configuration and checkpoint files.

A config file holds one ``key=value`` per line; ``#`` starts a comment and
blank lines are ignored. Keys are dotted (``gcfm.k=15``,
``backbone.channels=16,32,64,64``, ``train.epochs=20``). Unknown keys are
errors. :func:`dump_config` writes every key in sorted order so two equal
configs always serialize to the same bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from glpnet.data.glt import load_bundle, save_bundle
from glpnet.network import BackboneConfig, GLPNet, ModelConfig
from glpnet.tensor import precision
from glpnet.training import TrainConfig

PRECISIONS = {"f32": np.float32, "f64": np.float64}
CONFIG_ENTRY = "__config__"


class ConfigError(ValueError):
    """Malformed config text, unknown key or a checkpoint that does not fit its config."""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    precision: str = "f32"
    ms_scales: tuple = (1.0,)
    ms_flip: bool = False

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (owner path, attribute, parser); owner path is resolved from RunConfig
_KEYS: dict[str, tuple[str, str, Callable]] = {
    "seed": ("", "seed", int),
    "precision": ("", "precision", str),
    "eval.ms_scales": ("", "ms_scales", _floats),
    "eval.flip": ("", "ms_flip", _bool),
    "num_classes": ("model", "num_classes", int),
    "use_lcfm": ("model", "use_lcfm", _bool),
    "use_gcfm": ("model", "use_gcfm", _bool),
    "use_decoder": ("model", "use_decoder", _bool),
    "lcfm_stages": ("model", "lcfm_stages", _ints),
    "gcfm.k": ("model", "gcfm_k", int),
    "gcfm.variant": ("model", "gcfm_variant", str),
    "decoder.channels": ("model", "decoder_channels", int),
    "backbone.channels": ("model.backbone", "stage_channels", _ints),
    "backbone.dilations": ("model.backbone", "last_stage_dilations", _ints),
    "backbone.blocks": ("model.backbone", "blocks_per_stage", int),
    "train.base_lr": ("train", "base_lr", float),
    "train.momentum": ("train", "momentum", float),
    "train.weight_decay": ("train", "weight_decay", float),
    "train.batch_size": ("train", "batch_size", int),
    "train.epochs": ("train", "epochs", int),
    "train.poly_power": ("train", "poly_power", float),
    "train.aux_weight": ("train", "aux_weight", float),
    "train.scale_range": ("train", "scale_range", _floats),
    "train.crop_hw": ("train", "crop_hw", _ints),
    "train.augment": ("train", "augment", _bool),
    "train.flip": ("train", "flip", _bool),
    "train.scale_depth": ("train", "scale_depth", _bool),
    "train.offset_lr_mult": ("train", "offset_lr_mult", float),
}

CONFIG_KEYS = tuple(sorted(_KEYS))


def _owner(cfg: RunConfig, path: str):
    obj = cfg
    for part in filter(None, path.split(".")):
        obj = getattr(obj, part)
    return obj


def to_flat(cfg: RunConfig) -> dict[str, str]:
    return {key: _fmt(getattr(_owner(cfg, path), attr)) for key, (path, attr, _) in _KEYS.items()}


def parse_config_text(text: str) -> dict[str, str]:
    """``key=value`` lines to a dict; later lines override earlier ones."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def from_flat(values: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply string overrides on top of ``base`` (defaults if omitted) and re-validate."""
    flat = to_flat(base if base is not None else RunConfig())
    for key, value in values.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        flat[key] = str(value)
    # use_lcfm and lcfm_stages describe the same switch; an explicit false wins over stage 4
    stages = set(_ints(flat["lcfm_stages"]))
    if "use_lcfm" in values:
        if _bool(values["use_lcfm"]):
            stages.add(4)
        else:
            stages.discard(4)
    flat["lcfm_stages"] = _fmt(tuple(sorted(stages)))
    flat["use_lcfm"] = _fmt(4 in stages)
    parsed = {}
    try:
        for key, (path, attr, parse) in _KEYS.items():
            parsed.setdefault(path, {})[attr] = parse(flat[key])
        backbone = BackboneConfig(**parsed["model.backbone"])
        model = ModelConfig(backbone=backbone, **parsed["model"])
        top = parsed[""]
        train = TrainConfig(seed=top["seed"], **parsed["train"])
        model.gcfm  # validates K, width and variant
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if top["precision"] not in PRECISIONS:
        raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {top['precision']!r}")
    if not top["ms_scales"] or min(top["ms_scales"]) <= 0:
        raise ConfigError("eval.ms_scales must be a non-empty list of positive scales")
    return RunConfig(model=model, train=train, **top)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return from_flat(parse_config_text(text), base)


def dump_config(cfg: RunConfig) -> str:
    flat = to_flat(cfg)
    return "".join(f"{key}={flat[key]}\n" for key in CONFIG_KEYS)


def replace(cfg: RunConfig, **overrides) -> RunConfig:
    """Copy with overrides given by flat key, e.g. ``replace(cfg, **{"gcfm.k": 5})``."""
    return from_flat({k: _fmt(v) if not isinstance(v, str) else v for k, v in overrides.items()}, cfg)


# ---------------------------------------------------------------- checkpoints

def build_model(cfg: RunConfig) -> GLPNet:
    """Fresh model in the config's precision."""
    with precision(cfg.dtype):
        return GLPNet(cfg.model, seed=cfg.seed)


def save_checkpoint(path, model: GLPNet, cfg: RunConfig) -> None:
    """GLT bundle of the state dict plus the resolved config as a u8 text entry."""
    entries = dict(sorted(model.state_dict().items()))
    entries[CONFIG_ENTRY] = np.frombuffer(dump_config(cfg).encode(), dtype=np.uint8)
    save_bundle(path, entries)


def model_mismatch(a: RunConfig, b: RunConfig) -> list[str]:
    """Config keys that change the network's parameters or graph and differ between ``a`` and ``b``."""
    fa, fb = to_flat(a), to_flat(b)
    return sorted(k for k, (path, _, _) in _KEYS.items() if path.startswith("model") and fa[k] != fb[k])


def load_checkpoint(path, expect: RunConfig | None = None) -> tuple[GLPNet, RunConfig]:
    """Rebuild the model from a checkpoint.

    If ``expect`` is given, its model section must match the stored one.
    """
    entries = load_bundle(path)
    if CONFIG_ENTRY not in entries:
        raise ConfigError(f"{path}: checkpoint carries no {CONFIG_ENTRY} entry")
    cfg = from_flat(parse_config_text(entries.pop(CONFIG_ENTRY).tobytes().decode()))
    if expect is not None:
        diff = model_mismatch(expect, cfg)
        if diff:
            raise ConfigError(f"checkpoint/config mismatch in {', '.join(diff)}")
    model = build_model(cfg)
    try:
        model.load_state_dict(entries)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return model, cfg
