"""Hierarchical pipeline configuration: defaults, file merge, dotted overrides."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterable

import yaml

from .biopsy import FinetuneConfig
from .mil import MILConfig, MILTrainConfig
from .sam_distill import SegTrainConfig, UNetConfig
from .synth import SynthConfig
from .wsss import ViTConfig, WSSSTrainConfig


class ConfigError(ValueError):
    pass


# Mappings whose keys are free-form (not checked against the defaults).
OPEN_KEYS = {("synth", "textures")}


def _plain(obj):
    """Dataclass dicts -> JSON/YAML-friendly values (tuples become lists)."""
    return json.loads(json.dumps(obj))


def defaults() -> dict:
    synth = SynthConfig().to_dict()
    synth.pop("seed")
    mil_train = asdict(MILTrainConfig())
    mil_train.pop("seed")
    wsss_train = asdict(WSSSTrainConfig())
    wsss_train.pop("seed")
    seg_train = asdict(SegTrainConfig())
    seg_train.pop("seed")
    ft = asdict(FinetuneConfig())
    ft.pop("seed")
    return _plain(
        {
            "seed": 0,
            "threads": 0,
            "synth": synth,
            "extract": {"extractor": "rule", "retries": 2, "backoff": 0.5},
            "mil": {
                "epochs": 10,
                "train_fraction": 0.75,
                "model": MILConfig().to_dict(),
                "train": mil_train,
            },
            "wsss": {
                "positive_threshold": 0.5,
                "max_negatives": 400,
                "theta": 0.45,
                "min_area": 2,
                "vit": asdict(ViTConfig()),
                "train": wsss_train,
            },
            "distill": {
                "segmenter": "oracle",
                "oracle_radius": 2,
                "oracle_mode": "dilate",
                "adapter_command": [],
                "max_iters": 3,
                "eps": 0.005,
                "box_margin": 2,
                "max_workers": 1,
                "unet": asdict(UNetConfig()),
                "seg": seg_train,
            },
            "seg": {"unet": asdict(UNetConfig()), "train": {**seg_train, "steps": 600}},
            "biopsy": {
                "n_pool": 200,
                "n_test": 200,
                "data_seed": 7,
                "shot_sizes": [10, 20, 50],
                "repetitions": 5,
                "finetune": ft,
            },
            "report": {"cam_examples": 8},
        }
    )


def merge(base: dict, update: dict, path: tuple = ()) -> dict:
    """Recursive merge; keys absent from ``base`` are rejected."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        here = path + (k,)
        if path in OPEN_KEYS:
            out[k] = copy.deepcopy(v)
            continue
        if k not in out:
            raise ConfigError(f"unknown config key {'.'.join(map(str, here))!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {'.'.join(map(str, here))!r} must be a mapping")
            out[k] = merge(out[k], v, here)
        else:
            out[k] = _coerce(out[k], v, here)
    return out


def _coerce(default, value, path):
    name = ".".join(map(str, path))
    if default is None or value is None:
        return copy.deepcopy(value)
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key {name!r} expects {type(default).__name__}, got {value!r}")
    return copy.deepcopy(value)


def parse_override(text: str) -> dict:
    """'a.b.c=value' -> {'a': {'b': {'c': value}}}; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value: Any = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {text!r}: {e}") from None
    for p in reversed(parts):
        value = {p: value}
    return value


def resolve(config_path: str | Path | None = None, overrides: Iterable[str] = (), seed: int | None = None) -> dict:
    cfg = defaults()
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {config_path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"{config_path}: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: top level must be a mapping")
        cfg = merge(cfg, loaded)
    for ov in overrides:
        cfg = merge(cfg, parse_override(ov))
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, allow_unicode=True)


def digest(*parts: Any) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True).encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()[:12]


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
