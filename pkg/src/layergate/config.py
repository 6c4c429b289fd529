"""Run configuration: presets, file loading, validation, and resolution.

A run is described by a nested key/value document (YAML or JSON).  A preset
supplies every default; a config file and CLI flags overlay it.  Unknown keys
anywhere in the document are rejected, and the fully resolved document is
echoed alongside every command's outputs so reruns are self-describing.
"""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
import yaml

from .encoder import EncoderConfig, ModelSpec
from .features import MODALITIES, PlantedSpec, make_planted_spec
from .pooling import PoolerConfig
from .ridge import RidgeDesign
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "PRESETS",
    "load_config_file",
    "resolve_config",
    "dump_config",
    "build_planted_spec",
    "build_model_spec",
    "build_train_config",
    "build_ridge_design",
]


class ConfigError(ValueError):
    """Configuration rejected: unknown key, wrong type, or bad value."""


_DESK = {
    "seed": 33,
    "out": None,
    "modalities": None,
    "data": {
        "source": "planted",
        "manifest": None,
        "val_fraction": 0.2,
        "planted": {
            "n_windows": 120,
            "layers": 12,
            "channels": 16,
            "planted_layers": {"vision": 7, "audio": 4, "text": 9},
            "frames": 50,
            "k_out": 10,
            "parcels": 50,
            "n_subjects": 2,
            "noise_std": 0.1,
            "kernel": [0.8, 0.2],
            "signature_scale": 2.0,
            "used_modalities": None,
            "partition_parcels": False,
            "map_seed": 0,
            "seed": 101,
        },
    },
    "pooler": {
        "kind": "xattn",
        "n_queries": 4,
        "heads": 4,
        "attention_dropout": 0.2,
    },
    "encoder": {
        "hidden": 64,
        "depth": 2,
        "heads": 4,
        "ff_mult": 4,
        "inner_dropout": 0.0,
        "modality_dropout": 0.3,
        "learned_null": False,
        "max_frames": 128,
    },
    "train": {
        "peak_lr": 1e-2,
        "weight_decay": 1e-2,
        "epochs": 250,
        "batch_size": 8,
        "warmup_fraction": 0.1,
        "clip_norm": 1.0,
        "precision": "full",
        "normalize_targets": True,
    },
    "ridge": {
        "lags": [-4, -3, -2, -1, 0],
        "projection_dim": 1024,
        "projection_seed": 0,
    },
    "ensemble": {
        "tau": 0.3,
        "members": [],
        "top_n": None,
    },
    "attribution": {
        "batches": None,
    },
    "evaluate": {
        "batch_size": 16,
        "checkpoint": None,
    },
    "sweep": {
        "n_queries": [1, 2, 3, 4],
        "seeds": [42, 43, 44],
        "epochs": 60,
    },
}

_PAPER_OVERLAY = {
    "train": {
        "peak_lr": 1e-4,
        "epochs": 15,
        "batch_size": 16,
    },
    "pooler": {
        "n_queries": 24,
        "heads": 4,
    },
    "encoder": {
        "hidden": 3072,
        "depth": 8,
        "heads": 8,
        "max_frames": 512,
    },
    "data": {
        "planted": {
            "n_windows": 120,
            "layers": 48,
            "channels": 2048,
            "planted_layers": {"vision": 31, "audio": 23, "text": 35},
            "frames": 400,
            "k_out": 100,
            "parcels": 1000,
            "n_subjects": 4,
            "kernel": [0.6, 0.3, 0.1],
            "signature_scale": 1.0,
        },
    },
    "sweep": {
        "n_queries": [1, 2, 3, 4, 5, 8, 12, 16, 24, 32],
        "seeds": [42, 43, 44],
    },
}


def _deep_merge(base: dict, overlay: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and key != "planted_layers":
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            out[key] = _deep_merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _build_paper_preset() -> dict:
    return _deep_merge(_DESK, _PAPER_OVERLAY)


PRESETS = {"desk": _DESK, "paper": _build_paper_preset()}


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        document = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    if document is None:
        return {}
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return document


def resolve_config(preset: str = "desk", config_file=None, overrides: dict | None = None) -> dict:
    """Preset -> file -> CLI overrides, validated at every layer."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    resolved = copy.deepcopy(PRESETS[preset])
    if config_file is not None:
        resolved = _deep_merge(resolved, load_config_file(config_file))
    if overrides:
        resolved = _deep_merge(resolved, overrides)
    _sanity_check(resolved)
    return resolved


def _sanity_check(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    src = cfg["data"]["source"]
    if src not in ("planted", "manifest"):
        raise ConfigError(f"data.source must be 'planted' or 'manifest', got {src!r}")
    if src == "manifest" and not cfg["data"]["manifest"]:
        raise ConfigError("data.source is 'manifest' but data.manifest is empty")
    if cfg["modalities"] is not None:
        bad = [m for m in cfg["modalities"] if m not in MODALITIES]
        if bad:
            raise ConfigError(f"unknown modalities {bad}; expected subset of {list(MODALITIES)}")
        if not cfg["modalities"]:
            raise ConfigError("modalities subset must be non-empty")


def dump_config(cfg: dict, path=None) -> str:
    text = yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def _per_modality(value, name: str, used) -> dict:
    if isinstance(value, dict):
        unknown = [m for m in value if m not in MODALITIES]
        if unknown:
            raise ConfigError(f"{name} names unknown modalities {unknown}")
        missing = [m for m in used if m not in value]
        if missing:
            raise ConfigError(f"{name} is missing modalities {missing}")
        return {m: value[m] for m in used}
    return {m: value for m in used}


def build_planted_spec(cfg: dict) -> PlantedSpec:
    p = cfg["data"]["planted"]
    used = tuple(MODALITIES)
    layers = _per_modality(p["layers"], "data.planted.layers", used)
    channels = _per_modality(p["channels"], "data.planted.channels", used)
    planted_layers = _per_modality(p["planted_layers"], "data.planted.planted_layers", used)
    try:
        return make_planted_spec(
            layer_counts=layers,
            feature_dims=channels,
            planted_layers=planted_layers,
            parcels=p["parcels"],
            noise_std=p["noise_std"],
            kernel=np.asarray(p["kernel"], dtype=np.float64),
            n_frames=p["frames"],
            k_out=p["k_out"],
            n_subjects=p["n_subjects"],
            signature_scale=p["signature_scale"],
            used_modalities=p["used_modalities"],
            partition_parcels=p["partition_parcels"],
            map_seed=p["map_seed"],
        )
    except ValueError as exc:
        raise ConfigError(f"invalid planted-data config: {exc}") from exc


def build_model_spec(cfg: dict, channels: dict[str, int], parcels: int, k_out: int,
                     n_subjects: int, max_frames: int) -> ModelSpec:
    e, p = cfg["encoder"], cfg["pooler"]
    try:
        encoder = EncoderConfig(
            hidden=e["hidden"],
            depth=e["depth"],
            heads=e["heads"],
            ff_mult=e["ff_mult"],
            inner_dropout=e["inner_dropout"],
            modality_dropout=e["modality_dropout"],
            n_subjects=n_subjects,
            parcels=parcels,
            k_out=k_out,
            max_frames=max(e["max_frames"], max_frames),
            learned_null=e["learned_null"],
        )
        pooler = PoolerConfig(
            n_queries=p["n_queries"],
            heads=p["heads"],
            attention_dropout=p["attention_dropout"],
        )
        return ModelSpec(channels=channels, encoder=encoder, pooler_kind=p["kind"], pooler=pooler)
    except ValueError as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc


def build_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(
            peak_lr=t["peak_lr"],
            weight_decay=t["weight_decay"],
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            warmup_fraction=t["warmup_fraction"],
            clip_norm=t["clip_norm"],
            seed=cfg["seed"],
            precision=t["precision"],
            normalize_targets=t["normalize_targets"],
            modalities=tuple(cfg["modalities"]) if cfg["modalities"] else None,
        )
    except ValueError as exc:
        raise ConfigError(f"invalid train config: {exc}") from exc


def build_ridge_design(cfg: dict) -> RidgeDesign:
    r = cfg["ridge"]
    try:
        return RidgeDesign(
            lags=tuple(r["lags"]),
            projection_dim=r["projection_dim"],
            projection_seed=r["projection_seed"],
        )
    except ValueError as exc:
        raise ConfigError(f"invalid ridge config: {exc}") from exc
