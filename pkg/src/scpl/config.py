"""Run configuration: file loading, dotted-key overrides and object builders.

Config files are TOML (or JSON) with up to four tables:

``[data]``   dataset source (``generator`` = blobs | images | csv | idx | npz)
``[model]``  network template keys
``[train]``  trainer keys
``[bench]``  ``workers``, ``inflation_ms``, ``repeats``

Workload files for ``simulate`` are flat: ``strategy``, ``micro_batches``,
``comm_cost`` and a ``[[layers]]`` array.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from importlib import resources
from pathlib import Path

from .data import Dataset, gen_blobs, gen_images, load_csv, load_dataset, load_idx
from .network import NetworkTemplate
from .schedule import parse_toml
from .trainers import ConfigError, TrainConfig

DATA_KEYS = {
    "generator": "blobs", "classes": 3, "dim": 16, "per_class": 300, "spread": 1.0, "seed": 0,
    "channels": 3, "size": 8, "noise": 0.1, "path": None, "label_column": "label",
    "images": None, "labels": None, "test_fraction": 1 / 3,
}
BENCH_KEYS = {"workers": [1, 2, 4], "inflation_ms": 5.0, "repeats": 3}
WORKLOAD_KEYS = ("strategy", "micro_batches", "comm_cost", "layers")

SCHEMA = {
    "data": set(DATA_KEYS),
    "model": {f.name for f in dataclasses.fields(NetworkTemplate)},
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
    "bench": set(BENCH_KEYS),
    "": set(WORKLOAD_KEYS),
}


def resolve_path(name) -> Path:
    """A filesystem path, or the stem of a config shipped with the package."""
    p = Path(name)
    if p.exists():
        return p
    shipped = resources.files("scpl") / "configs" / f"{p.stem}.toml"
    if p.suffix in ("", ".toml") and shipped.is_file():
        return Path(str(shipped))
    raise ConfigError(f"config file not found: {name}")


def load_config(path) -> dict:
    path = resolve_path(path)
    text = path.read_text()
    try:
        doc = json.loads(text) if path.suffix == ".json" else parse_toml(text)
    except ValueError as e:  # TOMLDecodeError and JSONDecodeError are both ValueErrors
        raise ConfigError(f"cannot parse {path}: {e}") from e
    for section, value in doc.items():
        if isinstance(value, dict):
            unknown = set(value) - SCHEMA.get(section, set())
            if section not in SCHEMA or unknown:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown) or section}")
        elif section not in SCHEMA[""]:
            raise ConfigError(f"unknown top-level key {section!r}")
    return doc


def _parse_value(text: str):
    try:
        return parse_toml(f"v = {text}")["v"]
    except ValueError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key=value`` pairs; bare keys must name exactly one known section."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key = key.strip()
        if "." in key:
            section, _, name = key.partition(".")
            if name not in SCHEMA.get(section, ()):
                raise ConfigError(f"unknown config key {key!r}")
        else:
            name = key
            owners = [s for s, keys in SCHEMA.items() if name in keys]
            present = [s for s in owners if (s == "" and name in doc) or isinstance(doc.get(s), dict)]
            if len(owners) == 1:
                section = owners[0]
            elif len(present) == 1:
                section = present[0]
            elif not owners:
                raise ConfigError(f"unknown config key {key!r}")
            else:
                raise ConfigError(f"ambiguous key {key!r}; use one of "
                                  + ", ".join(f"{s}.{key}" for s in owners if s))
        value = _parse_value(raw.strip())
        if section:
            doc.setdefault(section, {})[name] = value
        else:
            doc[name] = value
    return doc


def build_dataset(section: dict) -> Dataset:
    d = dict(DATA_KEYS, **section)
    gen = d["generator"]
    try:
        if gen == "blobs":
            return gen_blobs(int(d["classes"]), int(d["dim"]), int(d["per_class"]), float(d["spread"]), d["seed"])
        if gen == "images":
            return gen_images(int(d["classes"]), int(d["channels"]), int(d["size"]), int(d["per_class"]),
                              float(d["noise"]), d["seed"])
        if gen == "csv":
            return load_csv(_need(d, "path"), d["label_column"], d["test_fraction"], d["seed"])
        if gen == "idx":
            return load_idx(_need(d, "images"), _need(d, "labels"), d["test_fraction"], d["seed"])
        if gen == "npz":
            return load_dataset(_need(d, "path"))
    except (TypeError, ValueError, OSError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid data parameters: {e}") from e
    raise ConfigError(f"unknown data generator {gen!r}")


def _need(d: dict, key: str):
    if not d.get(key):
        raise ConfigError(f"data.{key} is required for generator {d['generator']!r}")
    return d[key]


def build_template(section: dict, ds: Dataset) -> NetworkTemplate:
    """Template from ``[model]``, checked against the dataset's shape and class count."""
    try:
        t = NetworkTemplate.from_dict(section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model: {e}") from e
    if t.input_shape != ds.feature_shape:
        raise ConfigError(f"model input shape {t.input_shape} != data shape {ds.feature_shape}")
    if t.num_classes != ds.num_classes:
        raise ConfigError(f"model has {t.num_classes} outputs but data has {ds.num_classes} classes")
    return t


def build_train_config(section: dict) -> TrainConfig:
    try:
        return TrainConfig(**section).validate()
    except TypeError as e:
        raise ConfigError(f"invalid train section: {e}") from e
