"""TOML configuration with built-in defaults; CLI flags override file values."""

from __future__ import annotations

import copy
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS: dict[str, dict] = {
    "paths": {
        "workdir": "lookalike_data",
        "universe": "universe.jsonl",
        "word_vectors": "word_vectors.txt",
        "schema": "schema.json",
        "model": "model.lkem",
        "embeddings": "embeddings.lkev",
        "index": "index.lkix",
        "result": "expansion.json",
    },
    "data": {
        "customers": 10_000,
        "categories": 20,
        "archetypes": 8,
        "days": "0:365",
        "location_informative": True,
        "word_vector_dim": 32,
    },
    "similarity": {
        "metric": "cosine",
        "channel": "transaction",
        "train_window": "0:273",
        "eval_window": "273:365",
    },
    "train": {
        "location": True,
        "hidden_dims": [256, 128],
        "embedding_dim": 128,
        "learning_rate": 1e-3,
        "batch_size": 256,
        "epochs": 10,
        "pairs": 50_000,
        "eval_pairs": 10_000,
    },
    "index": {
        # 0 selects ceil(sqrt(n)) capped at 4096, and nlist // 8 respectively.
        "nlist": 0,
        "nprobe": 0,
        "kmeans_iters": 25,
    },
    "expand": {
        "output_size": 1000,
        # 0 means "same as output_size".
        "k_per_seed": 0,
        "default_seed_count": 10,
        "exclude_seeds": True,
        "format": "json",
    },
    "evaluate": {
        "seeds": [1, 2, 3],
    },
}


class ConfigError(ValueError):
    pass


def load_config(path: str | Path | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path}: {exc}") from None
    for section, values in user.items():
        if section not in cfg or not isinstance(values, dict):
            raise ConfigError(f"config {path}: unknown section [{section}]")
        for key, value in values.items():
            if key not in cfg[section]:
                raise ConfigError(f"config {path}: unknown key {section}.{key}")
            cfg[section][key] = value
    return cfg


def resolve_path(cfg: dict, key: str) -> Path:
    p = Path(cfg["paths"][key])
    return p if p.is_absolute() else Path(cfg["paths"]["workdir"]) / p


def format_defaults() -> str:
    """The defaults rendered as a TOML document."""
    lines = []
    for section, values in DEFAULTS.items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)
