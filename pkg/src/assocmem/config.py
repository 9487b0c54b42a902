"""Experiment configuration: TOML (or a JSON run manifest) validated against a fixed schema.

Schema (all tables optional except where a command needs them)::

    experiment = "demo"          # free-form id
    seed = 0
    output = "out/demo"          # default: $ASSOCMEM_OUT or ./out, plus the experiment id

    [embeddings]
    kind = "orthonormal"         # orthonormal | correlated-pair | sphere
    d = 4                        # dimension (default: max(N, M) / 2 for correlated-pair)
    alpha = 0.95                 # correlated-pair only
    input_scale = 1.0            # orthonormal only
    output_scale = 1.0

    [task]
    N = 4
    M = 2
    f_star = [0, 1, 0, 1]        # 0-based classes, or "identity" / "alternate"
    p = "uniform"                # list of floats, or preset "uniform" | "zipf" | "pair"
    p1 = 0.75                    # preset "pair" only (N = 2)

    [dynamics]
    kind = "GD"                  # GF | GD | SGD | SGF
    eta = 1.0                    # float or per-step list
    t_end = 100
    batch_size = 1
    sigma = 0.0
    h = 0.01
    record_every = 1
    gamma = "canonical"          # optional: canonical | theory
    sharpness = false
    init = "zero"                # zero | normal
    init_scale = 1.0

    [landscape]
    gamma1_range = [-10.0, 10.0]
    gamma2_range = [-10.0, 10.0]
    resolution = 512
    basis = "canonical"
    sharpness = false

    [phase]
    etas = [0.01, 0.1, 1.0, 10.0]
    axis = "alpha"               # alpha | log_ratio
    values = [-0.5, 0.0, 0.5, 0.9]
    p1 = 0.75
    alpha = 0.5
    cap = 1000000

    [closed_form]
    c = [0.5, 1.0, 2.0]
    m0 = [0.0, 0.0, 1.0]
    t_end = 1000.0
    points = 200
"""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml

from .model import (EmbeddingSet, TaskSpec, correlated_pair_embeddings, orthonormal_embeddings,
                    sphere_embeddings)

__all__ = ["ConfigError", "SCHEMA", "load_config", "parse_config", "build_embeddings", "build_task",
           "default_output_dir", "OUTPUT_ENV"]

OUTPUT_ENV = "ASSOCMEM_OUT"

_num = (int, float)
_num_or_list = (int, float, list)

SCHEMA: dict[str, Any] = {
    "experiment": str,
    "seed": int,
    "output": str,
    "embeddings": {
        "kind": str, "d": int, "alpha": _num, "input_scale": _num, "output_scale": _num,
    },
    "task": {
        "N": int, "M": int, "f_star": (list, str), "p": (list, str), "p1": _num,
    },
    "dynamics": {
        "kind": str, "eta": _num_or_list, "t_end": _num, "batch_size": int, "sigma": _num_or_list,
        "h": _num, "record_every": _num, "gamma": str, "sharpness": bool, "init": str,
        "init_scale": _num,
    },
    "landscape": {
        "gamma1_range": list, "gamma2_range": list, "resolution": int, "basis": str, "sharpness": bool,
    },
    "phase": {
        "etas": list, "axis": str, "values": list, "p1": _num, "alpha": _num, "cap": int,
    },
    "closed_form": {
        "c": _num_or_list, "m0": _num_or_list, "t_end": _num, "points": int,
    },
}

_CHOICES = {
    ("embeddings", "kind"): ("orthonormal", "correlated-pair", "sphere"),
    ("dynamics", "kind"): ("GF", "GD", "SGD", "SGF"),
    ("dynamics", "gamma"): ("canonical", "theory"),
    ("dynamics", "init"): ("zero", "normal"),
    ("landscape", "basis"): ("canonical", "theory"),
    ("phase", "axis"): ("alpha", "log_ratio"),
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "out"))


def load_config(path) -> dict:
    """Read a TOML config or a JSON run manifest (its ``config`` entry) and validate it."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if "config" in raw and "version" in raw:
            raw = raw["config"]
    else:
        try:
            raw = _toml.loads(text)
        except _toml.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(raw)


def parse_config(raw: dict) -> dict:
    """Validate ``raw`` against :data:`SCHEMA`; returns a deep copy with defaults filled in."""
    cfg = copy.deepcopy(raw)
    _validate(cfg, SCHEMA, "")
    cfg.setdefault("experiment", "run")
    cfg.setdefault("seed", 0)
    if "task" in cfg:
        _validate_task(cfg)
    return cfg


def _validate(obj: dict, schema: dict, prefix: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a table")
    for key, value in obj.items():
        name = prefix + key
        if key not in schema:
            raise ConfigError(f"unknown key '{name}'")
        expected = schema[key]
        if isinstance(expected, dict):
            _validate(value, expected, name + ".")
            continue
        if isinstance(value, bool) and expected is not bool and bool not in _as_tuple(expected):
            raise ConfigError(f"key '{name}': expected {_names(expected)}, got bool")
        if not isinstance(value, expected):
            raise ConfigError(f"key '{name}': expected {_names(expected)}, got {type(value).__name__}")
        section = prefix.rstrip(".")
        choices = _CHOICES.get((section, key))
        if choices and value not in choices:
            raise ConfigError(f"key '{name}': must be one of {choices}, got {value!r}")


def _as_tuple(t):
    return t if isinstance(t, tuple) else (t,)


def _names(t) -> str:
    return " or ".join(x.__name__ for x in _as_tuple(t))


def _validate_task(cfg: dict) -> None:
    t = cfg["task"]
    for key in ("N", "M"):
        if key not in t:
            raise ConfigError(f"missing key 'task.{key}'")
    try:
        build_task(cfg)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from exc


def build_task(cfg: dict) -> TaskSpec:
    t = cfg["task"]
    N, M = t["N"], t["M"]
    f = t.get("f_star", "identity")
    if f == "identity":
        if M < N:
            raise ConfigError("key 'task.f_star': identity needs M >= N")
        f = list(range(N))
    elif f == "alternate":
        f = [x % M for x in range(N)]
    elif isinstance(f, str):
        raise ConfigError(f"key 'task.f_star': unknown preset {f!r}")
    if len(f) != N:
        raise ConfigError(f"key 'task.f_star': expected {N} entries, got {len(f)}")
    if any((not isinstance(v, int)) or v < 0 or v >= M for v in f):
        raise ConfigError("key 'task.f_star': entries must be class indices in [0, M)")
    p = t.get("p", "uniform")
    if p == "uniform":
        p = np.full(N, 1.0 / N)
    elif p == "zipf":
        p = 1.0 / np.arange(1, N + 1)
        p = p / p.sum()
    elif p == "pair":
        if N != 2 or "p1" not in t:
            raise ConfigError("key 'task.p': preset 'pair' needs N = 2 and task.p1")
        p = np.array([t["p1"], 1.0 - t["p1"]])
    elif isinstance(p, str):
        raise ConfigError(f"key 'task.p': unknown preset {p!r}")
    else:
        p = np.asarray(p, dtype=float)
        if p.shape != (N,):
            raise ConfigError(f"key 'task.p': expected {N} entries")
        if np.any(p < 0):
            raise ConfigError("key 'task.p': entries must be non-negative")
        p = p / p.sum()
    return TaskSpec(np.asarray(f), p)


def build_embeddings(cfg: dict) -> EmbeddingSet:
    from .dynamics import make_rng

    e = cfg.get("embeddings", {})
    t = cfg["task"]
    N, M = t["N"], t["M"]
    kind = e.get("kind", "orthonormal")
    try:
        if kind == "orthonormal":
            emb = orthonormal_embeddings(N, M, e.get("d"), float(e.get("input_scale", 1.0)),
                                         float(e.get("output_scale", 1.0)))
        elif kind == "correlated-pair":
            if N != 2:
                raise ConfigError("key 'embeddings.kind': correlated-pair needs task.N = 2")
            if "alpha" not in e:
                raise ConfigError("missing key 'embeddings.alpha'")
            emb = correlated_pair_embeddings(float(e["alpha"]), e.get("d", max(2, M)), M,
                                             float(e.get("output_scale", 1.0)))
        else:
            if "d" not in e:
                raise ConfigError("missing key 'embeddings.d'")
            emb = sphere_embeddings(N, M, e["d"], make_rng(cfg.get("seed", 0), 0))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"embeddings: {exc}") from exc
    return emb
