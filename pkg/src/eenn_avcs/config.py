"""Experiment configuration: YAML/JSON file, defaults, and flag overrides."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .data import GENERATORS
from .errors import InvalidArgument

DEFAULTS = {
    "seed": 0,
    "dataset": {"generator": "wiggle", "params": {}, "seed": None, "external": None},
    "backbone": {
        "exits": 15,
        "hidden": 20,
        "epochs": 500,
        "lr": 1e-3,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "batch_size": None,
        "seed": None,
    },
    "bayes": {"prior_mean": "head", "tie": False, "n_std": 2.0},
    # parallel: None resolves to 10 for regression and 1 for classification
    "avcs": {"alpha": 0.05, "parallel": None, "multisample": None, "clip": None, "seed": None},
    "calibration": {"alpha": None, "seed": None},
    "ood": {"enabled": True, "n_test": 200, "margin": None},
    "output": "results",
    "threads": 1,
}

# keys that never change results and are left out of the config hash
NON_SEMANTIC = ("output", "threads")
OOD_MARGIN = {"wiggle": 3.0, "3clusters": 4.0}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key != "params":
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, overrides=None):
    """Read a config file (YAML or JSON), apply overrides and resolve defaults."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise InvalidArgument(f"config file not found: {p}")
        raw = yaml.safe_load(p.read_text()) or {}
        if not isinstance(raw, dict):
            raise InvalidArgument(f"config {p} must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    cfg = _merge(cfg, overrides or {})
    return resolve(cfg)


def is_classification(cfg):
    ext = cfg["dataset"].get("external")
    if ext:
        manifest = Path(ext.get("train", "")) / "manifest.json"
        if manifest.exists():
            return json.loads(manifest.read_text()).get("kind") == "logits"
        return ext.get("kind") == "logits"
    return cfg["dataset"]["generator"] == "blobs"


def resolve(cfg):
    cfg = copy.deepcopy(cfg)
    seed = int(cfg["seed"])
    for section in ("dataset", "backbone", "avcs", "calibration"):
        if cfg[section].get("seed") is None:
            cfg[section]["seed"] = seed
    avcs = cfg["avcs"]
    if avcs["parallel"] is None:
        avcs["parallel"] = 1 if is_classification(cfg) else 10
    if cfg["calibration"]["alpha"] is None:
        cfg["calibration"]["alpha"] = avcs["alpha"]
    if cfg["ood"]["margin"] is None:
        cfg["ood"]["margin"] = OOD_MARGIN.get(cfg["dataset"]["generator"], 3.0)
    validate(cfg)
    return cfg


def validate(cfg):
    alpha = cfg["avcs"]["alpha"]
    if not 0 < alpha < 1:
        raise InvalidArgument(f"avcs.alpha must lie in (0, 1), got {alpha}")
    if not 0 < cfg["calibration"]["alpha"] < 1:
        raise InvalidArgument("calibration.alpha must lie in (0, 1)")
    if int(cfg["avcs"]["parallel"]) < 1:
        raise InvalidArgument("avcs.parallel must be >= 1")
    ms = cfg["avcs"]["multisample"]
    if ms is not None and any(int(s) < 1 for s in ms):
        raise InvalidArgument("avcs.multisample entries must be >= 1")
    clip = cfg["avcs"]["clip"]
    if clip is not None and (len(clip) != 2 or clip[0] > clip[1]):
        raise InvalidArgument(f"avcs.clip must be [lo, hi] with lo <= hi, got {clip}")
    ext = cfg["dataset"].get("external")
    if not ext and cfg["dataset"]["generator"] not in GENERATORS:
        raise InvalidArgument(f"unknown generator {cfg['dataset']['generator']!r}; choose from {sorted(GENERATORS)}")
    if ext:
        for split in ("train", "test"):
            if split not in ext:
                raise InvalidArgument(f"dataset.external needs a {split!r} directory")
            if not Path(ext[split]).exists():
                raise InvalidArgument(f"external feature directory not found: {ext[split]}")


def config_hash(cfg):
    semantic = {k: v for k, v in cfg.items() if k not in NON_SEMANTIC}
    blob = json.dumps(semantic, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def parse_list(text, cast=float):
    """``"1,2,3"`` -> ``[1, 2, 3]``."""
    return [cast(v) for v in str(text).split(",") if v.strip()]
