"""Experiment configuration: one JSON document plus ``key=value`` overrides."""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path

DEFAULT_CONFIG = {
    "seed": 0,
    "n": 5,
    "domain": {
        "type": "cliff_walk",
        "width": 12,
        "height": 4,
        "slip_probability": 0.05,
        "step_reward": -0.08,
        "cliff_reward": -1.0,
        "goal_reward": 0.0,
        "discount": 1.0,
        "path": None,
    },
    "policy": "safe",
    "policy_path": None,
    "learn": {
        "episodes": 30000,
        "base_step_size": 0.1,
        "step_sizes": None,
        "trace_decays": None,
        "step_decay": 5000.0,
        "snapshot_every": 1000,
        "start": "uniform",
        "max_steps": 10000,
        "literal_trace": False,
    },
    "utility": {
        "functions": ["identity", "exp_neg", "square"],
        "center": "mean",
        "order": 5,
    },
    "oracle": {
        "rollouts": 100000,
        "max_steps": 10000,
        "seed": None,
    },
    "compare": {
        "policies": ["safe", "risky"],
        "function": "exp_neg",
        "episodes": 10000,
        "step_decay": 2000.0,
        "start": "start",
        "oracle_rollouts": 0,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, prefix: str = "") -> None:
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, prefix + key + ".")
        else:
            base[key] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_set(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects KEY=VALUE, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = config
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(text)


def load_config(path=None, sets=(), seed=None, literal_trace=False) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        _merge(config, doc)
    for s in sets:
        apply_set(config, s)
    if seed is not None:
        config["seed"] = seed
    if literal_trace:
        config["learn"]["literal_trace"] = True
    if config["oracle"]["seed"] is None:
        config["oracle"]["seed"] = config["seed"]
    validate(config)
    return config


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def validate(config: dict) -> None:
    _require(_is_int(config["seed"]) and 0 <= config["seed"] < 2**64, "seed must be an unsigned 64-bit integer")
    n = config["n"]
    _require(_is_int(n) and 1 <= n <= 20, "n must be an integer in 1..20")

    dom = config["domain"]
    _require(dom["type"] in ("cliff_walk", "file"), "domain.type must be 'cliff_walk' or 'file'")
    if dom["type"] == "file":
        _require(isinstance(dom["path"], str) and os.path.isfile(dom["path"]), f"MDP file {dom['path']!r} not found")
    else:
        _require(_is_int(dom["width"]) and dom["width"] >= 3, "domain.width must be an integer >= 3")
        _require(_is_int(dom["height"]) and dom["height"] >= 2, "domain.height must be an integer >= 2")
        _require(0 <= dom["slip_probability"] < 1, "domain.slip_probability must lie in [0, 1)")
        _require(0 <= dom["discount"] <= 1, "domain.discount must lie in [0, 1]")

    pol = config["policy"]
    _require(pol in ("safe", "risky", "file"), "policy must be 'safe', 'risky' or 'file'")
    if pol == "file":
        p = config["policy_path"]
        _require(isinstance(p, str) and os.path.isfile(p), f"policy file {p!r} not found")
    _require(
        dom["type"] == "cliff_walk" or pol == "file",
        "safe/risky policies exist only for the cliff walk domain",
    )

    learn = config["learn"]
    _require(_is_int(learn["episodes"]) and learn["episodes"] >= 0, "learn.episodes must be a nonnegative integer")
    _require(0 < learn["base_step_size"] < 1, "learn.base_step_size must lie in (0, 1)")
    for key, lo, hi, open_lo in (("step_sizes", 0, 1, True), ("trace_decays", 0, 1, False)):
        vals = learn[key]
        if vals is not None:
            _require(isinstance(vals, list) and len(vals) == n, f"learn.{key} needs {n} entries")
            ok = all((lo < v if open_lo else lo <= v) and (v < hi if open_lo else v <= hi) for v in vals)
            _require(ok, f"learn.{key} entries out of range")
    _require(learn["step_decay"] is None or learn["step_decay"] > 0, "learn.step_decay must be positive or null")
    _require(_is_int(learn["snapshot_every"]) and learn["snapshot_every"] >= 1, "learn.snapshot_every must be >= 1")
    _require(learn["start"] in ("start", "uniform"), "learn.start must be 'start' or 'uniform'")
    _require(_is_int(learn["max_steps"]) and learn["max_steps"] >= 1, "learn.max_steps must be >= 1")

    util = config["utility"]
    _require(isinstance(util["functions"], list) and util["functions"], "utility.functions must be a non-empty list")
    _require(util["center"] in ("mean", "origin"), "utility.center must be 'mean' or 'origin'")
    _require(_is_int(util["order"]) and 0 <= util["order"] <= n, f"utility.order must lie in 0..{n}")

    orc = config["oracle"]
    _require(_is_int(orc["rollouts"]) and orc["rollouts"] >= 1, "oracle.rollouts must be >= 1")
    _require(_is_int(orc["max_steps"]) and orc["max_steps"] >= 1, "oracle.max_steps must be >= 1")
    _require(_is_int(orc["seed"]) and orc["seed"] >= 0, "oracle.seed must be a nonnegative integer")

    cmp_ = config["compare"]
    _require(
        isinstance(cmp_["policies"], list) and len(cmp_["policies"]) == 2
        and all(p in ("safe", "risky") for p in cmp_["policies"]),
        "compare.policies must name two of 'safe', 'risky'",
    )
    _require(_is_int(cmp_["episodes"]) and cmp_["episodes"] >= 0, "compare.episodes must be >= 0")
    _require(cmp_["step_decay"] is None or cmp_["step_decay"] > 0, "compare.step_decay must be positive or null")
    _require(cmp_["start"] in ("start", "uniform"), "compare.start must be 'start' or 'uniform'")
    _require(_is_int(cmp_["oracle_rollouts"]) and cmp_["oracle_rollouts"] >= 0, "compare.oracle_rollouts must be >= 0")


def dump(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
