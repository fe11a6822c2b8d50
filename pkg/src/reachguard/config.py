"""Run configuration: TOML file plus command-line overrides.

Layout (every key optional; defaults below, some depend on ``system``)::

    system = "double_integrator"   # double_integrator | di | dubins | bike | track
    seed = 0                       # master seed, split per job with SeedSequence.spawn
    gamma = 0.9999                 # grid solver discount, in [0, 1)

    [solver]   grid points, dt, tol, max_iters, controls, scheme
    [track]    path, segment_length, overlap, h_xy, n_v, n_phi, margin, tol, max_iters, reward_weights
    [critic]   rules, seeds, steps, hidden, batch_size, buffer_size, eval_every, prioritized
    [agent]    mode, safety, grid, epsilon, steps, seeds, eval_interval, eval_episodes, warmup,
               batch_size, buffer_size, hidden, lr, gamma, tau, alpha, safety_tau
"""

from __future__ import annotations

import copy
import math
from pathlib import Path

import tomli

SYSTEM_ALIASES = {"di": "double_integrator", "double_integrator": "double_integrator",
                  "dubins": "dubins", "bike": "bike", "track": "bike"}

DEFAULTS = {
    "system": "double_integrator",
    "seed": 0,
    "gamma": 0.9999,
    "solver": {"grid": [], "dt": 0.0, "tol": 1e-7, "max_iters": 30000, "controls": [], "scheme": ""},
    "track": {"path": "", "segment_length": 150.0, "overlap": 50.0, "h_xy": 0.75, "n_v": 5, "n_phi": 40,
              "margin": 5.0, "tol": 1e-4, "max_iters": 300, "reward_weights": [1000.0, 1.0]},
    "critic": {"rules": ["hj", "sqrl", "cql"], "seeds": 5, "steps": 0, "hidden": [], "batch_size": 64,
               "buffer_size": 10000, "eval_every": 1000, "prioritized": False},
    "agent": {"mode": "sage", "safety": "static", "grid": "", "epsilon": 3.0, "steps": 50000, "seeds": 1,
              "eval_interval": 5000, "eval_episodes": 1, "warmup": 2000, "batch_size": 256,
              "buffer_size": 250000, "hidden": [64, 64, 32], "lr": 0.003, "gamma": 0.99, "tau": 0.005,
              "alpha": 0.2, "safety_tau": 0.05},
}

# filled in when the user leaves the key at its empty/zero default (grid [] for the
# bike means the segmented track solve)
SYSTEM_DEFAULTS = {
    "double_integrator": {"solver": {"grid": [161, 161], "controls": [21], "scheme": "rk4", "dt": 0.05},
                          "critic": {"steps": 25000, "hidden": [16, 16]}},
    "dubins": {"solver": {"grid": [65, 65, 48], "controls": [5], "dt": 0.05, "scheme": "euler"},
               "critic": {"steps": 50000, "hidden": [64, 64, 32]}},
    "bike": {"solver": {"grid": [], "controls": [2, 3], "dt": 0.1, "scheme": "euler"}, "critic": {"steps": 50000, "hidden": [64, 64, 32]}},
}

FLAG_KEYS = {
    "seed": ("seed",), "gamma": ("gamma",), "system": ("system",),
    "epsilon": ("agent", "epsilon"), "safety": ("agent", "safety"), "mode": ("agent", "mode"),
    "eval_interval": ("agent", "eval_interval"), "agent_steps": ("agent", "steps"),
    "agent_seeds": ("agent", "seeds"), "rules": ("critic", "rules"), "critic_steps": ("critic", "steps"),
    "critic_seeds": ("critic", "seeds"), "track": ("track", "path"),
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, prefix: str = "") -> None:
    for key, val in over.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{name!r} must be a table")
            _merge(base[key], val, name + ".")
        else:
            if isinstance(val, dict):
                raise ConfigError(f"{name!r} is not a table")
            base[key] = val


def _check_range(name, value, lo, hi, lo_open=False, hi_open=False):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be numeric, got {value!r}") from None
    bad = (math.isnan(v) or v < lo or v > hi or (lo_open and v == lo) or (hi_open and v == hi))
    if bad:
        lb = "(" if lo_open else "["
        rb = ")" if hi_open else "]"
        raise ConfigError(f"{name} = {value!r} outside {lb}{lo}, {hi}{rb}")


def validate(cfg: dict) -> dict:
    if cfg["system"] not in SYSTEM_ALIASES:
        raise ConfigError(f"system = {cfg['system']!r} not one of {sorted(SYSTEM_ALIASES)}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed = {cfg['seed']!r} must be a non-negative integer")
    _check_range("gamma", cfg["gamma"], 0.0, 1.0, hi_open=True)
    a = cfg["agent"]
    _check_range("agent.gamma", a["gamma"], 0.0, 1.0, hi_open=True)
    _check_range("agent.tau", a["tau"], 0.0, 1.0, lo_open=True)
    _check_range("agent.safety_tau", a["safety_tau"], 0.0, 1.0, lo_open=True)
    _check_range("agent.epsilon", a["epsilon"], 0.0, math.inf)
    _check_range("agent.alpha", a["alpha"], 0.0, math.inf)
    _check_range("agent.lr", a["lr"], 0.0, math.inf, lo_open=True)
    if a["mode"] not in ("sage", "safesac", "sac", "random", "saferandom"):
        raise ConfigError(f"agent.mode = {a['mode']!r} is not a known mode")
    if a["safety"] not in ("static", "neural"):
        raise ConfigError(f"agent.safety = {a['safety']!r} must be 'static' or 'neural'")
    for k in ("steps", "eval_interval", "eval_episodes", "batch_size", "buffer_size", "seeds"):
        if not isinstance(a[k], int) or a[k] <= 0:
            raise ConfigError(f"agent.{k} = {a[k]!r} must be a positive integer")
    c = cfg["critic"]
    bad = [r for r in c["rules"] if r not in ("hj", "sqrl", "cql")]
    if bad or not c["rules"]:
        raise ConfigError(f"critic.rules = {c['rules']!r} must be a non-empty subset of hj, sqrl, cql")
    for k in ("seeds", "batch_size", "buffer_size", "eval_every"):
        if not isinstance(c[k], int) or c[k] <= 0:
            raise ConfigError(f"critic.{k} = {c[k]!r} must be a positive integer")
    w = cfg["track"]["reward_weights"]
    if len(w) != 2 or any(not isinstance(v, (int, float)) or v < 0 for v in w):
        raise ConfigError(f"track.reward_weights = {w!r} must be two non-negative numbers")
    s = cfg["solver"]
    _check_range("solver.dt", s["dt"], 0.0, math.inf, lo_open=True)
    _check_range("solver.tol", s["tol"], 0.0, math.inf, lo_open=True)
    if s["scheme"] not in ("euler", "rk4"):
        raise ConfigError(f"solver.scheme = {s['scheme']!r} must be 'euler' or 'rk4'")
    return cfg


def parse_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the TOML file, then flag overrides; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        _merge(cfg, data)
    for flag, value in (overrides or {}).items():
        if value is None:
            continue
        keys = FLAG_KEYS.get(flag)
        if keys is None:
            raise ConfigError(f"unknown override {flag!r}")
        node = cfg
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    if cfg["system"] in SYSTEM_ALIASES:
        sysname = SYSTEM_ALIASES[cfg["system"]]
        for section, vals in SYSTEM_DEFAULTS[sysname].items():
            for k, v in vals.items():
                if cfg[section][k] in ([], 0, ""):
                    cfg[section][k] = v
    return validate(cfg)


def system_name(cfg: dict) -> str:
    return SYSTEM_ALIASES[cfg["system"]]


def dumps_toml(cfg: dict) -> str:
    """Minimal TOML writer for the resolved config (scalars, lists, one table level)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = [f"{k} = {fmt(v)}" for k, v in cfg.items() if not isinstance(v, dict)]
    for k, v in cfg.items():
        if isinstance(v, dict):
            lines.append(f"\n[{k}]")
            lines.extend(f"{kk} = {fmt(vv)}" for kk, vv in v.items())
    return "\n".join(lines) + "\n"


def load_resolved(path: Path) -> dict:
    return parse_config(path)
