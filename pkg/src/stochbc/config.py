"""Flat dotted-key configuration with a strict schema.

Files are TOML; ``[noise]\\nn_modes = 8`` and ``noise.n_modes = 8`` are the
same key.  The resolved configuration is a flat ``{dotted_key: value}`` dict.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid, unknown or inconsistent configuration keys."""


def _intlist(v):
    if not isinstance(v, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
        raise TypeError("expected a list of integers")
    return list(v)


def _step(v):
    if isinstance(v, str):
        if v not in ("auto", "fixed_point"):
            raise TypeError('expected "auto", "fixed_point" or a number')
        return v
    return float(v)


def _num(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    return float(v)


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected an integer")
    return int(v)


def _str(v):
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


SCHEMA: dict = {
    "problem.T": (_num, 1.0),
    "problem.J": (_int, 16),
    "problem.mesh_n": (_int, 8),
    "problem.yd": (_str, "sinpit_xy"),
    "control.nu": (_num, 1.0),
    "control.lower": (_num, -0.5),
    "control.upper": (_num, 0.5),
    "control.step": (_step, "auto"),
    "control.tol": (_num, 1e-8),
    "control.max_iter": (_int, 300),
    "noise.n_modes": (_int, 8),
    "noise.lambda_exponent": (_num, 2.0),
    "noise.mu": (_num, 1.0),
    "noise.seed": (_int, 20210509),
    "noise.samples": (_int, 1000),
    "tree.m": (_int, 2),
    "tree.budget": (_int, 1_000_000),
    "ce.kind": (_str, "lsmc"),
    "ce.features": (_str, "brownian"),
    "ce.degree": (_int, 1),
    "ce.modes": (_int, 4),
    "ce.ridge": (_num, 1e-10),
    "study.h_levels": (_intlist, [4, 8, 16]),
    "study.h_ref": (_int, 64),
    "study.h_J": (_int, 16),
    "study.h_target": (_num, 0.4),
    "study.tau_levels": (_intlist, [8, 16, 32, 64]),
    "study.tau_ref": (_int, 512),
    "study.tau_mesh_n": (_int, 8),
    "study.tau_target": (_num, 0.2),
    "duality.pairs": (_int, 20),
    "duality.mesh_n": (_intlist, [1, 2, 4]),
    "duality.J": (_intlist, [1, 4, 16]),
    "duality.tol": (_num, 1e-10),
    "tree_vs_mc.mesh_n": (_int, 1),
    "tree_vs_mc.J": (_int, 3),
    "tree_vs_mc.n_modes": (_int, 1),
    "tree_vs_mc.samples": (_intlist, [1000, 10000]),
}


def defaults() -> dict:
    return {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in SCHEMA.items()}


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def resolve(raw: dict, strict: bool = True) -> dict:
    """Merge user values over defaults, coercing types and validating ranges."""
    flat = _flatten(raw)
    cfg = defaults()
    unknown = sorted(set(flat) - set(SCHEMA))
    if unknown:
        if strict:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        logger.warning("ignoring unknown configuration keys: %s", ", ".join(unknown))
    for key in set(flat) & set(SCHEMA):
        conv, _ = SCHEMA[key]
        try:
            cfg[key] = conv(flat[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc} (got {flat[key]!r})") from None
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if not cfg["control.lower"] < cfg["control.upper"]:
        raise ConfigError(
            f"infeasible bounds: control.lower = {cfg['control.lower']} must be below "
            f"control.upper = {cfg['control.upper']}"
        )
    positive = ["problem.T", "control.nu", "control.tol"]
    for key in positive:
        if not cfg[key] > 0:
            raise ConfigError(f"{key} must be positive, got {cfg[key]}")
    at_least_one = ["problem.J", "problem.mesh_n", "noise.n_modes", "noise.samples", "control.max_iter",
                    "study.h_ref", "study.h_J", "study.tau_ref", "study.tau_mesh_n", "duality.pairs",
                    "tree_vs_mc.mesh_n", "tree_vs_mc.J", "tree_vs_mc.n_modes", "ce.modes"]
    for key in at_least_one:
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be at least 1, got {cfg[key]}")
    if cfg["ce.kind"] not in ("lsmc", "tree", "mean"):
        raise ConfigError(f"ce.kind must be lsmc, tree or mean, got {cfg['ce.kind']!r}")
    if cfg["ce.features"] not in ("brownian", "increments", "history"):
        raise ConfigError(f"ce.features must be brownian, increments or history, got {cfg['ce.features']!r}")
    if cfg["tree.m"] not in (2, 3):
        raise ConfigError(f"tree.m must be 2 or 3, got {cfg['tree.m']}")
    if cfg["ce.ridge"] < 0:
        raise ConfigError("ce.ridge must be non-negative")
    if isinstance(cfg["control.step"], float) and not 0 < cfg["control.step"] <= 1 / cfg["control.nu"]:
        raise ConfigError("control.step must lie in (0, 1/control.nu]")
    if max(cfg["study.h_levels"], default=0) >= cfg["study.h_ref"]:
        raise ConfigError("study.h_ref must be finer than every entry of study.h_levels")
    if max(cfg["study.tau_levels"], default=0) >= cfg["study.tau_ref"]:
        raise ConfigError("study.tau_ref must be finer than every entry of study.tau_levels")
    for lv in cfg["study.h_levels"]:
        if cfg["study.h_ref"] % lv:
            raise ConfigError(f"study.h_ref = {cfg['study.h_ref']} is not a refinement of mesh level {lv}")
    for lv in cfg["study.tau_levels"]:
        if cfg["study.tau_ref"] % lv:
            raise ConfigError(f"study.tau_ref = {cfg['study.tau_ref']} is not a multiple of {lv}")


def load(path, strict: bool = True) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    with open(p, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    return resolve(raw, strict=strict)


def dumps(cfg: dict) -> str:
    """Serialize a resolved config as sectioned TOML."""
    nested: dict = {}
    for key in sorted(cfg):
        section, name = key.split(".", 1)
        nested.setdefault(section, {})[name] = cfg[key]
    return tomli_w.dumps(nested)


def loads(text: str, strict: bool = True) -> dict:
    return resolve(tomllib.loads(text), strict=strict)
