"""YAML configuration files, bundled presets and config hashing.

A config file has the sections ``mmap`` (``C0``, ``C_N``, ``C_H``),
``service_h`` and ``service_n`` (``beta``, ``A``), ``retrial`` (``gamma``,
``Gamma``, ``exit_leave``, ``exit_retry``), ``system`` (``S``,
``row_sum_tol``, ``renormalize`` and a ``truncation`` mapping with ``M``,
``eps``, ``m_cap``) and an optional ``targets`` mapping of fundamental rates
(``lambda_h``, ``lambda_n``, ``mu_h``, ``mu_n``, ``theta``) that the loaded
matrices are rescaled to hit.
"""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import (GENERATOR_TOL, TARGET_KEYS, MarkedMAP, ModelConfig, PhaseType,
                    RetrialPH, TruncationPolicy, with_targets)

TABLE_LAMBDA_N = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
_SHORTHAND = {
    "S": ("system", "S"),
    "M": ("system", "truncation", "M"),
    "eps": ("system", "truncation", "eps"),
    "m_cap": ("system", "truncation", "m_cap"),
    **{k: ("targets", k) for k in TARGET_KEYS},
}


def _preset_text(name: str) -> str:
    return resources.files("retrialq.presets").joinpath(f"{name}.yaml").read_text()


def preset_names() -> list[str]:
    return ["baseline"] + [f"table-ln{x}" for x in TABLE_LAMBDA_N]


def preset_dict(name: str) -> dict:
    """Raw config mapping of a bundled preset.

    ``table-ln<x>`` is the ``baseline`` base with ``lambda_n = x``,
    ``mu_n = 1`` and ``mu_h = 0.5``; the handoff rate and ``S`` are the
    optimisation variables and are left at the base values.
    """
    if name == "baseline":
        return yaml.safe_load(_preset_text("baseline"))
    if name.startswith("table-ln"):
        try:
            ln = float(name[len("table-ln"):])
        except ValueError:
            ln = None
        if ln in TABLE_LAMBDA_N:
            raw = preset_dict("baseline")
            raw["targets"] = {"lambda_n": ln, "mu_n": 1.0, "mu_h": 0.5}
            return raw
    raise ConfigError(f"unknown preset {name!r}; known: {', '.join(preset_names())}")


def _get(raw, key):
    try:
        return raw[key]
    except (KeyError, TypeError):
        raise ConfigError(f"config is missing required key {key!r}") from None


def from_dict(raw: dict) -> ModelConfig:
    """Build a :class:`ModelConfig` from a parsed mapping."""
    raw = copy.deepcopy(raw)
    m, sh, sn, rt = (_get(raw, k) for k in ("mmap", "service_h", "service_n", "retrial"))
    system = raw.get("system") or {}
    trunc = system.get("truncation") or {}
    try:
        mmap = MarkedMAP(_get(m, "C0"), _get(m, "C_N"), _get(m, "C_H"))
        if system.get("renormalize", False):
            mmap = mmap.renormalized()
        cfg = ModelConfig(
            mmap=mmap,
            service_h=PhaseType(_get(sh, "beta"), _get(sh, "A")),
            service_n=PhaseType(_get(sn, "beta"), _get(sn, "A")),
            retrial=RetrialPH(_get(rt, "gamma"), _get(rt, "Gamma"),
                              _get(rt, "exit_leave"), _get(rt, "exit_retry")),
            S=int(_get(system, "S")),
            truncation=TruncationPolicy(
                M=None if trunc.get("M") is None else int(trunc["M"]),
                eps=float(trunc.get("eps", 1e-5)),
                m_cap=int(trunc.get("m_cap", 60))),
            row_sum_tol=float(system.get("row_sum_tol", GENERATOR_TOL)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed config: {exc}") from exc
    targets = raw.get("targets") or {}
    unknown = set(targets) - set(TARGET_KEYS)
    if unknown:
        raise ConfigError(f"unknown target keys {sorted(unknown)}")
    if targets:
        cfg = with_targets(cfg, **{k: float(v) for k, v in targets.items()})
    return cfg


def to_dict(cfg: ModelConfig) -> dict:
    """Resolved mapping; reloading it gives an identical config."""
    t = cfg.truncation
    return {
        "mmap": {"C0": cfg.mmap.C0.tolist(), "C_N": cfg.mmap.C_N.tolist(),
                 "C_H": cfg.mmap.C_H.tolist()},
        "service_h": {"beta": cfg.service_h.beta.tolist(), "A": cfg.service_h.A.tolist()},
        "service_n": {"beta": cfg.service_n.beta.tolist(), "A": cfg.service_n.A.tolist()},
        "retrial": {"gamma": cfg.retrial.gamma.tolist(), "Gamma": cfg.retrial.Gamma.tolist(),
                    "exit_leave": cfg.retrial.exit_leave.tolist(),
                    "exit_retry": cfg.retrial.exit_retry.tolist()},
        "system": {"S": int(cfg.S), "row_sum_tol": float(cfg.row_sum_tol), "renormalize": False,
                   "truncation": {"M": t.M, "eps": float(t.eps), "m_cap": int(t.m_cap)}},
    }


def dump_yaml(cfg: ModelConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)


def config_hash(cfg: ModelConfig) -> str:
    """SHA-256 of the canonical JSON form of the resolved config."""
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def apply_overrides(raw: dict, overrides: list[str] | None) -> dict:
    """Apply ``key=value`` overrides; values are parsed as YAML scalars or lists.

    Keys are dotted paths (``system.truncation.eps``) or the shorthands
    ``S``, ``M``, ``eps``, ``m_cap`` and the rate targets.
    """
    raw = copy.deepcopy(raw)
    for item in overrides or []:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path = _SHORTHAND.get(key.strip(), tuple(key.strip().split(".")))
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {text!r}: {exc}") from exc
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a non-mapping value")
        node[path[-1]] = value
    return raw


def load_raw(path: str | Path | None = None, preset: str | None = None) -> dict:
    if (path is None) == (preset is None):
        raise ConfigError("give exactly one of a config path or a preset name")
    if preset is not None:
        return preset_dict(preset)
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return raw


def load_config(path=None, preset=None, overrides=None) -> ModelConfig:
    return from_dict(apply_overrides(load_raw(path, preset), overrides))


def baseline(**targets) -> ModelConfig:
    """The bundled numerical-illustration config, optionally retargeted."""
    cfg = from_dict(preset_dict("baseline"))
    return with_targets(cfg, **targets) if targets else cfg


def configs_equal(a: ModelConfig, b: ModelConfig) -> bool:
    da, db = to_dict(a), to_dict(b)
    return json.dumps(da, sort_keys=True) == json.dumps(db, sort_keys=True)


__all__ = ["apply_overrides", "config_hash", "configs_equal", "dump_yaml", "from_dict",
           "load_config", "load_raw", "preset_dict", "preset_names", "baseline", "to_dict"]
