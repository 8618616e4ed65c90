"""
Run configuration: an INI file of ``key = value`` sections plus overrides.

Grammar::

    [model]
    name = htransform_power      ; a catalog model, or
    s = x^2                      ; a custom model: s, b and the interval
    b = 0
    interval = 0, inf
    differentiable_s = true

    [params]                     ; parameter bindings for either kind
    p = 1.5

    [run]
    xi = 1
    T = 0.5, 1, 2                ; or T_min, T_max, T_count, T_spacing = linear|log (default T = 1)
    method = closed              ; closed | mc-direct | mc-fk | pde
    output = curve.csv

    [mc]
    paths = 100000
    seed = 1
    step = 0.015625
    scheme = auto                ; auto | dds_exact | euler_lamperti | euler_raw | timechange_natural
    route = auto                 ; auto | fk | girsanov (mc-fk only)
    depth = 12
    threads = 1
    max_refine = 30
    gap_factor = 0.0625

    [pde]
    space_nodes = 800
    time_nodes = 800
    conv_tol = 1e-4
    depth = 40

    [resolvent]
    lambda = 1
    curve = curve.csv

Every key may also be set from the command line as ``--set section.key=value``;
the common ones have dedicated flags.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .model import CATALOG, DiffusionSpec, Interval, ModelError, builtin_catalog, default_ladder, make_spec
from .montecarlo import DEFAULT_LEVELS as MC_LEVELS, SCHEMES, SimConfig
from .pde import DEFAULT_LEVELS as PDE_LEVELS

__all__ = ["ConfigError", "RunConfig", "load_config", "DEFAULTS"]

METHODS = ("closed", "mc-direct", "mc-fk", "pde")

DEFAULTS: dict[str, dict[str, str]] = {
    "model": {"differentiable_s": "true"},
    "params": {},
    "run": {"xi": "", "method": "closed", "output": "-", "T_spacing": "linear"},
    "mc": {"paths": "10000", "seed": "0", "step": repr(2.0**-6), "scheme": "auto", "route": "auto",
           "depth": str(MC_LEVELS), "threads": "", "max_refine": "30", "gap_factor": "0.0625"},
    "pde": {"space_nodes": "800", "time_nodes": "800", "conv_tol": "1e-4", "depth": str(PDE_LEVELS)},
    "resolvent": {"lambda": "1", "curve": ""},
}

_KNOWN = {
    "model": {"name", "s", "b", "interval", "differentiable_s"},
    "run": {"xi", "T", "T_min", "T_max", "T_count", "T_spacing", "method", "output"},
    "mc": set(DEFAULTS["mc"]),
    "pde": set(DEFAULTS["pde"]),
    "resolvent": set(DEFAULTS["resolvent"]),
}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending ``section.key``."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def _merge(raw: dict, section: str, key: str, value: str) -> None:
    if section not in DEFAULTS:
        raise ConfigError(f"{section}.{key}", f"unknown section [{section}]")
    if section != "params" and key not in _KNOWN[section]:
        raise ConfigError(f"{section}.{key}", "unknown key")
    raw.setdefault(section, {})[key] = value.strip()


def _read_file(path: str) -> dict:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
    except configparser.Error as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from exc
    raw: dict = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            _merge(raw, section, key, value)
    return raw


def _float(raw: dict, section: str, key: str) -> float:
    text = raw[section].get(key, "")
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"{section}.{key}", f"expected a number, got {text!r}") from None
    if math.isnan(v):
        raise ConfigError(f"{section}.{key}", "NaN is not allowed")
    return v


def _int(raw: dict, section: str, key: str, minimum: int = 1) -> int:
    text = raw[section].get(key, "")
    try:
        v = int(text)
    except ValueError:
        raise ConfigError(f"{section}.{key}", f"expected an integer, got {text!r}") from None
    if v < minimum:
        raise ConfigError(f"{section}.{key}", f"must be at least {minimum}")
    return v


def _bool(raw: dict, section: str, key: str) -> bool:
    text = raw[section].get(key, "").lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{section}.{key}", f"expected true or false, got {text!r}")


def _interval(text: str) -> Interval:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ConfigError("model.interval", "expected 'left, right'")
    try:
        lo, hi = (float(p) for p in parts)
        return Interval(lo, hi)
    except ValueError as exc:
        raise ConfigError("model.interval", str(exc)) from None


@dataclass
class RunConfig:
    """Validated configuration for one command."""

    spec: DiffusionSpec
    model_label: str
    builtin: str | None
    params: dict
    xi: float
    T: np.ndarray
    method: str
    output: str
    mc: SimConfig
    mc_route: str
    pde: dict
    lam: float
    curve_path: str
    resolved: dict = field(default_factory=dict)

    def header(self) -> str:
        """One-line audit record of the fully resolved configuration."""
        items = []
        for section in sorted(self.resolved):
            for key in sorted(self.resolved[section]):
                items.append(f"{section}.{key}={self.resolved[section][key]}")
        return "explosiontime config: " + "; ".join(items)


def _T_grid(run: dict) -> np.ndarray:
    if run.get("T"):
        try:
            T = np.array([float(t) for t in run["T"].split(",") if t.strip()])
        except ValueError:
            raise ConfigError("run.T", f"expected comma-separated numbers, got {run['T']!r}") from None
    elif not any(run.get(k) for k in ("T_min", "T_max", "T_count")):
        T = np.array([1.0])
    else:
        missing = [k for k in ("T_min", "T_max", "T_count") if not run.get(k)]
        if missing:
            raise ConfigError(f"run.{missing[0]}", "give run.T or all of T_min, T_max, T_count")
        lo, hi = _float({"run": run}, "run", "T_min"), _float({"run": run}, "run", "T_max")
        n = _int({"run": run}, "run", "T_count")
        spacing = run.get("T_spacing", "linear")
        if spacing == "linear":
            T = np.linspace(lo, hi, n)
        elif spacing == "log":
            if lo <= 0:
                raise ConfigError("run.T_min", "log spacing needs T_min > 0")
            T = np.geomspace(lo, hi, n)
        else:
            raise ConfigError("run.T_spacing", "expected linear or log")
    if T.size == 0 or not np.all(np.isfinite(T)) or T[0] <= 0 or np.any(np.diff(T) <= 0):
        raise ConfigError("run.T", "horizons must be positive, finite and strictly increasing")
    return T


def _build_spec(raw: dict) -> tuple[DiffusionSpec, str, str | None, dict]:
    model, params = raw["model"], {}
    for key, text in raw["params"].items():
        try:
            params[key] = float(text)
        except ValueError:
            raise ConfigError(f"params.{key}", f"expected a number, got {text!r}") from None
    name = model.get("name")
    custom = [k for k in ("s", "b", "interval") if model.get(k)]
    if name and custom:
        raise ConfigError(f"model.{custom[0]}", "give either model.name or a custom s, b and interval")
    try:
        if name:
            if name not in CATALOG:
                raise ConfigError("model.name", f"unknown catalog model {name!r}")
            unknown = set(params) - set(CATALOG[name].defaults)
            if unknown:
                raise ConfigError(f"params.{sorted(unknown)[0]}", f"not a parameter of {name}")
            spec = builtin_catalog(name, params)
            return spec, name, name, dict(spec.params)
        for k in ("s", "b", "interval"):
            if not model.get(k):
                raise ConfigError(f"model.{k}", "missing (needed for a custom model)")
        nodes = {}
        for k in ("s", "b"):
            try:
                nodes[k] = ex.parse(model[k], params)
            except ex.ExprError as exc:
                raise ConfigError(f"model.{k}", str(exc)) from None
        spec = make_spec(_interval(model["interval"]), nodes["s"], nodes["b"],
                         differentiable_s=_bool(raw, "model", "differentiable_s"), params=params)
        return spec, f"custom s={model['s']} b={model['b']}", None, params
    except (ModelError, ex.ExprError) as exc:
        raise ConfigError("params" if name else "model", str(exc)) from None


def load_config(path: str | None = None, overrides: list[tuple[str, str, str]] = ()) -> RunConfig:
    """Read ``path`` (optional), apply ``(section, key, value)`` overrides and validate."""
    raw = {s: dict(v) for s, v in DEFAULTS.items()}
    if path:
        for section, values in _read_file(path).items():
            raw[section].update(values)
    for section, key, value in overrides:
        _merge(raw, section, key, value)

    spec, label, builtin, params = _build_spec(raw)
    run = raw["run"]
    if not run.get("xi"):
        raise ConfigError("run.xi", "missing")
    xi = _float(raw, "run", "xi")
    if not spec.interval.contains(xi):
        raise ConfigError("run.xi", f"{xi} is not inside {spec.interval}")
    T = _T_grid(run)
    method = run["method"]
    if method not in METHODS:
        raise ConfigError("run.method", f"expected one of {', '.join(METHODS)}")

    mc = raw["mc"]
    scheme = mc["scheme"]
    if scheme == "auto":
        scheme = "dds_exact" if spec.has_s_deriv else "euler_raw"
    if scheme not in SCHEMES:
        raise ConfigError("mc.scheme", f"expected auto or one of {', '.join(SCHEMES)}")
    if mc["route"] not in ("auto", "fk", "girsanov"):
        raise ConfigError("mc.route", "expected auto, fk or girsanov")
    seed = _int(raw, "mc", "seed", minimum=0)
    if seed >= 2**64:
        raise ConfigError("mc.seed", "must fit in 64 bits")
    try:
        sim = SimConfig(
            step=_float(raw, "mc", "step"),
            n_paths=_int(raw, "mc", "paths"),
            seed=seed,
            ladder=default_ladder(spec.interval, _int(raw, "mc", "depth"), anchor=xi),
            scheme=scheme,
            T_grid=tuple(T),
            gap_factor=_float(raw, "mc", "gap_factor"),
            max_refine=_int(raw, "mc", "max_refine"),
            threads=_int(raw, "mc", "threads") if mc.get("threads") else None,
        )
    except ValueError as exc:
        raise ConfigError("mc", str(exc)) from None

    pde = {
        "space_nodes": _int(raw, "pde", "space_nodes", 2),
        "time_nodes": _int(raw, "pde", "time_nodes"),
        "conv_tol": _float(raw, "pde", "conv_tol"),
        "depth": _int(raw, "pde", "depth", 2),
    }
    if not pde["conv_tol"] > 0:
        raise ConfigError("pde.conv_tol", "must be positive")
    lam = _float(raw, "resolvent", "lambda")
    if not lam > 0:
        raise ConfigError("resolvent.lambda", "must be positive")

    resolved = {s: {k: v for k, v in vals.items() if v != ""} for s, vals in raw.items()}
    resolved["mc"]["scheme"] = scheme
    return RunConfig(spec, label, builtin, params, xi, T, method, run["output"], sim, mc["route"], pde, lam,
                     raw["resolvent"]["curve"], {s: v for s, v in resolved.items() if v})
