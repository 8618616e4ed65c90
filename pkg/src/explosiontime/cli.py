"""
Command-line interface.

::

    explosiontime classify  --model reciprocal_bm --xi 1
    explosiontime survival  --model htransform_power --xi 1 --T 1,2,4 --method closed
    explosiontime resolvent --model reciprocal_bm --xi 1 --lambda 1 --curve curve.csv
    explosiontime compare   --s 1 --b 0 --interval=-inf,inf --xi 0 --T 1
    explosiontime catalog

Exit status is 0 on success, 2 for invalid configuration and 3 when a
numerical routine aborts.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import sys

import numpy as np

from . import __version__
from .closedform import NoClosedFormError, closed_form
from .config import ConfigError, RunConfig, load_config
from .feller import classify
from .model import CATALOG, ModelError, QuadratureError, default_ladder
from .montecarlo import SurvivalCurve, estimate_survival_direct, estimate_survival_feynman_kac
from .pde import PDEError, laplace_consistency, minimal_resolvent, minimal_survival
from .special import ConvergenceError

__all__ = ["run", "main", "build_parser"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# flag -> (section, key)
_FLAGS = {
    "model": ("model", "name"),
    "s": ("model", "s"),
    "b": ("model", "b"),
    "interval": ("model", "interval"),
    "xi": ("run", "xi"),
    "T": ("run", "T"),
    "T_min": ("run", "T_min"),
    "T_max": ("run", "T_max"),
    "T_count": ("run", "T_count"),
    "T_spacing": ("run", "T_spacing"),
    "method": ("run", "method"),
    "output": ("run", "output"),
    "paths": ("mc", "paths"),
    "seed": ("mc", "seed"),
    "step": ("mc", "step"),
    "scheme": ("mc", "scheme"),
    "threads": ("mc", "threads"),
    "space_nodes": ("pde", "space_nodes"),
    "time_nodes": ("pde", "time_nodes"),
    "conv_tol": ("pde", "conv_tol"),
    "lam": ("resolvent", "lambda"),
    "curve": ("resolvent", "curve"),
}


def _fmt(x) -> str:
    return format(float(x), ".17g")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", help="INI configuration file")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any configuration key (repeatable)")
    g.add_argument("--model", help="catalog model name")
    g.add_argument("--param", action="append", default=[], metavar="NAME=VALUE", help="model parameter (repeatable)")
    g.add_argument("--s", help="custom dispersion expression in x")
    g.add_argument("--b", help="custom drift-ratio expression in x")
    g.add_argument("--interval", help="custom state interval 'left,right' (use --interval=-inf,inf)")
    g.add_argument("--xi", help="starting point")
    g.add_argument("--T", help="comma-separated horizons")
    g.add_argument("--T-min", dest="T_min")
    g.add_argument("--T-max", dest="T_max")
    g.add_argument("--T-count", dest="T_count")
    g.add_argument("--T-spacing", dest="T_spacing", choices=["linear", "log"])
    g.add_argument("--output", "-o", help="output file ('-' for stdout)")
    n = common.add_argument_group("numerical controls")
    n.add_argument("--paths")
    n.add_argument("--seed")
    n.add_argument("--step")
    n.add_argument("--scheme")
    n.add_argument("--threads")
    n.add_argument("--space-nodes", dest="space_nodes")
    n.add_argument("--time-nodes", dest="time_nodes")
    n.add_argument("--conv-tol", dest="conv_tol")

    p = argparse.ArgumentParser(prog="explosiontime", description="Explosion times of one-dimensional diffusions.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("classify", parents=[common], help="Feller classification of both endpoints (JSON)")
    sp = sub.add_parser("survival", parents=[common], help="survival curve P(S > T) (CSV)")
    sp.add_argument("--method", choices=["closed", "mc-direct", "mc-fk", "pde"])
    sp.add_argument("--dump-grid", dest="dump_grid", metavar="PATH",
                    help="with --method pde, write the last truncated grid as x,T,u CSV")
    rp = sub.add_parser("resolvent", parents=[common], help="resolvent at xi, optionally checked against a curve")
    rp.add_argument("--lambda", dest="lam")
    rp.add_argument("--curve", help="survival-curve CSV for the Laplace-consistency residual")
    sub.add_parser("compare", parents=[common], help="all applicable methods side by side (wide CSV)")
    sub.add_parser("catalog", help="list the built-in models")
    return p


def _overrides(args) -> list[tuple[str, str, str]]:
    out = []
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(key or item, "expected SECTION.KEY=VALUE")
        out.append((section.strip(), name.strip(), value))
    for item in args.param:
        name, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"params.{name}", "expected NAME=VALUE")
        out.append(("params", name.strip(), value))
    for attr, (section, key) in _FLAGS.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.append((section, key, str(value)))
    if args.model is not None:
        # a catalog model on the command line replaces a custom one from the file, and vice versa
        out = [("model", "name", args.model)] + [o for o in out if o[:2] != ("model", "name")]
    return out


def _write(cfg: RunConfig, text: str, stdout) -> None:
    if cfg.output in ("", "-"):
        stdout.write(text)
    else:
        with open(cfg.output, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _survival_curve(cfg: RunConfig, method: str) -> SurvivalCurve:
    if method == "closed":
        if cfg.builtin is None:
            raise NoClosedFormError("custom models have no closed form")
        return closed_form(cfg.builtin, cfg.params).curve(cfg.xi, cfg.T)
    if method == "mc-direct":
        return estimate_survival_direct(cfg.spec, cfg.xi, cfg.mc)
    if method == "mc-fk":
        return estimate_survival_feynman_kac(cfg.spec, cfg.xi, cfg.mc, route=cfg.mc_route)
    ladder = default_ladder(cfg.spec.interval, cfg.pde["depth"], anchor=cfg.xi)
    return minimal_survival(cfg.spec, cfg.xi, cfg.T, ladder, cfg.pde["conv_tol"],
                            space_nodes=cfg.pde["space_nodes"], time_nodes=cfg.pde["time_nodes"])


def _cmd_classify(cfg: RunConfig, args, stdout) -> None:
    report = classify(cfg.spec, anchor=cfg.xi)
    doc = {"model": cfg.model_label, **report.to_dict(), "explosive_sides": list(report.explosive_sides)}
    _write(cfg, json.dumps(doc, indent=2) + "\n", stdout)


def _cmd_survival(cfg: RunConfig, args, stdout) -> None:
    curve = _survival_curve(cfg, cfg.method)
    comment = cfg.header()
    if cfg.method == "pde":
        comment += f"\npde: level={curve.info['level']} increment={_fmt(curve.info['increment'])}"
        if args.dump_grid:
            with open(args.dump_grid, "w", encoding="utf-8", newline="") as fh:
                curve.info["grid"].to_csv(fh)
    elif args.dump_grid:
        raise ConfigError("dump_grid", "only available with --method pde")
    _write(cfg, curve.to_csv(comment=comment), stdout)


def _cmd_resolvent(cfg: RunConfig, args, stdout) -> None:
    ladder = default_ladder(cfg.spec.interval, cfg.pde["depth"], anchor=cfg.xi)
    value, info = minimal_resolvent(cfg.spec, cfg.xi, cfg.lam, ladder, space_nodes=cfg.pde["space_nodes"])
    header = ["lambda", "xi", "u_hat", "level", "increment"]
    row = [_fmt(cfg.lam), _fmt(cfg.xi), _fmt(value), str(info["level"]), _fmt(info["increment"])]
    if cfg.curve_path:
        try:
            with open(cfg.curve_path, encoding="utf-8") as fh:
                curve = SurvivalCurve.from_csv(fh.read())
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError("resolvent.curve", f"cannot read a survival curve from {cfg.curve_path}: {exc}") from None
        header.append("laplace_residual")
        row.append(_fmt(laplace_consistency(curve, value, cfg.lam)))
    buf = io.StringIO()
    buf.write(f"# {cfg.header()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerow(row)
    _write(cfg, buf.getvalue(), stdout)


def _cmd_compare(cfg: RunConfig, args, stdout) -> None:
    results, skipped = {}, []
    for method in ("closed", "pde", "mc-direct", "mc-fk"):
        try:
            results[method] = _survival_curve(cfg, method)
        except (NoClosedFormError, ModelError) as exc:
            skipped.append(f"{method} ({exc})")
    if not results:
        raise ConfigError("run.method", "no method applies to this model")
    names = list(results)
    diffs = [float(np.max(np.abs(results[a].estimate - results[b].estimate)))
             for a, b in itertools.combinations(names, 2)]
    worst = max(diffs) if diffs else 0.0
    buf = io.StringIO()
    buf.write(f"# {cfg.header()}\n")
    for s in skipped:
        buf.write(f"# skipped: {s}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["T"] + names)
    for j, T in enumerate(cfg.T):
        w.writerow([_fmt(T)] + [_fmt(results[m].estimate[j]) for m in names])
    buf.write(f"# max_pairwise_discrepancy={_fmt(worst)}\n")
    _write(cfg, buf.getvalue(), stdout)


def _cmd_catalog(stdout) -> None:
    w = csv.writer(stdout, lineterminator="\n")
    w.writerow(["name", "example", "interval", "s", "b", "defaults", "ranges", "explosive", "description"])
    for e in CATALOG.values():
        defaults = " ".join(f"{k}={v:g}" for k, v in e.defaults.items())
        w.writerow([e.name, e.position, str(e.interval), e.s, e.b, defaults, e.ranges, e.explosive_sides,
                    e.description])


_COMMANDS = {"classify": _cmd_classify, "survival": _cmd_survival, "resolvent": _cmd_resolvent,
             "compare": _cmd_compare}


def run(argv=None, stdout=None, stderr=None) -> int:
    """Execute one command; returns the exit status."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "catalog":
        _cmd_catalog(stdout)
        return EXIT_OK
    try:
        cfg = load_config(args.config, _overrides(args))
        _COMMANDS[args.command](cfg, args, stdout)
    except (PDEError, ConvergenceError, QuadratureError, FloatingPointError) as exc:
        stderr.write(f"explosiontime: numerical failure: {exc}\n")
        return EXIT_NUMERIC
    except ConfigError as exc:
        stderr.write(f"explosiontime: configuration error: {exc}\n")
        return EXIT_CONFIG
    except (ModelError, ValueError) as exc:
        stderr.write(f"explosiontime: configuration error: {exc}\n")
        return EXIT_CONFIG
    except OSError as exc:
        stderr.write(f"explosiontime: {exc}\n")
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())
