"""
Diffusion specifications
========================

A :class:`DiffusionSpec` describes the one-dimensional diffusion

    dX = s(X) (dW + b(X) dt),    X(0) = xi in I = (left, right),

through expression trees for ``s`` and ``b``.  From these the module derives
the ratio ``f = b/s``, its antiderivative ``F`` and the potential
``V = (b^2 + b' s - b s')/2`` that enter the Feynman-Kac weight.  The
builtin catalog holds eight classical models whose explosion-time laws are
known in closed form (or, for ``exp_drift``, by simulation only).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np
from scipy import integrate

from . import expr as ex

__all__ = [
    "ModelError",
    "ZeroDispersionError",
    "MissingDerivativeError",
    "QuadratureError",
    "Interval",
    "DiffusionSpec",
    "TruncationLadder",
    "make_spec",
    "ratio_f",
    "antiderivative_F",
    "potential_V",
    "builtin_catalog",
    "catalog_names",
    "CATALOG",
    "default_anchor",
    "default_ladder",
    "probe_points",
]

INF = math.inf


class ModelError(ValueError):
    """Invalid diffusion specification."""


class ZeroDispersionError(ModelError):
    def __init__(self, x: float):
        super().__init__(f"dispersion s vanishes (or changes sign) near x = {x:.6g}")
        self.x = x


class MissingDerivativeError(ModelError):
    pass


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class Interval:
    """Open state interval ``(left, right)``; endpoints may be infinite."""

    left: float
    right: float

    def __post_init__(self):
        if not self.left < self.right:
            raise ModelError(f"interval needs left < right, got ({self.left}, {self.right})")

    def contains(self, x: float) -> bool:
        return self.left < x < self.right

    @property
    def left_finite(self) -> bool:
        return math.isfinite(self.left)

    @property
    def right_finite(self) -> bool:
        return math.isfinite(self.right)

    def __str__(self) -> str:
        return f"({self.left:g}, {self.right:g})"


def probe_points(interval: Interval, count: int = 200) -> np.ndarray:
    """Interior sample points spread over the whole interval."""
    u = (np.arange(count) + 0.5) / count
    lo, hi = interval.left, interval.right
    if interval.left_finite and interval.right_finite:
        return lo + (hi - lo) * u
    z = np.linspace(-6.0, 6.0, count)
    if interval.left_finite:
        return lo + np.exp(z)
    if interval.right_finite:
        return hi - np.exp(z)
    return np.sinh(z)


@dataclass(frozen=True, eq=False)
class DiffusionSpec:
    """Coefficients, interval and regularity flags of a diffusion.

    Attributes
    ----------
    interval : Interval
    s, b : expr.Node
        Dispersion and drift-ratio expressions in ``x``.
    s_deriv : expr.Node or None
        ``s'``; present when ``s`` is declared differentiable.
    params : mapping
        Parameter bindings used by the expressions.
    label : str
    f_c1 : bool
        ``f`` declared continuously differentiable (enables the weight of
        the potential ``V``).
    f_l2 : bool
        ``f`` declared locally square integrable (enables the Girsanov
        weight).
    forms : frozenset of str
        Special drift forms detected at construction: ``"half_s_prime"``
        (``b = s'/2``), ``"driftless"`` (``b = 0``) and ``"htransform"``
        (``I = (0, inf)``, ``b = s/x``).
    F_exact, V_exact : expr.Node or None
        Symbolic antiderivative of ``f`` and potential, stored for catalog
        entries and used as test oracles.
    """

    interval: Interval
    s: ex.Node
    b: ex.Node
    s_deriv: ex.Node | None = None
    params: Mapping[str, float] = field(default_factory=dict)
    label: str = "custom"
    f_c1: bool = True
    f_l2: bool = True
    forms: frozenset = frozenset()
    F_exact: ex.Node | None = None
    V_exact: ex.Node | None = None

    # vectorized evaluators; NaN marks singular points
    @cached_property
    def s_fn(self):
        return ex.compile_array(self.s, self.params)

    @cached_property
    def b_fn(self):
        return ex.compile_array(self.b, self.params)

    @cached_property
    def b_deriv(self) -> ex.Node:
        return ex.differentiate(self.b)

    @cached_property
    def s_prime_fn(self):
        if self.s_deriv is None:
            raise MissingDerivativeError(f"{self.label}: s was not declared differentiable")
        return ex.compile_array(self.s_deriv, self.params)

    @cached_property
    def b_prime_fn(self):
        return ex.compile_array(self.b_deriv, self.params)

    def f_fn(self, x):
        return self.b_fn(x) / self.s_fn(x)

    def V_fn(self, x):
        b = self.b_fn(x)
        return 0.5 * (b * b + self.b_prime_fn(x) * self.s_fn(x) - b * self.s_prime_fn(x))

    def nu_fn(self, x):
        """Lamperti drift ``b - s'/2`` on the original scale."""
        return self.b_fn(x) - 0.5 * self.s_prime_fn(x)

    @property
    def has_s_deriv(self) -> bool:
        return self.s_deriv is not None

    @cached_property
    def s_sign(self) -> float:
        return float(np.sign(self.s_fn(np.array([default_anchor(self.interval)]))[0]))

    def is_driftless(self) -> bool:
        return "driftless" in self.forms


def _detect_forms(interval: Interval, s_fn, b_fn, sp_fn) -> frozenset:
    x = probe_points(interval, 64)
    b = b_fn(x)
    forms = set()
    scale = 1.0 + np.abs(b)
    ok = np.isfinite(b)
    if ok.any() and np.all(np.abs(b[ok]) <= 1e-12 * scale[ok]):
        forms.add("driftless")
    if sp_fn is not None:
        d = b - 0.5 * sp_fn(x)
        ok = np.isfinite(d)
        if ok.any() and np.all(np.abs(d[ok]) <= 1e-10 * scale[ok]):
            forms.add("half_s_prime")
    if interval.left == 0.0 and interval.right == INF:
        d = b - s_fn(x) / x
        ok = np.isfinite(d)
        if ok.any() and np.all(np.abs(d[ok]) <= 1e-10 * scale[ok]):
            forms.add("htransform")
    return frozenset(forms)


def make_spec(
    interval: Interval,
    s: ex.Node | str,
    b: ex.Node | str,
    differentiable_s: bool = True,
    params: Mapping[str, float] | None = None,
    label: str = "custom",
    f_c1: bool = True,
    f_l2: bool = True,
    F_exact: ex.Node | str | None = None,
    V_exact: ex.Node | str | None = None,
) -> DiffusionSpec:
    """Build and validate a :class:`DiffusionSpec`.

    ``s`` is probed at 200 interior points; a zero, a sign change or a
    singular value raises.  When ``differentiable_s`` is set, ``s'`` is
    obtained symbolically and checked against a central difference at 50
    probe points.

    Raises
    ------
    ZeroDispersionError
        ``s`` vanishes or changes sign between probe points.
    ModelError
        A coefficient is singular at a probe point.
    """
    params = dict(params or {})
    names = set(params)

    def as_node(e):
        return ex.parse(e, names) if isinstance(e, str) else e

    s, b = as_node(s), as_node(b)
    F_exact, V_exact = as_node(F_exact), as_node(V_exact)
    for node in (s, b):
        missing = ex.parameters_of(node) - names
        if missing:
            raise ModelError(f"unbound parameters: {sorted(missing)}")

    s_fn = ex.compile_array(s, params)
    b_fn = ex.compile_array(b, params)
    x = probe_points(interval, 200)
    sv = s_fn(x)
    if np.any(np.isnan(sv)):
        bad = x[np.isnan(sv)][0]
        raise ModelError(f"s is singular at probe point x = {bad:.6g}")
    if np.any(sv == 0.0) or np.any(np.sign(sv) != np.sign(sv[0])):
        idx = int(np.argmax((sv == 0.0) | (np.sign(sv) != np.sign(sv[0]))))
        raise ZeroDispersionError(float(x[idx]))
    bv = b_fn(x)
    if np.any(np.isnan(bv)):
        bad = x[np.isnan(bv)][0]
        raise ModelError(f"b is singular at probe point x = {bad:.6g}")

    s_deriv = None
    sp_fn = None
    if differentiable_s:
        s_deriv = ex.differentiate(s)
        sp_fn = ex.compile_array(s_deriv, params)
        xs = probe_points(interval, 50)
        h = 1e-6 * np.maximum(1.0, np.abs(xs))
        h = np.minimum(h, 0.25 * np.minimum(xs - interval.left, interval.right - xs))
        fd = (s_fn(xs + h) - s_fn(xs - h)) / (2 * h)
        an = sp_fn(xs)
        bad = np.abs(an - fd) > 1e-4 * np.maximum(1.0, np.abs(an))
        if np.any(bad):
            raise ModelError(f"symbolic s' disagrees with a finite difference at x = {xs[bad][0]:.6g}")

    forms = _detect_forms(interval, s_fn, b_fn, sp_fn)
    return DiffusionSpec(
        interval=interval,
        s=s,
        b=b,
        s_deriv=s_deriv,
        params=params,
        label=label,
        f_c1=f_c1,
        f_l2=f_l2,
        forms=forms,
        F_exact=F_exact,
        V_exact=V_exact,
    )


def _check_inside(spec: DiffusionSpec, *xs: float) -> None:
    for x in xs:
        if not spec.interval.contains(x):
            raise ModelError(f"x = {x} is outside the state interval {spec.interval}")


def ratio_f(spec: DiffusionSpec, x: float) -> float:
    """``f(x) = b(x)/s(x)``; scalar evaluation, so domain errors propagate."""
    _check_inside(spec, x)
    return ex.evaluate(spec.b, x, spec.params) / ex.evaluate(spec.s, x, spec.params)


def antiderivative_F(spec: DiffusionSpec, c: float, x: float) -> float:
    """``F(x) = int_c^x f(u) du`` by adaptive quadrature (absolute tolerance 1e-10)."""
    _check_inside(spec, c, x)
    if x == c:
        return 0.0

    def f(u):
        return ratio_f(spec, u)

    val, err = integrate.quad(f, c, x, epsabs=1e-10, epsrel=1e-12, limit=200)
    if not (math.isfinite(val) and err <= 1e-8 * max(1.0, abs(val))):
        raise QuadratureError(f"F({x}) from c={c} did not converge (error estimate {err:.3g})")
    return float(val)


def potential_V(spec: DiffusionSpec, x: float) -> float:
    """``V(x) = (b^2 + f' s^2)/2 = (b^2 + b' s - b s')/2``."""
    _check_inside(spec, x)
    if spec.s_deriv is None:
        raise MissingDerivativeError(f"{spec.label}: V needs s', but s was not declared differentiable")
    p = spec.params
    b = ex.evaluate(spec.b, x, p)
    bp = ex.evaluate(spec.b_deriv, x, p)
    s = ex.evaluate(spec.s, x, p)
    sp = ex.evaluate(spec.s_deriv, x, p)
    return 0.5 * (b * b + bp * s - b * sp)


# -- ladder ------------------------------------------------------------------


def default_anchor(interval: Interval) -> float:
    """Midpoint of a bounded interval, else ``max(left + 1, min(right - 1, 0))``."""
    if interval.left_finite and interval.right_finite:
        return 0.5 * (interval.left + interval.right)
    return max(interval.left + 1.0, min(interval.right - 1.0, 0.0))


@dataclass(frozen=True)
class TruncationLadder:
    """Nested compacts ``(left[n-1], right[n-1])`` for levels ``n = 1..N``."""

    anchor: float
    left: tuple
    right: tuple

    @property
    def depth(self) -> int:
        return len(self.left)

    def level(self, n: int) -> tuple[float, float]:
        if not 1 <= n <= self.depth:
            raise IndexError(f"ladder level {n} outside 1..{self.depth}")
        return self.left[n - 1], self.right[n - 1]

    def breakpoints(self, n: int | None = None) -> np.ndarray:
        """Sorted ladder points up to level ``n`` (all points by default) together with the anchor."""
        if n is None:
            return np.array(sorted(self.left) + [self.anchor] + list(self.right))
        return np.array(sorted(self.left[:n]) + [self.anchor] + list(self.right[:n]))


def _escape(c: float, n_max: int, direction: float) -> list[float]:
    # r_1 = c + 1, r_{n+1} = r_n + max(r_n - c, |r_n|): doubles from c, or from 0 once past it
    out = []
    r = c + direction
    for _ in range(n_max):
        out.append(r)
        r = r + direction * max(abs(r - c), abs(r))
    return out


def default_ladder(interval: Interval, n_max: int, anchor: float | None = None) -> TruncationLadder:
    """Truncation ladder approaching both ends of ``interval``.

    A finite endpoint is approached geometrically (the distance from the
    anchor halves each level); an infinite one is escaped by doubling,
    starting from a unit offset of the anchor.
    """
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    c = default_anchor(interval) if anchor is None else float(anchor)
    if not interval.contains(c):
        raise ModelError(f"anchor {c} is outside {interval}")
    if interval.left_finite:
        left = [interval.left + (c - interval.left) / 2**n for n in range(1, n_max + 1)]
    else:
        left = _escape(c, n_max, -1.0)
    if interval.right_finite:
        right = [interval.right - (interval.right - c) / 2**n for n in range(1, n_max + 1)]
    else:
        right = _escape(c, n_max, 1.0)
    return TruncationLadder(anchor=c, left=tuple(left), right=tuple(right))


# -- catalog -----------------------------------------------------------------


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    position: int
    interval: Interval
    s: str
    b: str
    F: str
    V: str
    defaults: Mapping[str, float]
    ranges: str
    explosive_sides: str
    description: str

    def validate(self, params: Mapping[str, float]) -> None:
        _VALIDATORS[self.name](params)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ModelError(message)


_VALIDATORS = {
    "reciprocal_bm": lambda p: None,
    "power_drift": lambda p: _require(p["kappa"] >= 0.5, "power_drift needs kappa >= 1/2"),
    "htransform_power": lambda p: _require(p["kappa"] > 0 and p["p"] > 0, "htransform_power needs kappa > 0, p > 0"),
    "affine_variance": lambda p: _require(p["kappa"] > 0, "affine_variance needs kappa > 0"),
    "quartic_tan": lambda p: None,
    "cubic_drift": lambda p: None,
    "bessel": lambda p: _require(p["delta"] < 2, "bessel needs delta < 2"),
    "exp_drift": lambda p: _require(p["beta"] > 0, "exp_drift needs beta > 0"),
}

_POS = Interval(0.0, INF)
_REAL = Interval(-INF, INF)

CATALOG: dict[str, CatalogEntry] = {
    e.name: e
    for e in [
        CatalogEntry(
            "reciprocal_bm", 1, _POS, "-x^2", "-x", "log(x)", "0", {}, "none",
            "right", "reciprocal of a 3-d Bessel process with drift; explodes to +inf",
        ),
        CatalogEntry(
            "power_drift", 2, _POS, "-x^2", "-kappa*x", "kappa*log(x)", "kappa*(kappa - 1)*x^2/2",
            {"kappa": 1.0}, "kappa >= 1/2", "right", "generalized reciprocal Bessel model",
        ),
        CatalogEntry(
            "htransform_power", 3, _POS, "kappa*x^p", "kappa*x^p/x", "log(x)", "0",
            {"kappa": 1.0, "p": 1.5}, "kappa > 0, p > 0", "right if p > 1",
            "h-transform of the natural-scale power diffusion",
        ),
        CatalogEntry(
            "affine_variance", 4, _POS, "kappa*sqrt(x)", "kappa/(4*sqrt(x))", "log(x)/4",
            "-3*kappa^2/(32*x)", {"kappa": 1.0}, "kappa > 0", "left",
            "affine-variance diffusion hitting the origin",
        ),
        CatalogEntry(
            "quartic_tan", 5, _REAL, "1 + x^2", "nu + x", "nu*arctan(x) + log(1 + x^2)/2",
            "(1 + nu^2)/2", {"nu": 0.0}, "nu real", "both", "tan of Brownian motion with drift",
        ),
        CatalogEntry(
            "cubic_drift", 6, _POS, "x^(3/2)", "nu + 3*sqrt(x)/4", "-2*nu/sqrt(x) + 3*log(x)/4",
            "nu^2/2 - 3*x/32", {"nu": 0.0}, "nu real", "right",
            "cubic-variance diffusion; P(S < inf) = exp(4 nu/sqrt(xi)) for nu < 0",
        ),
        CatalogEntry(
            "bessel", 7, _POS, "1", "(delta - 1)/(2*x)", "(delta - 1)*log(x)/2",
            "(delta - 1)*(delta - 3)/(8*x^2)", {"delta": 1.0}, "delta < 2", "left",
            "Bessel process of dimension delta < 2, killed at the origin",
        ),
        CatalogEntry(
            "exp_drift", 8, _REAL, "1", "exp(beta*x)", "exp(beta*x)/beta",
            "(exp(2*beta*x) + beta*exp(beta*x))/2", {"beta": 1.0}, "beta > 0", "right",
            "Brownian motion with exponential drift; explodes to +inf",
        ),
    ]
}


def catalog_names() -> list[str]:
    return list(CATALOG)


def builtin_catalog(name: str, parameters: Mapping[str, float] | None = None) -> DiffusionSpec:
    """Spec for one of the builtin models.

    Parameters
    ----------
    name : str
        One of :func:`catalog_names`.
    parameters : mapping, optional
        Overrides for the entry's default parameters.

    Raises
    ------
    ModelError
        Unknown name, unknown parameter or parameter out of range.
    """
    if name not in CATALOG:
        raise ModelError(f"unknown catalog model {name!r}; choose from {', '.join(CATALOG)}")
    entry = CATALOG[name]
    params = dict(entry.defaults)
    for key, value in (parameters or {}).items():
        if key not in params:
            raise ModelError(f"{name} has no parameter {key!r}")
        params[key] = float(value)
    entry.validate(params)
    tag = ", ".join(f"{k}={v:g}" for k, v in params.items())
    label = f"{name}({tag})" if tag else name
    return make_spec(
        entry.interval, entry.s, entry.b, True, params, label, F_exact=entry.F, V_exact=entry.V
    )
