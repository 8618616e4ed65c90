"""
Feller test for explosions.

The test function

    v(x) = int_c^x exp(-2 F(y)) int_c^y exp(2 F(z)) s(z)^-2 dz dy

tends to a finite limit at an endpoint exactly when the diffusion can reach
that endpoint in finite time.  Limits are estimated along the truncation
ladder; since no finite computation proves divergence, every verdict carries
the raw ladder values that produced it.

Along the ladder ``v`` is obtained from the first-order system

    G' = s^-2 - 2 f G,    v' = G,    G(c) = v(c) = 0,

which is equivalent to the double integral but never forms ``exp(+-2F)``.
:func:`feller_v` evaluates the double integral itself by nested quadrature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

from . import expr as ex
from .model import DiffusionSpec, TruncationLadder, default_anchor, default_ladder

__all__ = [
    "EXPLOSIVE",
    "NON_EXPLOSIVE",
    "UNDETERMINED",
    "BoundaryVerdict",
    "ExplosionReport",
    "feller_v",
    "boundary_limit",
    "classify",
    "natural_scale_boundary_test",
    "endpoint_integral",
]

EXPLOSIVE = "explosive"
NON_EXPLOSIVE = "non-explosive"
UNDETERMINED = "undetermined"

DIVERGENCE_THRESHOLD = 1e8
CONVERGENCE_RTOL = 1e-4
DEFAULT_DEPTH = 80


@dataclass(frozen=True)
class BoundaryVerdict:
    """Verdict for one endpoint.

    ``v_limit`` is ``inf`` when the evidence says the limit diverges.
    ``ladder_points``/``ladder_values`` hold the evaluated ``v`` (or, for the
    shortcut methods, the partial endpoint integrals) in approach order.
    """

    side: str
    v_limit: float
    classification: str
    method: str
    ladder_points: tuple = ()
    ladder_values: tuple = ()

    def to_dict(self) -> dict:
        return {
            "side": self.side,
            "v_limit": _json_float(self.v_limit),
            "verdict": self.classification,
            "method": self.method,
            "ladder": [
                {"point": _json_float(p), "value": _json_float(v)}
                for p, v in zip(self.ladder_points, self.ladder_values)
            ],
        }


@dataclass(frozen=True)
class ExplosionReport:
    left: BoundaryVerdict
    right: BoundaryVerdict
    anchor: float
    overall: str = field(init=False)

    def __post_init__(self):
        sides = (self.left.classification, self.right.classification)
        if EXPLOSIVE in sides:
            overall = "P(S<inf)>0"
        elif sides == (NON_EXPLOSIVE, NON_EXPLOSIVE):
            overall = "P(S=inf)=1"
        else:
            overall = UNDETERMINED
        object.__setattr__(self, "overall", overall)

    @property
    def explosive_sides(self) -> tuple:
        return tuple(v.side for v in (self.left, self.right) if v.classification == EXPLOSIVE)

    def to_dict(self) -> dict:
        return {
            "anchor": self.anchor,
            "overall": self.overall,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }


def _json_float(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return v


# -- the test function ---------------------------------------------------------


def feller_v(spec: DiffusionSpec, c: float, x: float, tol: float = 1e-11) -> float:
    """Feller test function by nested adaptive quadrature.

    Evaluates the single-``F`` rearrangement
    ``int_c^x exp(2F(z)) s(z)^-2 (int_z^x exp(-2F(y)) dy) dz``, with ``F``
    itself taken from the closed form attached to the DiffusionSpec when present and
    otherwise obtained by quadrature of ``f``.  Both orientations are folded
    so the result is nonnegative.
    """
    iv = spec.interval
    if not (iv.contains(c) and iv.contains(x)):
        raise ValueError(f"c = {c} and x = {x} must lie in {iv}")
    if x == c:
        return 0.0
    lo, hi = min(c, x), max(c, x)

    def f(u):
        return float(spec.f_fn(np.array([u]))[0])

    if spec.F_exact is not None:
        F_node, params = spec.F_exact, spec.params

        def F(u):
            return ex.evaluate(F_node, u, params)
    else:
        def F(u):
            return integrate.quad(f, c, u, epsabs=1e-13, epsrel=1e-13, limit=200)[0]

    def s2inv(u):
        return float(spec.s_fn(np.array([u]))[0]) ** -2

    if x > c:
        # inner: int_z^x exp(-2(F(y) - F(z))) dy
        def outer(z):
            Fz = F(z)
            inner = integrate.quad(lambda y: math.exp(-2.0 * (F(y) - Fz)), z, x, epsabs=tol, epsrel=tol)[0]
            return s2inv(z) * inner
    else:
        def outer(z):
            Fz = F(z)
            inner = integrate.quad(lambda y: math.exp(-2.0 * (F(y) - Fz)), x, z, epsabs=tol, epsrel=tol)[0]
            return s2inv(z) * inner

    value, _ = integrate.quad(outer, lo, hi, epsabs=tol, epsrel=tol, limit=200)
    return max(0.0, value)


def _v_along(spec: DiffusionSpec, c: float, points: list[float], end: float, early_stop: bool = True):
    """Integrate the (G, v) system from ``c`` through ``points`` toward ``end``.

    The independent variable is logarithmic, ``u = -log(|y - end|/|c - end|)``
    for a finite end and ``u = log(1 + |y - c|)`` for an infinite one, so each
    ladder gap has width of order one.  The system is linear and often stiff
    (``|f|`` large near an endpoint), hence BDF with the exact Jacobian.
    Overflow is reported as ``inf``.  Stops early once :func:`_judge` decides.
    """
    d = 1.0 if end > c else -1.0
    finite = math.isfinite(end)
    span = abs(c - end) if finite else 1.0

    def y_of(u):
        return end - d * span * math.exp(-u) if finite else c + d * math.expm1(u)

    def u_of(y):
        return -math.log(abs(y - end) / span) if finite else math.log1p(abs(y - c))

    def coeffs(u):
        y = y_of(u)
        x = np.array([y])
        s = spec.s_fn(x)[0]
        f = spec.b_fn(x)[0] / s
        j = d * (abs(y - end) if finite else 1.0 + abs(y - c))  # dy/du
        return j / (s * s), -2.0 * f * j, j

    def rhs(u, state):
        a, k, j = coeffs(u)
        return [a + k * state[0], j * state[0]]

    def jac(u, state):
        _, k, j = coeffs(u)
        return [[k, 0.0], [j, 0.0]]

    state = np.zeros(2)
    u0 = 0.0
    step = None
    values = []
    for p in points:
        u1 = u_of(p)
        if not math.isfinite(state[1]):
            values.append(math.inf)
        else:
            try:
                with np.errstate(all="ignore"):
                    sol = integrate.solve_ivp(
                        rhs, (u0, u1), state, method="BDF", jac=jac, rtol=1e-10, atol=1e-20, first_step=step
                    )
                ok = sol.status == 0 and np.all(np.isfinite(sol.y[:, -1]))
            except (ValueError, FloatingPointError, OverflowError):
                ok = False
            if ok:
                state = sol.y[:, -1]
                if len(sol.t) > 1:
                    step = min(sol.t[-1] - sol.t[-2], 0.5)
                values.append(abs(float(state[1])))
            else:
                state = np.array([math.inf, math.inf])
                values.append(math.inf)
        u0 = u1
        if early_stop and _judge(values)[0] != UNDETERMINED:
            break
    return values


def _judge(values: list[float]) -> tuple[str, float]:
    """Classify a ladder sequence: ``(verdict, limit estimate)``."""
    if not values:
        return UNDETERMINED, math.nan
    last = values[-1]
    if math.isinf(last):
        return NON_EXPLOSIVE, math.inf
    if len(values) >= 4:
        inc = np.diff(values[-4:])
        if last > DIVERGENCE_THRESHOLD and np.all(np.diff(inc) >= -1e-12 * abs(inc[:-1])):
            return NON_EXPLOSIVE, math.inf
    if len(values) >= 2 and last > 0:
        if abs(values[-1] - values[-2]) < CONVERGENCE_RTOL * last:
            return EXPLOSIVE, last
    return UNDETERMINED, last


def boundary_limit(
    spec: DiffusionSpec, c: float, side: str, ladder: TruncationLadder | None = None
) -> BoundaryVerdict:
    """Estimate ``v`` at one endpoint by walking the ladder toward it.

    Infinite when the values exceed ``1e8`` with nondecreasing increments
    over the last three levels; finite when consecutive levels agree to a
    relative ``1e-4``; undetermined otherwise.
    """
    if side not in ("left", "right"):
        raise ValueError("side must be 'left' or 'right'")
    if ladder is None:
        ladder = default_ladder(spec.interval, DEFAULT_DEPTH, anchor=c)
    points = list(ladder.left if side == "left" else ladder.right)
    end = spec.interval.left if side == "left" else spec.interval.right
    values = _v_along(spec, c, points, end)
    verdict, limit = _judge(values)
    return BoundaryVerdict(side, limit, verdict, "general_integral", tuple(points[: len(values)]), tuple(values))


# -- endpoint integrals --------------------------------------------------------


def endpoint_integral(
    g: Callable,
    start: float,
    end: float,
    max_panels: int = 400,
    threshold: float = DIVERGENCE_THRESHOLD,
    rtol: float = 1e-10,
) -> tuple[str, float, list[float], list[float]]:
    """Decide whether ``int_start^end g`` is finite for a nonnegative ``g``.

    The integral is split into panels accumulating geometrically at ``end``
    (halving distances for a finite end, doubling for an infinite one).
    Divergent when the partial sum passes ``threshold`` or the panel
    contributions stop decreasing over the last three panels; finite when
    they decay geometrically and the implied tail is below ``rtol``.

    Returns
    -------
    status : {"divergent", "finite", "undetermined"}
    total : float
        Partial sum (``inf`` when divergent).
    points, partial_sums : list of float
    """
    direction = 1.0 if end > start else -1.0
    if math.isfinite(end):
        def node(k):
            return end - (end - start) * 0.5**k
    else:
        base = max(1.0, abs(start))
        def node(k):
            return start + direction * base * (2.0**k - 1.0)

    total = 0.0
    panels: list[float] = []
    points: list[float] = []
    sums: list[float] = []
    a = node(0)
    for k in range(1, max_panels + 1):
        b = node(k)
        if b == a or (math.isfinite(end) and abs(end - b) <= 4 * np.spacing(abs(end) + 1e-300)):
            break
        lo, hi = (a, b) if a < b else (b, a)
        piece, _ = integrate.quad(g, lo, hi, epsabs=0.0, epsrel=1e-10, limit=100)
        if not math.isfinite(piece):
            return "divergent", math.inf, points, sums
        total += piece
        panels.append(piece)
        points.append(b)
        sums.append(total)
        a = b
        if total > threshold:
            return "divergent", math.inf, points, sums
        if len(panels) >= 8:
            p = panels[-4:]
            if p[0] > 0:
                ratios = [p[i + 1] / p[i] if p[i] > 0 else 0.0 for i in range(3)]
                if min(ratios) >= 1.0 - 1e-9:
                    return "divergent", math.inf, points, sums
                rho = max(ratios)
                if rho < 0.95 and p[-1] * rho / (1.0 - rho) <= rtol * total:
                    return "finite", total, points, sums
            elif total > 0 and all(q == 0.0 for q in p):
                return "finite", total, points, sums
    return "undetermined", total, points, sums


def natural_scale_boundary_test(spec: DiffusionSpec, side: str, n: int = 1, ladder: TruncationLadder | None = None) -> str:
    """Endpoint criterion for a driftless diffusion at a finite endpoint.

    Decides whether ``int_{r_n}^r (r - y) s(y)^-2 dy`` (right) or
    ``int_l^{l_n} (y - l) s(y)^-2 dy`` (left) diverges.  The drift of
    ``spec`` is ignored.  Returns ``"divergent"``, ``"finite"`` or
    ``"undetermined"``.
    """
    iv = spec.interval
    end = iv.right if side == "right" else iv.left
    if not math.isfinite(end):
        raise ValueError(f"the {side} endpoint must be finite")
    ladder = ladder or default_ladder(iv, max(n, 1))
    start = ladder.right[n - 1] if side == "right" else ladder.left[n - 1]

    def g(y):
        s = float(spec.s_fn(np.array([y]))[0])
        return abs(end - y) / (s * s)

    return endpoint_integral(g, start, end)[0]


def _status_to_verdict(status: str, finite_means_explosive: bool = True) -> str:
    if status == "undetermined":
        return UNDETERMINED
    return EXPLOSIVE if (status == "finite") == finite_means_explosive else NON_EXPLOSIVE


def _half_s_prime_side(spec: DiffusionSpec, c: float, side: str) -> BoundaryVerdict:
    # b = s'/2 makes v = h^2/2 with h = int_c 1/|s|
    end = spec.interval.right if side == "right" else spec.interval.left

    def g(y):
        return 1.0 / abs(float(spec.s_fn(np.array([y]))[0]))

    status, total, pts, sums = endpoint_integral(g, c, end, threshold=math.sqrt(2 * DIVERGENCE_THRESHOLD))
    v = 0.5 * total * total
    return BoundaryVerdict(side, v, _status_to_verdict(status), "scale_integral", tuple(pts), tuple(0.5 * s * s for s in sums))


def _known_side(side: str, method: str) -> BoundaryVerdict:
    return BoundaryVerdict(side, math.inf, NON_EXPLOSIVE, method)


def _driftless_half_line(spec: DiffusionSpec, c: float) -> ExplosionReport:
    # v(0+) = int_0^c z s^-2 dz; the right end of a driftless diffusion on (0, inf) is never reached
    def g(z):
        s = float(spec.s_fn(np.array([z]))[0])
        return z / (s * s)

    status, total, pts, sums = endpoint_integral(g, c, 0.0)
    left = BoundaryVerdict("left", total, _status_to_verdict(status), "driftless_integral", tuple(pts), tuple(sums))
    return ExplosionReport(left, _known_side("right", "driftless_integral"), c)


def _htransform_half_line(spec: DiffusionSpec, c: float) -> ExplosionReport:
    # b = s/x gives v(inf) = int_c^inf z s^-2 dz; the origin is never reached
    def g(z):
        s = float(spec.s_fn(np.array([z]))[0])
        return z / (s * s)

    status, total, pts, sums = endpoint_integral(g, c, math.inf)
    right = BoundaryVerdict("right", total, _status_to_verdict(status), "htransform_integral", tuple(pts), tuple(sums))
    return ExplosionReport(_known_side("left", "htransform_integral"), right, c)


def classify(
    spec: DiffusionSpec,
    ladder: TruncationLadder | None = None,
    anchor: float | None = None,
    method: str = "auto",
) -> ExplosionReport:
    """Classify both endpoints of ``spec``.

    With ``method="auto"`` a special drift form detected on the DiffusionSpec selects
    a shortcut: ``b = s'/2`` uses the integrability of ``1/s`` at each end;
    a driftless diffusion on ``(0, inf)`` uses ``int_0^1 z s^-2``; the
    h-transform ``b = s/x`` on ``(0, inf)`` uses ``int_1^inf z s^-2``.  Any
    other spec, or ``method="general"``, walks the ladder on both sides.
    """
    if ladder is not None:
        c = ladder.anchor
    else:
        c = default_anchor(spec.interval) if anchor is None else anchor
    half_line = spec.interval.left == 0.0 and spec.interval.right == math.inf
    if method == "auto":
        if "half_s_prime" in spec.forms:
            return ExplosionReport(_half_s_prime_side(spec, c, "left"), _half_s_prime_side(spec, c, "right"), c)
        if half_line and "driftless" in spec.forms:
            return _driftless_half_line(spec, c)
        if half_line and "htransform" in spec.forms:
            return _htransform_half_line(spec, c)
    elif method != "general":
        raise ValueError("method must be 'auto' or 'general'")
    ladder = ladder or default_ladder(spec.interval, DEFAULT_DEPTH, anchor=c)
    return ExplosionReport(boundary_limit(spec, c, "left", ladder), boundary_limit(spec, c, "right", ladder), c)
