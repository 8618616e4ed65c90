"""
Lamperti transform, Doss-Sussmann paths and change-of-measure weights.

With ``h_c(x) = int_c^x 1/|s(z)| dz`` the process ``Y = h_c(X)`` has unit
dispersion:

    dY = dB + sigma * (b - s'/2)(theta_c(Y)) dt,     B = sigma * W,

where ``sigma = sign(s)`` and ``theta_c`` is the inverse of ``h_c``.  Using
``|s|`` keeps ``h_c`` increasing for negative dispersions; the price is the
sign flip of the driving Brownian motion, which does not change any law.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import integrate, optimize

from . import expr as ex
from ._tables import HermiteTable, cumulative_integral, ladder_mesh
from .feller import endpoint_integral
from .model import (
    DiffusionSpec,
    MissingDerivativeError,
    TruncationLadder,
    antiderivative_F,
    default_anchor,
    default_ladder,
)

__all__ = [
    "LampertiFrame",
    "WeightedSample",
    "DDSPath",
    "lamperti_map",
    "lamperti_inverse",
    "transformed_drift",
    "dds_path",
    "feynman_kac_weight",
    "girsanov_weight",
]

TABLE_DEPTH = 16


class LampertiFrame:
    """Lamperti coordinates of a spec around an anchor ``c``.

    Scalar maps use adaptive quadrature and root finding; the ``*_array``
    methods use cubic Hermite tables built over ladder level ``table_depth``
    (exact nodal slopes ``1/|s|`` and ``|s|``), and return NaN outside it.
    """

    def __init__(self, spec: DiffusionSpec, anchor: float | None = None, table_depth: int = TABLE_DEPTH,
                 ladder: TruncationLadder | None = None):
        self.spec = spec
        self.c = default_anchor(spec.interval) if anchor is None else float(anchor)
        if not spec.interval.contains(self.c):
            raise ValueError(f"anchor {self.c} outside {spec.interval}")
        self.sigma = spec.s_sign
        self.ladder = ladder if ladder is not None else default_ladder(spec.interval, table_depth, anchor=self.c)

    # scalar maps -----------------------------------------------------------

    def _inv_abs_s(self, z: float) -> float:
        return 1.0 / abs(float(self.spec.s_fn(np.array([z]))[0]))

    def _segment(self, a: float, b: float) -> float:
        val, _ = integrate.quad(self._inv_abs_s, a, b, epsabs=1e-13, epsrel=1e-12, limit=200)
        return float(val)

    def _breaks_toward(self, x: float) -> list[float]:
        """Ladder points between the anchor and ``x``, extended geometrically past the ladder."""
        side = list(self.ladder.right if x > self.c else self.ladder.left)
        end = self.spec.interval.right if x > self.c else self.spec.interval.left
        beyond = (lambda p: p >= x) if x > self.c else (lambda p: p <= x)
        pts = []
        for p in side:
            if beyond(p):
                return pts
            pts.append(p)
        p = side[-1]
        while True:
            p = 0.5 * (p + end) if math.isfinite(end) else p + max(abs(p - self.c), abs(p))
            if beyond(p) or p == end:
                return pts
            pts.append(p)

    def h(self, x: float) -> float:
        if not self.spec.interval.contains(x):
            raise ValueError(f"x = {x} outside {self.spec.interval}")
        if x == self.c:
            return 0.0
        nodes = [self.c] + self._breaks_toward(x) + [x]
        return math.fsum(self._segment(a, b) for a, b in zip(nodes, nodes[1:]))

    @cached_property
    def transformed_interval(self) -> tuple[float, float]:
        """``(h_c(left), h_c(right))``, with ``-inf``/``inf`` where ``1/s`` is not integrable."""
        iv = self.spec.interval
        lo = endpoint_integral(self._inv_abs_s, self.c, iv.left, rtol=1e-13)
        hi = endpoint_integral(self._inv_abs_s, self.c, iv.right, rtol=1e-13)
        left = -lo[1] if lo[0] == "finite" else -math.inf
        right = hi[1] if hi[0] == "finite" else math.inf
        return left, right

    def theta(self, y: float) -> float:
        if y == 0.0:
            return self.c
        lo_y, hi_y = self.transformed_interval
        if not lo_y < y < hi_y:
            raise ValueError(f"y = {y} outside the transformed interval ({lo_y}, {hi_y})")
        # bracket by walking the ladder outward
        iv = self.spec.interval
        a = self.c
        side = self.ladder.right if y > 0 else self.ladder.left
        b = None
        for p in side:
            if (self.h(p) - y) * (1 if y > 0 else -1) >= 0:
                b = p
                break
            a = p
        if b is None:
            end = iv.right if y > 0 else iv.left
            p = side[-1]
            for _ in range(2000):
                p = 0.5 * (p + end) if math.isfinite(end) else p + max(abs(p - self.c), abs(p))
                if not iv.contains(p) or not math.isfinite(p):
                    break
                if (self.h(p) - y) * (1 if y > 0 else -1) >= 0:
                    b = p
                    break
                a = p
            if b is None:
                raise ValueError(f"y = {y} is not resolvable inside {iv}")
        lo, hi = min(a, b), max(a, b)
        return optimize.brentq(lambda x: self.h(x) - y, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)

    def nu(self, y: float) -> float:
        x = self.theta(y)
        p = self.spec.params
        if self.spec.s_deriv is None:
            raise MissingDerivativeError("transformed drift needs s'")
        return self.sigma * (ex.evaluate(self.spec.b, x, p) - 0.5 * ex.evaluate(self.spec.s_deriv, x, p))

    # vectorized tables ------------------------------------------------------

    @cached_property
    def _tables(self):
        nodes = ladder_mesh(self.ladder.breakpoints(), per_gap=200)
        inv_abs = lambda z: 1.0 / np.abs(self.spec.s_fn(z))
        h_nodes = cumulative_integral(inv_abs, nodes, origin=int(np.searchsorted(nodes, self.c)))
        # near a finite end the table can saturate in floating point; keep strictly increasing pairs
        keep = np.isfinite(h_nodes) & (h_nodes > np.concatenate([[-np.inf], np.maximum.accumulate(h_nodes)[:-1]]))
        nodes, h_nodes = nodes[keep], h_nodes[keep]
        abs_s = np.abs(self.spec.s_fn(nodes))
        h_tab = HermiteTable(nodes, h_nodes, 1.0 / abs_s)
        theta_tab = HermiteTable(h_nodes, nodes, abs_s)
        return h_tab, theta_tab

    @property
    def x_range(self) -> tuple[float, float]:
        return self._tables[0].lo, self._tables[0].hi

    @property
    def y_range(self) -> tuple[float, float]:
        return self._tables[1].lo, self._tables[1].hi

    def h_array(self, x):
        return self._tables[0](x)

    def theta_array(self, y):
        return self._tables[1](y)

    def nu_array(self, y):
        """Drift of ``Y`` as a function of ``y`` (vectorized)."""
        return self.sigma * self.spec.nu_fn(self.theta_array(y))


def lamperti_map(frame: LampertiFrame, x: float) -> float:
    """``h_c(x) = int_c^x 1/|s|`` by adaptive quadrature."""
    return frame.h(x)


def lamperti_inverse(frame: LampertiFrame, y: float) -> float:
    """``theta_c(y)``: bracketed root of ``h_c(x) = y``."""
    return frame.theta(y)


def transformed_drift(frame: LampertiFrame, y: float) -> float:
    """Drift of the unit-dispersion process at ``y``: ``sigma (b - s'/2)(theta_c(y))``."""
    return frame.nu(y)


# -- Doss-Sussmann -----------------------------------------------------------------


@dataclass(frozen=True)
class DDSPath:
    """Output of :func:`dds_path`.

    ``times``/``states`` stop at the last grid point before the exit;
    ``exit_index`` is the first grid index outside the domain (``None`` if
    the path survives) and ``exit_time`` the localized explosion time.
    """

    times: np.ndarray
    states: np.ndarray
    subindex: np.ndarray
    exit_index: int | None
    exit_time: float


def dds_path(
    frame: LampertiFrame,
    mu: Callable[[float], float],
    times: np.ndarray,
    brownian: np.ndarray,
    xi: float,
    bisection_depth: int = 20,
) -> DDSPath:
    """Pathwise solution ``X(t) = vartheta_{C(t)}(W(t))`` on a discrete path.

    ``vartheta_C(w) = theta(h(C) + sigma w)`` inverts the signed Lamperti map
    anchored at ``C``; ``C' = mu(vartheta_C(W)) s(C)`` is advanced by
    classical RK4 with ``W`` interpolated linearly inside each step.  The
    path stops at the first grid point whose ``h(C) + sigma W`` leaves the
    transformed interval; the crossing is then bisected ``bisection_depth``
    times.

    Parameters
    ----------
    mu : callable
        ``b - s'/2`` lifted to the state space.
    times, brownian : array
        Grid and Brownian values, ``brownian[0] == 0``.
    """
    sigma = frame.sigma
    lo_y, hi_y = frame.transformed_interval
    times = np.asarray(times, dtype=float)
    brownian = np.asarray(brownian, dtype=float)

    def theta_at(y):
        x = float(frame.theta_array(np.array([y]))[0])
        return x if not math.isnan(x) else frame.theta(y)

    def inside(a, w):
        y = a + sigma * w
        return lo_y < y < hi_y

    # work with A = h(C): A' = h'(C) C' = sigma mu(X)
    def rate(a, w):
        return sigma * mu(theta_at(a + sigma * w))

    def rk4(a, t0, t1, w0, w1):
        dt = t1 - t0
        wm = 0.5 * (w0 + w1)
        k1 = rate(a, w0)
        k2 = rate(a + 0.5 * dt * k1, wm)
        k3 = rate(a + 0.5 * dt * k2, wm)
        k4 = rate(a + dt * k3, w1)
        return a + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0

    a = float(frame.h_array(np.array([xi]))[0])
    subs = [xi]
    states = [xi]
    exit_index = None
    exit_time = math.inf
    for i in range(1, len(times)):
        t0, t1, w0, w1 = times[i - 1], times[i], brownian[i - 1], brownian[i]
        try:
            a_new = rk4(a, t0, t1, w0, w1)
            ok = math.isfinite(a_new) and inside(a_new, w1)
        except (ValueError, FloatingPointError):
            ok = False
        if not ok:
            exit_index = i
            lo_t, hi_t = 0.0, 1.0
            for _ in range(bisection_depth):
                mid = 0.5 * (lo_t + hi_t)
                tm = t0 + mid * (t1 - t0)
                wm = w0 + mid * (w1 - w0)
                try:
                    am = rk4(a, t0, tm, w0, wm)
                    good = math.isfinite(am) and inside(am, wm)
                except (ValueError, FloatingPointError):
                    good = False
                lo_t, hi_t = (mid, hi_t) if good else (lo_t, mid)
            exit_time = t0 + hi_t * (t1 - t0)
            break
        a = a_new
        subs.append(theta_at(a))
        states.append(theta_at(a + sigma * w1))
    n = len(states)
    return DDSPath(times[:n].copy(), np.array(states), np.array(subs), exit_index, exit_time)


# -- weights -----------------------------------------------------------------------


@dataclass(frozen=True)
class WeightedSample:
    terminal: float
    weight: float
    survived: bool
    int_b_dW: float = 0.0
    int_b2_dt: float = 0.0
    int_V_dt: float = 0.0
    log_weight: float = 0.0


def _F_difference(spec: DiffusionSpec, xi: float, x: float) -> float:
    if spec.F_exact is not None:
        p = spec.params
        return ex.evaluate(spec.F_exact, x, p) - ex.evaluate(spec.F_exact, xi, p)
    return antiderivative_F(spec, xi, x)


def feynman_kac_weight(spec: DiffusionSpec, times, states, survived: bool) -> WeightedSample:
    """``exp(F(X(T)) - F(xi) - int_0^T V(X) dt) 1{survived}`` for a natural-scale path.

    ``int V dt`` uses the trapezoidal rule on the path grid.
    """
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=float)
    if not survived:
        return WeightedSample(float(states[-1]), 0.0, False, log_weight=-math.inf)
    V = spec.V_fn(states)
    if np.any(np.isnan(V)):
        raise ex.DomainError(spec.b, "potential V is singular along the path")
    int_V = float(integrate.trapezoid(V, times))
    log_w = _F_difference(spec, float(states[0]), float(states[-1])) - int_V
    return WeightedSample(float(states[-1]), math.exp(log_w), True, int_V_dt=int_V, log_weight=log_w)


def girsanov_weight(spec: DiffusionSpec, times, states, increments, survived: bool) -> WeightedSample:
    """``exp(int b dW - 1/2 int b^2 dt) 1{survived}`` with left-point (Ito) sums.

    ``increments[i]`` is the Brownian increment over ``[times[i], times[i+1]]``.
    """
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=float)
    dW = np.asarray(increments, dtype=float)
    if not survived:
        return WeightedSample(float(states[-1]), 0.0, False, log_weight=-math.inf)
    b = spec.b_fn(states[:-1])
    if np.any(np.isnan(b)):
        raise ex.DomainError(spec.b, "b is singular along the path")
    dt = np.diff(times)
    ib = float(np.sum(b * dW))
    ib2 = float(np.sum(b * b * dt))
    log_w = ib - 0.5 * ib2
    return WeightedSample(float(states[-1]), math.exp(log_w), True, int_b_dW=ib, int_b2_dt=ib2, log_weight=log_w)
