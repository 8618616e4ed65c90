"""
Backward-equation solvers on truncated intervals.

The survival function ``U(T, x) = P_x(S > T)`` solves

    U_T = 1/2 s^2 U_xx + b s U_x,      U(0, x) = 1,

and the truncated problems on ``(l_n, r_n)`` with zero lateral data give
``P_x(S_n > T)``, which increases to ``U`` as the ladder level grows.  When
``s'`` is available the equation is solved in Lamperti coordinates, where it
has unit diffusion and drift ``nu``; otherwise in the raw variable.

Meshes are uniform on a core window around the anchor and stretched
geometrically outside it, so deep ladder levels with enormous coordinate
ranges cost only logarithmically more nodes.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .model import DiffusionSpec, TruncationLadder, default_anchor, default_ladder
from .montecarlo import SurvivalCurve
from .transform import LampertiFrame

__all__ = [
    "PDEError",
    "InstabilityError",
    "MonotonicityError",
    "CoverageError",
    "TruncatedGrid",
    "ResolventSolution",
    "solve_truncated_cauchy",
    "minimal_survival",
    "solve_resolvent",
    "minimal_resolvent",
    "laplace_consistency",
]

CORE_WIDTH = 6.0
STRETCH = 1.08
BOUND_TOL = 1e-8
DEFAULT_LEVELS = 40


class PDEError(ArithmeticError):
    """Numerical failure of a finite-difference solve."""

    def __init__(self, message: str, **diagnostics):
        self.diagnostics = diagnostics
        if diagnostics:
            extra = ", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in diagnostics.items())
            message = f"{message} ({extra})"
        super().__init__(message)


class InstabilityError(PDEError):
    pass


class MonotonicityError(PDEError):
    pass


class CoverageError(PDEError, ValueError):
    pass


# -- meshes and coefficients ----------------------------------------------------


def _side(start: float, end: float, h: float, core: float, n_core: int) -> np.ndarray:
    """Points strictly after ``start`` up to and including ``end`` (either direction)."""
    sgn = 1.0 if end > start else -1.0
    dist = abs(end - start)
    if dist <= core:
        k = max(1, int(math.ceil(dist / h - 1e-9)))
        return start + sgn * dist * np.arange(1, k + 1) / k
    k = max(1, n_core)
    pts = list(start + sgn * core * np.arange(1, k + 1) / k)
    step = core / k
    pos = core
    while True:
        step *= STRETCH
        if pos + step >= dist:
            break
        pos += step
        pts.append(start + sgn * pos)
    # merge a sliver last cell into its neighbour
    if len(pts) > k and dist - pos < 0.5 * step / STRETCH:
        pts.pop()
    pts.append(end)
    return np.asarray(pts)


def _mesh(lo: float, hi: float, center: float, width: float, core_nodes: int) -> np.ndarray:
    """Mesh of ``[lo, hi]`` containing ``center``; ``core_nodes`` cells across ``center +- width``."""
    if not lo < center < hi:
        raise ValueError(f"mesh centre {center} outside ({lo}, {hi})")
    half = max(1, core_nodes // 2)
    h = width / half
    left = _side(center, lo, h, width, half)[::-1]
    right = _side(center, hi, h, width, half)
    return np.concatenate([left, [center], right])


class _Coordinates:
    """Computational coordinate ``z`` with operator ``D(z) u'' + A(z) u'``."""

    def __init__(self, spec: DiffusionSpec, ladder: TruncationLadder, coords: str = "auto",
                 frame: LampertiFrame | None = None):
        self.spec = spec
        self.center = ladder.anchor
        if coords == "auto":
            coords = "lamperti" if spec.has_s_deriv else "raw"
        if coords not in ("lamperti", "raw"):
            raise ValueError(f"unknown coordinates {coords!r}")
        self.lamperti = coords == "lamperti"
        if self.lamperti:
            if frame is None or frame.c != self.center:
                frame = LampertiFrame(spec, anchor=self.center, ladder=ladder)
            self.frame = frame
            self.scale = 1.0
        else:
            self.frame = None
            self.scale = abs(float(spec.s_fn(np.array([self.center]))[0]))

    def to_z(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.frame.h_array(x) if self.lamperti else x.copy()

    def to_x(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if not self.lamperti:
            return z.copy()
        lo, hi = self.frame.y_range
        return self.frame.theta_array(np.clip(z, lo, hi))

    def coefficients(self, z: np.ndarray, x: np.ndarray):
        if self.lamperti:
            return np.full(z.shape, 0.5), self.frame.sigma * self.spec.nu_fn(x)
        s = self.spec.s_fn(x)
        return 0.5 * s * s, self.spec.b_fn(x) * s

    def mesh(self, lo_x: float, hi_x: float, width: float, core_nodes: int):
        lo_z, hi_z = (float(v) for v in self.to_z(np.array([lo_x, hi_x])))
        z0 = 0.0 if self.lamperti else self.center
        z = _mesh(lo_z, hi_z, z0, width * self.scale, core_nodes)
        x = self.to_x(z)
        x[0], x[-1] = lo_x, hi_x
        x[np.searchsorted(z, z0)] = self.center
        return z, x


def _operator(z: np.ndarray, D: np.ndarray, A: np.ndarray):
    """Tridiagonal ``D u'' + A u'`` on interior nodes: (sub, diag, sup), upwinded where the cell Peclet exceeds 2."""
    hm = z[1:-1] - z[:-2]
    hp = z[2:] - z[1:-1]
    D, A = D[1:-1], A[1:-1]
    s = hm + hp
    sub = 2.0 * D / (hm * s)
    sup = 2.0 * D / (hp * s)
    diag = -2.0 * D / (hm * hp)
    peclet = np.abs(A) * np.maximum(hm, hp) / D
    up = peclet > 2.0
    # centered first derivative
    c_sub = -A * hp / (hm * s)
    c_dia = A * (hp - hm) / (hm * hp)
    c_sup = A * hm / (hp * s)
    # one-sided differences taken upstream of the drift
    pos = A > 0
    u_sub = np.where(pos, 0.0, -A / hm)
    u_dia = np.where(pos, -A / hp, A / hm)
    u_sup = np.where(pos, A / hp, 0.0)
    sub = sub + np.where(up, u_sub, c_sub)
    diag = diag + np.where(up, u_dia, c_dia)
    sup = sup + np.where(up, u_sup, c_sup)
    return sub, diag, sup, peclet, int(up.sum())


def _matvec(sub, diag, sup, u):
    out = diag * u
    out[1:] += sub[1:] * u[:-1]
    out[:-1] += sup[:-1] * u[1:]
    return out


def _banded(sub, diag, sup, alpha: float, shift: float = 1.0):
    """Banded form of ``shift*I - diag(alpha)*L``; ``alpha`` may vary by row."""
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), diag.shape)
    ab = np.zeros((3, diag.size))
    ab[0, 1:] = -alpha[:-1] * sup[:-1]
    ab[1] = shift - alpha * diag
    ab[2, :-1] = -alpha[1:] * sub[1:]
    return ab


def _level_bounds(spec: DiffusionSpec, n: int, ladder: TruncationLadder | None, xi: float | None,
                  bounds: tuple[float, float] | None):
    if ladder is None:
        anchor = default_anchor(spec.interval) if xi is None else float(xi)
        ladder = default_ladder(spec.interval, max(n, 1), anchor=anchor)
    if bounds is None:
        bounds = ladder.level(n)
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (spec.interval.contains(lo) and spec.interval.contains(hi) and lo < ladder.anchor < hi):
        raise ValueError(f"truncation ({lo}, {hi}) must lie in {spec.interval} around {ladder.anchor}")
    if ladder.left[-1] > lo or ladder.right[-1] < hi:
        ladder = _covering_ladder(spec, ladder.anchor, lo, hi)
    return ladder, lo, hi


def _covering_ladder(spec: DiffusionSpec, anchor: float, lo: float, hi: float) -> TruncationLadder:
    depth = 8
    while True:
        lad = default_ladder(spec.interval, depth, anchor=anchor)
        if lad.left[-1] <= lo and lad.right[-1] >= hi:
            return lad
        depth += 8
        if depth > 1100:
            raise ValueError(f"({lo}, {hi}) is not covered by any ladder level")


# -- truncated Cauchy problem ----------------------------------------------------


@dataclass
class TruncatedGrid:
    """Solution of the truncated backward equation at ladder level ``level``."""

    level: int
    nodes: np.ndarray
    coords: np.ndarray
    times: np.ndarray
    u: np.ndarray
    max_peclet: float = 0.0
    upwind_nodes: int = 0
    coordinates: str = "lamperti"

    def index_of(self, x: float) -> int:
        j = int(np.argmin(np.abs(self.nodes - x)))
        if not math.isclose(self.nodes[j], x, rel_tol=1e-12, abs_tol=1e-300):
            raise KeyError(f"x = {x} is not a mesh node")
        return j

    def at(self, x: float, T=None) -> np.ndarray:
        """``u(T, x)`` at a mesh node, for all time nodes or those in ``T``."""
        col = self.u[:, self.index_of(x)]
        if T is None:
            return col.copy()
        T = np.atleast_1d(np.asarray(T, dtype=float))
        idx = np.searchsorted(self.times, T - 1e-12 * np.maximum(1.0, T))
        if np.any(idx >= self.times.size) or not np.allclose(self.times[idx], T, rtol=1e-10, atol=1e-14):
            raise KeyError("requested horizons are not time nodes")
        return col[idx]

    def to_csv(self, stream=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "T", "u"])
        for k, t in enumerate(self.times):
            for j, x in enumerate(self.nodes):
                w.writerow([format(x, ".17g"), format(t, ".17g"), format(self.u[k, j], ".17g")])
        text = buf.getvalue()
        if stream is not None:
            stream.write(text)
        return text


def _time_nodes(T_max: float, K: int, extra) -> np.ndarray:
    t = np.linspace(0.0, T_max, K + 1)
    if extra is not None:
        extra = np.asarray(extra, dtype=float)
        t = np.union1d(t, extra[(extra > 0) & (extra <= T_max)])
        keep = np.concatenate([[True], np.diff(t) > 1e-12 * T_max])
        t = t[keep]
        t[-1] = T_max
    return t


def solve_truncated_cauchy(
    spec: DiffusionSpec,
    n: int,
    space_nodes: int = 800,
    time_nodes: int = 800,
    T_max: float = 1.0,
    *,
    ladder: TruncationLadder | None = None,
    xi: float | None = None,
    bounds: tuple[float, float] | None = None,
    T_grid=None,
    coordinates: str = "auto",
    initial: float = 1.0,
    _coords: _Coordinates | None = None,
) -> TruncatedGrid:
    """Solve the backward equation on ladder level ``n`` with absorbing ends.

    Parameters
    ----------
    spec : DiffusionSpec
    n : int
        Ladder level; ignored for the interval when ``bounds`` is given.
    space_nodes : int
        Number of uniform cells across the core window ``+- 6 sqrt(T_max)``
        around the anchor; the mesh is stretched by 8% per cell outside it.
    time_nodes : int
        Number of uniform time steps; horizons in ``T_grid`` are added as nodes.
    T_max : float
    ladder, xi, bounds
        Truncation ladder (default: the standard ladder anchored at ``xi``)
        or explicit ``(l_n, r_n)``.
    coordinates : {"auto", "lamperti", "raw"}
    initial : float
        Initial value in the interior (1 for survival).

    Returns
    -------
    TruncatedGrid

    Raises
    ------
    InstabilityError
        If any value leaves ``[-1e-8, initial + 1e-8]``.
    """
    if T_max <= 0 or space_nodes < 2 or time_nodes < 1:
        raise ValueError("need T_max > 0, space_nodes >= 2 and time_nodes >= 1")
    ladder, lo, hi = _level_bounds(spec, n, ladder, xi, bounds)
    cs = _coords if _coords is not None else _Coordinates(spec, ladder, coordinates)
    z, x = cs.mesh(lo, hi, CORE_WIDTH * math.sqrt(T_max), space_nodes)
    D, A = cs.coefficients(z, x)
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(A)) and np.all(D > 0)):
        raise InstabilityError("coefficients are not finite and positive on the mesh", level=n)
    sub, diag, sup, peclet, n_up = _operator(z, D, A)
    times = _time_nodes(T_max, time_nodes, T_grid)

    u = np.zeros((times.size, z.size))
    u[0, :] = initial
    v = np.full(z.size - 2, float(initial))
    cache: dict = {}
    courant = np.abs(A[1:-1]) / np.minimum(np.diff(z)[:-1], np.diff(z)[1:])

    def implicit(v, dt):
        key = ("ie", dt)
        if key not in cache:
            cache[key] = _banded(sub, diag, sup, dt)
        return solve_banded((1, 1), cache[key], v, check_finite=False)

    def crank_nicolson(v, dt):
        # rows with advective Courant number above 1 are taken fully implicit
        theta = np.where(dt * courant > 1.0, 1.0, 0.5)
        key = ("cn", dt)
        if key not in cache:
            cache[key] = _banded(sub, diag, sup, theta * dt)
        rhs = v + (1.0 - theta) * dt * _matvec(sub, diag, sup, v)
        return solve_banded((1, 1), cache[key], rhs, check_finite=False)

    min_h = float(np.min(np.diff(z)))
    for k in range(1, times.size):
        dt = float(times[k] - times[k - 1])
        if k == 1:
            v = implicit(implicit(v, 0.5 * dt), 0.5 * dt)
        else:
            v = crank_nicolson(v, dt)
        if not (np.all(v >= -BOUND_TOL) and np.all(v <= initial + BOUND_TOL)):
            raise InstabilityError(
                "truncated solution left [0, 1]",
                level=n, step=k, min=float(v.min()), max=float(v.max()),
                max_peclet=float(peclet.max()), cfl=float(np.max(D) * dt / min_h**2),
            )
        u[k, 1:-1] = v
        cache = {key: val for key, val in cache.items() if key[1] == dt}
    return TruncatedGrid(
        level=n, nodes=x, coords=z, times=times, u=u,
        max_peclet=float(peclet.max()) if peclet.size else 0.0, upwind_nodes=n_up,
        coordinates="lamperti" if cs.lamperti else "raw",
    )


def minimal_survival(
    spec: DiffusionSpec,
    xi: float,
    T_grid,
    ladder: TruncationLadder | None = None,
    conv_tol: float = 1e-4,
    *,
    space_nodes: int = 800,
    time_nodes: int = 800,
    mono_tol: float = 1e-3,
    min_level: int = 2,
    coordinates: str = "auto",
) -> SurvivalCurve:
    """Survival curve as the increasing limit of truncated solutions.

    Levels are solved in turn until the largest change over ``T_grid`` falls
    below ``conv_tol``.  ``info`` records the last level, the final increment,
    whether the tolerance was met and the last :class:`TruncatedGrid`.

    Raises
    ------
    MonotonicityError
        If a level decreases the estimate by more than ``mono_tol``.
    """
    T_grid = np.atleast_1d(np.asarray(T_grid, dtype=float))
    if np.any(T_grid <= 0):
        raise ValueError("horizons must be positive")
    if ladder is None:
        ladder = default_ladder(spec.interval, DEFAULT_LEVELS, anchor=xi)
    lo1, hi1 = ladder.level(1)
    if not lo1 < xi < hi1:
        raise ValueError(f"xi = {xi} is not inside the first ladder level ({lo1}, {hi1})")
    if xi != ladder.anchor:
        ladder = TruncationLadder(anchor=float(xi), left=ladder.left, right=ladder.right)
    cs = _Coordinates(spec, ladder, coordinates)
    T_max = float(T_grid.max())
    prev = None
    history = []
    increment = math.inf
    for n in range(1, ladder.depth + 1):
        g = solve_truncated_cauchy(spec, n, space_nodes, time_nodes, T_max, ladder=ladder,
                                   T_grid=T_grid, _coords=cs)
        cur = g.at(xi, T_grid)
        history.append(cur)
        if prev is not None:
            delta = cur - prev
            if np.min(delta) < -mono_tol:
                raise MonotonicityError("truncated solutions decreased between levels",
                                        level=n, decrease=float(-np.min(delta)))
            increment = float(np.max(np.abs(delta)))
            if n >= min_level and increment < conv_tol:
                break
        prev = cur
    est = np.clip(history[-1], 0.0, 1.0)
    return SurvivalCurve(
        T=T_grid, estimate=est, stderr=np.full(T_grid.shape, np.nan), method="pde", n_paths=0,
        censored_fraction=np.zeros(T_grid.shape), level_estimates=np.array(history),
        info={"level": n, "increment": increment, "converged": increment < conv_tol,
              "max_peclet": g.max_peclet, "upwind_nodes": g.upwind_nodes, "coordinates": g.coordinates,
              "grid": g},
    )


# -- resolvent ------------------------------------------------------------------


@dataclass
class ResolventSolution:
    lam: float
    level: int
    nodes: np.ndarray
    values: np.ndarray
    coords: np.ndarray = field(repr=False, default=None)

    def at(self, x: float) -> float:
        j = int(np.argmin(np.abs(self.nodes - x)))
        if not math.isclose(self.nodes[j], x, rel_tol=1e-12, abs_tol=1e-300):
            raise KeyError(f"x = {x} is not a mesh node")
        return float(self.values[j])


def solve_resolvent(
    spec: DiffusionSpec,
    lam: float,
    n: int,
    space_nodes: int = 800,
    *,
    ladder: TruncationLadder | None = None,
    xi: float | None = None,
    bounds: tuple[float, float] | None = None,
    coordinates: str = "auto",
    _coords: _Coordinates | None = None,
) -> ResolventSolution:
    """Solve ``1/2 s^2 u'' + b s u' - lam u + 1 = 0`` on level ``n`` with zero end values.

    The core window spans ``+- 6 max(1, 1/sqrt(2 lam))`` around the anchor.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    ladder, lo, hi = _level_bounds(spec, n, ladder, xi, bounds)
    cs = _coords if _coords is not None else _Coordinates(spec, ladder, coordinates)
    z, x = cs.mesh(lo, hi, CORE_WIDTH * max(1.0, 1.0 / math.sqrt(2.0 * lam)), space_nodes)
    D, A = cs.coefficients(z, x)
    sub, diag, sup, peclet, _ = _operator(z, D, A)
    ab = _banded(sub, diag, sup, 1.0, shift=lam)
    rhs = np.ones(z.size - 2)
    try:
        with np.errstate(all="raise"):
            v = solve_banded((1, 1), ab, rhs)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        raise InstabilityError("singular resolvent system", level=n) from exc
    if not (np.all(v >= -BOUND_TOL) and np.all(v <= 1.0 / lam + BOUND_TOL)):
        raise InstabilityError("resolvent left [0, 1/lambda]", level=n, min=float(v.min()), max=float(v.max()),
                               max_peclet=float(peclet.max()))
    values = np.zeros(z.size)
    values[1:-1] = v
    return ResolventSolution(lam=float(lam), level=n, nodes=x, values=values, coords=z)


def minimal_resolvent(
    spec: DiffusionSpec,
    xi: float,
    lam: float,
    ladder: TruncationLadder | None = None,
    conv_tol: float = 1e-5,
    *,
    space_nodes: int = 800,
    mono_tol: float = 1e-3,
    coordinates: str = "auto",
) -> tuple[float, dict]:
    """Resolvent at ``xi`` as the increasing limit over ladder levels; returns ``(value, info)``."""
    if ladder is None:
        ladder = default_ladder(spec.interval, DEFAULT_LEVELS, anchor=xi)
    elif xi != ladder.anchor:
        ladder = TruncationLadder(anchor=float(xi), left=ladder.left, right=ladder.right)
    cs = _Coordinates(spec, ladder, coordinates)
    prev, increment, levels = None, math.inf, []
    for n in range(1, ladder.depth + 1):
        cur = solve_resolvent(spec, lam, n, space_nodes, ladder=ladder, _coords=cs).at(xi)
        levels.append(cur)
        if prev is not None:
            if cur < prev - mono_tol:
                raise MonotonicityError("resolvent decreased between levels", level=n, decrease=prev - cur)
            increment = abs(cur - prev)
            if n >= 2 and increment < conv_tol:
                break
        prev = cur
    return levels[-1], {"level": n, "increment": increment, "converged": increment < conv_tol,
                        "levels": np.array(levels)}


def laplace_consistency(curve: SurvivalCurve, u_hat: float, lam: float, tol: float = 1e-2) -> float:
    """``|int_0^T e^{-lam T} U dT - u_hat|`` by the trapezoid rule on the curve's grid.

    ``U(0) = 1`` is prepended when the grid starts after zero.  The neglected
    tail is at most ``exp(-lam T_max) U(T_max) / lam``; a :class:`CoverageError`
    is raised when that bound reaches ``0.1 * tol``.
    """
    T = np.asarray(curve.T, dtype=float)
    U = np.asarray(curve.estimate, dtype=float)
    if T[0] > 0:
        T, U = np.concatenate([[0.0], T]), np.concatenate([[1.0], U])
    tail = math.exp(-lam * T[-1]) * U[-1] / lam
    if tail >= 0.1 * tol:
        raise CoverageError("curve does not reach far enough in T", tail_bound=tail, T_max=float(T[-1]))
    quad = float(np.trapezoid(np.exp(-lam * T) * U, T))
    return abs(quad - u_hat)
