"""
Monte Carlo estimation of the survival function ``P_xi(S > T)``.

Paths are advanced in batches with per-path clocks.  The explosion time is
approached through the truncation ladder: the exit time of every level is
recorded, so ``P(S_n > T)`` is available for all ``n`` from one set of
paths, and a path that leaves the deepest level ``N`` is declared exploded
at that exit.  If it left ``N`` without reaching a finite boundary of the
simulated coordinate the explosion is flagged as level-censored.

Schemes
-------
``euler_lamperti``
    Euler on ``Y = h_xi(X)`` (unit dispersion), mapped back through tables.
``dds_exact``
    The Doss-Sussmann form ``Y = A + B`` with the random ODE for ``A``
    integrated by Heun's rule; exact when ``b = s'/2``.
``euler_raw``
    Euler-Maruyama on ``dX = s (dW + b dt)``; needs no ``s'``.
``timechange_natural``
    Driftless diffusions only: ``X(t) = xi + B(A(t))`` with the inverse of
    ``Gamma(theta) = int s^-2(xi + B) dtheta``.

Crossings inside a step are tested with the Brownian-bridge probability
``exp(-2 d0 d1 / (var dt))``, one uniform per side shared by all levels so
the level exits stay nested.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import expr as ex
from . import rng
from ._tables import HermiteTable, cumulative_integral, ladder_mesh
from .model import DiffusionSpec, MissingDerivativeError, ModelError, TruncationLadder, default_ladder
from .transform import LampertiFrame

__all__ = [
    "SCHEMES",
    "DEFAULT_LEVELS",
    "SimConfig",
    "PathSample",
    "SurvivalCurve",
    "SchemeUnavailableError",
    "simulate_path",
    "simulate_natural_scale",
    "estimate_survival_direct",
    "estimate_survival_feynman_kac",
    "companion_terminal_values",
    "default_threads",
]

SCHEMES = ("euler_lamperti", "dds_exact", "euler_raw", "timechange_natural")
DEFAULT_LEVELS = 12
WEIGHT_EXPONENT_LIMIT = 700.0
CHUNK = 16384
_LANE_NORMAL, _LANE_UP, _LANE_LO = 0, 1, 2
_P_MIN = 1e-17  # below the smallest uniform the generator can return
TABLE_EXTRA_LEVELS = 40
_Q_MAX = -0.5 * math.log(_P_MIN)


class SchemeUnavailableError(ModelError):
    """The requested scheme cannot be used for this spec."""


def default_threads() -> int:
    """Worker count from ``EXPLOSIONTIME_THREADS`` (default 1)."""
    raw = os.environ.get("EXPLOSIONTIME_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class SimConfig:
    """Simulation controls.

    Attributes
    ----------
    step : float
        Base time step.  With ``euler_raw`` it halves at every deeper ladder
        level.  For state-dependent drifts it is further capped by
        ``gap_factor * (room/diffusion)**2``, by the drift slope and by the
        drift size, where ``room`` is the distance to the barrier two
        levels out; steps are rounded down to dyadic fractions of ``step``.
    ladder : TruncationLadder or None
        ``None`` builds the default ladder of depth ``DEFAULT_LEVELS``
        anchored at ``xi``.
    max_refine : int
        Largest number of halvings of ``step``.
    threads : int or None
        Worker threads; ``None`` reads ``EXPLOSIONTIME_THREADS``.
    """

    step: float = 2.0**-6
    n_paths: int = 10_000
    seed: int = 0
    ladder: TruncationLadder | None = None
    scheme: str = "euler_lamperti"
    T_grid: tuple = (1.0,)
    gap_factor: float = 1.0 / 16.0
    max_refine: int = 30
    threads: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "T_grid", tuple(float(t) for t in np.atleast_1d(self.T_grid)))
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        T = np.array(self.T_grid)
        if T.size == 0 or T[0] <= 0 or np.any(np.diff(T) <= 0):
            raise ValueError("T_grid must be positive and strictly increasing")
        if not 0 < self.gap_factor <= 1:
            raise ValueError("gap_factor must lie in (0, 1]")


@dataclass
class PathSample:
    """A single simulated path.

    ``explosion_time`` is ``inf`` when the path survives to ``T_grid[-1]``;
    ``level_exit_times[n-1]`` is the exit time of ladder level ``n``.
    Weight ingredients are accumulated on the same grid as the state.
    """

    times: np.ndarray
    states: np.ndarray
    brownian: np.ndarray
    exploded: bool
    explosion_time: float
    censored: bool
    levels_exited: int
    level_exit_times: np.ndarray
    int_b_dW: float = 0.0
    int_b2_dt: float = 0.0
    int_V_dt: float = 0.0


@dataclass
class SurvivalCurve:
    """Survival estimates on a grid of horizons."""

    T: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    method: str
    n_paths: int
    censored_fraction: np.ndarray
    n_eff: np.ndarray | None = None
    excluded: int = 0
    level_estimates: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=float)
        self.estimate = np.asarray(self.estimate, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)
        self.censored_fraction = np.broadcast_to(np.asarray(self.censored_fraction, dtype=float), self.T.shape).copy()
        if self.n_eff is None:
            self.n_eff = np.full(self.T.shape, float(self.n_paths))

    def value_at(self, T: float) -> float:
        idx = np.nonzero(np.isclose(self.T, T, rtol=1e-12, atol=0.0))[0]
        if idx.size == 0:
            raise KeyError(f"T = {T} not on the curve grid")
        return float(self.estimate[idx[0]])

    def stderr_at(self, T: float) -> float:
        idx = np.nonzero(np.isclose(self.T, T, rtol=1e-12, atol=0.0))[0]
        if idx.size == 0:
            raise KeyError(f"T = {T} not on the curve grid")
        return float(self.stderr[idx[0]])

    def rows(self):
        for i in range(self.T.size):
            yield (self.T[i], self.estimate[i], self.stderr[i], self.method, self.n_paths, self.censored_fraction[i])

    def to_csv(self, stream=None, comment: str | None = None) -> str:
        """Write ``T, estimate, stderr, method, n_paths, censored_fraction`` with 17 significant digits."""
        buf = io.StringIO()
        if comment:
            for line in comment.splitlines():
                buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["T", "estimate", "stderr", "method", "n_paths", "censored_fraction"])
        for T, est, se, method, n, cf in self.rows():
            w.writerow([_fmt(T), _fmt(est), _fmt(se), method, n, _fmt(cf)])
        text = buf.getvalue()
        if stream is not None:
            stream.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "SurvivalCurve":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        reader = csv.DictReader(lines)
        rows = list(reader)
        if not rows:
            raise ValueError("empty survival curve")
        return cls(
            T=[float(r["T"]) for r in rows],
            estimate=[float(r["estimate"]) for r in rows],
            stderr=[float(r["stderr"]) for r in rows],
            method=rows[0]["method"],
            n_paths=int(rows[0]["n_paths"]),
            censored_fraction=[float(r["censored_fraction"]) for r in rows],
        )


def _fmt(x) -> str:
    return format(float(x), ".17g")


# -- engine --------------------------------------------------------------------------


@dataclass
class _Batch:
    explosion_time: np.ndarray
    censored: np.ndarray
    level_exit: np.ndarray
    x_at_T: np.ndarray
    intV_at_T: np.ndarray
    ib_at_T: np.ndarray
    ib2_at_T: np.ndarray
    frozen: np.ndarray
    side: np.ndarray  # +1 / -1: side of the explosion, 0 when unknown or none
    trace: tuple | None = None


def _extended_ladder(ladder: TruncationLadder, interval, extra: int) -> TruncationLadder:
    """``ladder`` continued by ``extra`` levels with the default approach rule."""
    def more(points, end):
        pts = list(points)
        c = ladder.anchor
        for _ in range(extra):
            p = pts[-1]
            if math.isfinite(end):
                q = end - (end - p) / 2.0
            else:
                q = p + math.copysign(max(abs(p - c), abs(p)), end)
            if q == p or not math.isfinite(q) or (math.isfinite(end) and abs(end - q) <= 1e-9 * max(1.0, abs(end))):
                break
            pts.append(q)
        return tuple(pts)

    return TruncationLadder(ladder.anchor, more(ladder.left, interval.left), more(ladder.right, interval.right))


class _Engine:
    """Vectorized path engine for one ``(spec, xi, config)``.

    ``companion=True`` simulates the driftless companion ``dX = s dW``
    instead of the model itself.

    A path explodes when it crosses an *outer* boundary: the boundary of the
    simulated coordinate itself where that is finite, else the deepest
    ladder level on that side (a level-censored explosion).
    """

    def __init__(self, spec: DiffusionSpec, xi: float, config: SimConfig, companion: bool = False,
                 want_V: bool = False, want_b: bool = False):
        if not spec.interval.contains(xi):
            raise ModelError(f"xi = {xi} outside {spec.interval}")
        self.spec, self.xi, self.cfg, self.companion = spec, float(xi), config, companion
        self.want_V, self.want_b = want_V, want_b
        lad = config.ladder if config.ladder is not None else default_ladder(spec.interval, DEFAULT_LEVELS, anchor=xi)
        if not lad.left[0] < xi < lad.right[0]:
            raise ModelError(f"xi = {xi} must lie inside the first ladder level {lad.level(1)}")
        self.ladder = lad
        self.N = lad.depth
        self.T = np.array(config.T_grid)
        scheme = config.scheme
        if scheme == "timechange_natural" and not (companion or spec.is_driftless()):
            raise SchemeUnavailableError("timechange_natural needs a driftless spec (b = 0)")
        if scheme in ("euler_lamperti", "dds_exact") and not spec.has_s_deriv:
            raise SchemeUnavailableError(f"{scheme} needs s' (declare s differentiable)")
        if want_V and not spec.has_s_deriv:
            raise MissingDerivativeError("the potential V needs s'")
        self.lamperti = scheme in ("euler_lamperti", "dds_exact")
        self.natural = scheme == "timechange_natural"
        if self.lamperti:
            wide = _extended_ladder(lad, spec.interval, TABLE_EXTRA_LEVELS)
            self.frame = LampertiFrame(spec, xi, ladder=wide)
            self.sigma = self.frame.sigma
            L = self.frame.h_array(np.array(lad.left))
            R = self.frame.h_array(np.array(lad.right))
            lo_true, hi_true = self.frame.transformed_interval
            self.y0 = 0.0
        else:
            self.sigma = 1.0
            L, R = np.array(lad.left), np.array(lad.right)
            lo_true, hi_true = spec.interval.left, spec.interval.right
            self.y0 = self.xi
        self.L, self.R = np.asarray(L, float), np.asarray(R, float)
        self.L_asc = self.L[::-1].copy()
        self.lo_true, self.hi_true = lo_true, hi_true
        self.lo_censor, self.hi_censor = not math.isfinite(lo_true), not math.isfinite(hi_true)
        self.lo_out = self.L[-1] if self.lo_censor else lo_true
        self.hi_out = self.R[-1] if self.hi_censor else hi_true
        # sorted barriers: ladder levels then the outer boundary when it lies beyond level N
        self.U = self.R if self.hi_censor else np.append(self.R, self.hi_out)
        self.D = self.L_asc if self.lo_censor else np.insert(self.L_asc, 0, self.lo_out)
        # barriers one level out, for step control; past a censoring level use a virtual one further out
        def beyond(P):
            return P[-1] + (P[-1] - (P[-2] if P.size > 1 else (self.y0 if self.natural or not self.lamperti else 0.0)))
        self.Ub = np.append(self.R, beyond(self.R) if self.hi_censor else self.hi_out)
        self.Db = np.append(self.L, beyond(self.L) if self.lo_censor else self.lo_out)
        self.const_drift = None
        self.refine_gap = self._drift_varies()
        if not self.refine_gap and not self.natural:
            self.const_drift = float(self.drift(np.array([self.y0]))[0])

    # coefficients in the simulated coordinate --------------------------------

    def to_x(self, y):
        if not self.lamperti:
            return y
        # between the table edge and a finite boundary the inverse is pinned to the edge
        lo, hi = self.frame.y_range
        inside = (y > self.lo_true) & (y < self.hi_true)
        return self.frame.theta_array(np.where(inside, np.clip(y, lo, hi), y))

    def drift(self, y):
        if self.const_drift is not None:
            return np.full_like(y, self.const_drift)
        if self.natural:
            return np.zeros_like(y)
        if self.lamperti:
            x = self.to_x(y)
            if self.companion:
                return -0.5 * self.sigma * self.spec.s_prime_fn(x)
            return self.sigma * self.spec.nu_fn(x)
        if self.companion:
            return np.zeros_like(y)
        return self.spec.s_fn(y) * self.spec.b_fn(y)

    def drift_slope(self, y, room):
        """``|d drift / dy|`` by a central difference over a fraction of the room."""
        h = np.minimum(1e-4 * room, 1e-3 * (1.0 + np.abs(y)))
        with np.errstate(all="ignore"):
            g = np.abs(self.drift(y + h) - self.drift(y - h)) / (2.0 * h)
        return np.where(np.isfinite(g), g, np.inf)

    def diffusion(self, y):
        if self.lamperti or self.natural:
            return np.ones_like(y)
        return self.spec.s_fn(y)

    def _drift_varies(self) -> bool:
        if self.natural:
            return False
        if not self.lamperti:
            return True
        probe = np.linspace(self.L[-1], self.R[-1], 67)[1:-1]
        d = self.drift(probe)
        d = d[np.isfinite(d)]
        return d.size == 0 or bool(np.ptp(d) > 1e-12 * (1.0 + np.max(np.abs(d))))

    # geometry -------------------------------------------------------------------

    def region(self, y):
        """Smallest level containing ``y``; ``N + 1`` beyond level ``N`` or when not finite."""
        # a point sitting exactly on R_n or L_n has left level n
        kr = np.searchsorted(self.R, y, side="right")
        kl = self.N - np.searchsorted(self.L_asc, y, side="left")
        reg = np.maximum(kr, kl) + 1
        return np.where(np.isfinite(y), reg, self.N + 1)

    def room(self, y, reg):
        """Distance from ``y`` to the nearer barrier two levels out (or the outer boundary)."""
        k = np.minimum(reg + 1, self.N)
        return np.minimum(self.Ub[k] - y, y - self.Db[k])

    def near_side(self, y):
        """+1 where the upper outer boundary is nearer than the lower one, else -1."""
        return np.where(self.hi_out - y < y - self.lo_out, 1, -1).astype(np.int8)

    def gap(self, y):
        """Distance to the finite boundaries of the simulated coordinate."""
        g = np.full_like(y, np.inf)
        if not self.hi_censor:
            g = np.minimum(g, self.hi_true - y)
        if not self.lo_censor:
            g = np.minimum(g, y - self.lo_true)
        return g

    def crossings(self, y0, y1, var, ids, steps):
        """Ladder levels exited and outer boundaries hit during one step.

        Returns ``(deep, up, lo, by_bridge)``: ``deep`` is the number of
        levels left by the end of the step, ``up``/``lo`` flag a hit of the
        upper/lower outer boundary, ``by_bridge`` marks hits seen only by the
        bridge test.

        Each side uses one uniform ``u`` for all its barriers.  A barrier
        ``r`` above both endpoints is crossed iff
        ``exp(-2 (r - y0)(r - y1) / var) > u``, i.e. iff ``r`` lies below the
        larger root ``r*`` of ``(r - y0)(r - y1) = -var log(u) / 2``, so the
        crossed levels are nested and found by one sorted search.
        """
        N = self.N
        fin = np.isfinite(y1)
        mid = 0.5 * (y0 + y1)
        half = 0.5 * np.abs(y1 - y0)
        top, bot = mid + half, mid - half
        # candidate rows: some barrier beyond the endpoints is within reach of the bridge
        with np.errstate(invalid="ignore", over="ignore"):
            reach = np.sqrt(half * half + _Q_MAX * var)
        near = fin & ((np.searchsorted(self.U, mid + reach, "right") > np.searchsorted(self.U, top, "right"))
                      | (np.searchsorted(self.D, mid - reach, "left") < np.searchsorted(self.D, bot, "left")))
        ri = np.nonzero(near)[0]
        if ri.size:
            qu = -0.5 * var[ri] * np.log(rng.uniforms(self.cfg.seed, ids[ri], steps[ri], _LANE_UP))
            ql = -0.5 * var[ri] * np.log(rng.uniforms(self.cfg.seed, ids[ri], steps[ri], _LANE_LO))
            with np.errstate(over="ignore"):
                h2 = half[ri] ** 2
            top[ri] = mid[ri] + np.sqrt(h2 + qu)
            bot[ri] = mid[ri] - np.sqrt(h2 + ql)
        cu = np.searchsorted(self.U, top, "right")
        cl = self.D.size - np.searchsorted(self.D, bot, "left")
        cu = np.where(fin, cu, self.U.size)
        deep = np.minimum(np.maximum(cu, cl), N)
        up = fin & (cu == self.U.size)
        lo = fin & (cl == self.D.size)
        by_bridge = (up & (y1 < self.hi_out)) | (lo & (y1 > self.lo_out))
        return deep, up, lo, by_bridge

    def _record_levels(self, level_exit, exited, rows_global, deep, when):
        newly = deep > exited[rows_global]
        if not newly.any():
            return
        g = rows_global[newly]
        lo_lv, hi_lv = exited[g], deep[newly]
        lv = np.arange(self.N)[None, :]
        mask = (lv >= lo_lv[:, None]) & (lv < hi_lv[:, None])
        sub = level_exit[g]
        sub[mask] = np.broadcast_to(when[newly][:, None], mask.shape)[mask]
        level_exit[g] = sub
        exited[g] = hi_lv

    def _V(self, x):
        if self.spec.V_exact is not None:
            return ex.evaluate_array(self.spec.V_exact, x, self.spec.params)
        return self.spec.V_fn(x)

    # SDE schemes -------------------------------------------------------------------

    def run(self, ids: np.ndarray, record: bool = False) -> _Batch:
        if self.natural:
            return self._run_natural(ids, record)
        cfg, N, T = self.cfg, self.N, self.T
        n, nT = ids.size, T.size
        ids = ids.astype(np.uint64)
        y = np.full(n, self.y0)
        t = np.zeros(n)
        steps = np.zeros(n, dtype=np.uint64)
        exited = np.zeros(n, dtype=np.int64)
        level_exit = np.full((n, N), np.inf)
        expl = np.full(n, np.inf)
        censored = np.zeros(n, dtype=bool)
        side = np.zeros(n, dtype=np.int8)
        jT = np.zeros(n, dtype=np.int64)
        x_at_T = np.full((n, nT), np.nan)
        iV_T, ib_T, ib2_T = (np.full((n, nT), np.nan) for _ in range(3))
        iV, ib, ib2 = np.zeros(n), np.zeros(n), np.zeros(n)
        Vx = self._V(np.full(n, self.xi)) if self.want_V else None
        trace = ([0.0], [self.xi], [0.0]) if record else None
        Wcum = np.zeros(n)
        need_x = self.want_V or self.want_b or record
        floor = cfg.step * 2.0 ** -cfg.max_refine
        active = np.arange(n)
        while active.size:
            a = active
            ya, ta = y[a], t[a]
            diff0 = self.diffusion(ya)
            d0 = self.drift(ya)
            if not self.refine_gap:
                # constant drift of a unit-dispersion coordinate: the bridge test is exact at any step
                dt = np.full(a.size, cfg.step)
                stall = np.zeros(a.size, dtype=bool)
                stall_cens = stall
            else:
                reg = self.region(ya)
                room = self.room(ya, reg)
                # unit-dispersion coordinates need no per-level halving: the room rule scales with the geometry
                base = cfg.step if self.lamperti else cfg.step * np.exp2(-(reg - 1).astype(float))
                with np.errstate(all="ignore"):
                    want = np.minimum(base, cfg.gap_factor * (room / np.abs(diff0)) ** 2)
                    # resolve the drift's own time scale 1/|nu'| and keep its displacement within the room
                    want = np.minimum(want, 0.5 * cfg.gap_factor / self.drift_slope(ya, room))
                    want = np.minimum(want, 0.25 * room / np.abs(d0))
                stall = ~(want >= floor)
                stall_cens = stall & ~(self.gap(ya) <= 2.0 * room)
                k = np.ceil(np.log2(cfg.step / np.maximum(np.nan_to_num(want), floor)))
                dt = cfg.step * np.exp2(-np.clip(k, 0, cfg.max_refine))
            Tn = T[jT[a]]
            hitT = dt >= Tn - ta
            dt = np.where(hitT, Tn - ta, dt)
            t1 = np.where(hitT, Tn, ta + dt)
            dB = np.sqrt(dt) * rng.normals(cfg.seed, ids[a], steps[a], _LANE_NORMAL)
            with np.errstate(all="ignore"):
                if cfg.scheme == "dds_exact" and self.const_drift is None:
                    pred = ya + d0 * dt + dB
                    d1 = self.drift(pred)
                    d1 = np.where(np.isfinite(d1), d1, d0)
                    y1 = ya + 0.5 * (d0 + d1) * dt + dB
                else:
                    y1 = ya + d0 * dt + diff0 * dB
            y1 = np.where(np.isfinite(y1), y1, np.nan)
            y1[stall] = ya[stall]

            deep, up, lo, by_bridge = self.crossings(ya, y1, dt * diff0 * diff0, ids[a], steps[a])
            bad = ~np.isfinite(y1)
            boom = up | lo | bad | stall
            deep = np.where(boom, N, deep)
            self._record_levels(level_exit, exited, a, deep, t1)

            if boom.any():
                r = np.nonzero(boom)[0]
                te = np.where(stall[r], np.nextafter(ta[r], np.inf), ta[r] + np.where(bad[r], dt[r], 0.5 * dt[r]))
                ep = ~by_bridge[r] & ~bad[r] & ~stall[r]
                if ep.any():
                    rr = r[ep]
                    bnd = np.where(up[rr], self.hi_out, self.lo_out)
                    frac = np.clip((bnd - ya[rr]) / (y1[rr] - ya[rr]), 1e-12, 1.0)
                    te[ep] = ta[rr] + frac * dt[rr]
                expl[a[r]] = te
                # a path stalled next to a finite boundary counts as a hit of it
                censored[a[r]] = bad[r] | stall_cens[r] | (up[r] & self.hi_censor) | (lo[r] & self.lo_censor)
                side[a[r]] = np.where(up[r], 1, np.where(lo[r], -1, self.near_side(ya[r])))

            ok = ~boom
            g = a[ok]
            x1 = self.to_x(y1[ok]) if need_x else None
            dtk = dt[ok]
            if self.want_V:
                V1 = self._V(x1)
                iV[g] += 0.5 * (Vx[g] + V1) * dtk
                Vx[g] = V1
            if self.want_b:
                bx = self.spec.b_fn(self.to_x(ya[ok]))
                dW = self.sigma * dB[ok]
                ib[g] += bx * dW
                ib2[g] += bx * bx * dtk
            Wcum[g] += self.sigma * dB[ok]
            y[g] = y1[ok]
            t[g] = t1[ok]
            steps[g] += np.uint64(1)
            if record and ok.all():
                trace[0].append(float(t1[0]))
                trace[1].append(float(x1[0]))
                trace[2].append(float(Wcum[0]))
            hit = hitT[ok]
            if hit.any():
                gh = g[hit]
                j = jT[gh]
                x_at_T[gh, j] = x1[hit] if need_x else self.to_x(y1[ok][hit])
                iV_T[gh, j] = iV[gh]
                ib_T[gh, j] = ib[gh]
                ib2_T[gh, j] = ib2[gh]
                jT[gh] = j + 1
            done = np.zeros(a.size, dtype=bool)
            done[~ok] = True
            done[np.nonzero(ok)[0][hit]] = jT[g[hit]] >= nT
            active = a[~done]
        frozen = np.zeros(n, dtype=bool)
        return _Batch(expl, censored, level_exit, x_at_T, iV_T, ib_T, ib2_T, frozen, side, trace)

    # time change ---------------------------------------------------------------------

    def _run_natural(self, ids: np.ndarray, record: bool) -> _Batch:
        """Time change of a Brownian motion; the clock is ``Gamma``."""
        cfg, N, T = self.cfg, self.N, self.T
        n, nT = ids.size, T.size
        ids = ids.astype(np.uint64)
        s_fn = self.spec.s_fn
        x = np.full(n, self.xi)
        gam = np.zeros(n)
        steps = np.zeros(n, dtype=np.uint64)
        exited = np.zeros(n, dtype=np.int64)
        level_exit = np.full((n, N), np.inf)
        expl = np.full(n, np.inf)
        censored = np.zeros(n, dtype=bool)
        side = np.zeros(n, dtype=np.int8)
        frozen = np.zeros(n, dtype=bool)
        jT = np.zeros(n, dtype=np.int64)
        x_at_T = np.full((n, nT), np.nan)
        iV_T = np.full((n, nT), np.nan)
        iV = np.zeros(n)
        Vx = self._V(x) if self.want_V else None
        rate = s_fn(x) ** -2.0
        floor = cfg.step * 2.0 ** -cfg.max_refine
        s_scale = (lambda u: s_fn(u) / self.spec.s_prime_fn(u)) if self.spec.has_s_deriv else None
        trace = ([0.0], [self.xi], [0.0]) if record else None
        Bcum = np.zeros(n)
        active = np.arange(n)
        while active.size:
            a = active
            xa, ga, ra = x[a], gam[a], rate[a]
            reg = self.region(xa)
            dt_target = cfg.step * np.exp2(-(np.minimum(reg, N) - 1).astype(float))
            # the B-step depends on the current state only (choosing it from the draw would bias the path):
            # bounded by the clock target, the room to the next barrier and the scale |s / s'|
            room = self.room(xa, reg)
            by_room = cfg.gap_factor * room * room
            with np.errstate(all="ignore"):
                dth = np.minimum(dt_target / ra, by_room)
                if s_scale is not None:
                    dth = np.minimum(dth, cfg.gap_factor * s_scale(xa) ** 2)
            stall = (by_room < floor) & (by_room <= dth)
            dth = np.maximum(dth, floor)
            z = rng.normals(cfg.seed, ids[a], steps[a], _LANE_NORMAL)
            x1 = xa + np.sqrt(dth) * z
            with np.errstate(all="ignore"):
                r1 = s_fn(x1) ** -2.0
                inc = 0.5 * (ra + r1) * dth
            deep, up, lo, by_bridge = self.crossings(xa, x1, dth, ids[a], steps[a])
            boom = up | lo
            # a step whose clock increment is not finite freezes the path (censored)
            stuck = ~np.isfinite(inc) & ~boom
            # stalled at a barrier the clock barely moves: a hit if the barrier is a finite boundary
            stall &= ~boom & ~stuck
            if stall.any():
                r = np.nonzero(stall)[0]
                expl[a[r]] = np.nextafter(ga[r], np.inf)
                censored[a[r]] = ~(self.gap(xa[r]) <= 2.0 * room[r])
                side[a[r]] = self.near_side(xa[r])
                self._record_levels(level_exit, exited, a[r], np.full(r.size, N), expl[a[r]])
            if boom.any():
                # the clock is advanced up to the crossing only
                r = np.nonzero(boom)[0]
                frac = np.where(by_bridge[r], 0.5, np.clip((np.where(up[r], self.hi_out, self.lo_out) - xa[r]) / (x1[r] - xa[r]), 0.0, 1.0))
                with np.errstate(all="ignore"):
                    ib_ = ra[r] * dth[r] * frac
                inc[r] = np.where(np.isfinite(ib_), ib_, inc[r])
                x1[r] = xa[r] + frac * (x1[r] - xa[r])
            g1 = np.where(np.isfinite(inc), ga + inc, np.inf)
            deep = np.where(boom, N, deep)
            self._record_levels(level_exit, exited, a[~stuck], deep[~stuck], g1[~stuck])
            if stuck.any():
                for i in a[stuck]:
                    frozen[i] = True
                    censored[i] = True
                    x_at_T[i, jT[i]:] = x[i]
                    iV_T[i, jT[i]:] = iV[i]
            # checkpoints passed during the step; an exploding step only passes those before its exit
            live = ~stuck & ~stall
            while True:
                Tn = T[np.minimum(jT[a], nT - 1)]
                cross = live & (jT[a] < nT) & ((g1 > Tn) | (~boom & (g1 >= Tn)))
                if not cross.any():
                    break
                r = np.nonzero(cross)[0]
                frac = np.where(inc[r] > 0, (Tn[r] - ga[r]) / inc[r], 1.0)
                frac = np.clip(frac, 0.0, 1.0)
                gr = a[r]
                j = jT[gr]
                x_at_T[gr, j] = xa[r] + frac * (x1[r] - xa[r])
                if self.want_V:
                    iV_T[gr, j] = iV[gr] + frac * 0.5 * (Vx[gr] + self._V(x1[r])) * inc[r]
                jT[gr] = j + 1
            if boom.any():
                r = np.nonzero(boom)[0]
                expl[a[r]] = g1[r]
                censored[a[r]] = (up[r] & self.hi_censor) | (lo[r] & self.lo_censor)
                side[a[r]] = np.where(up[r], 1, -1)
            ok = ~boom & ~stuck & ~stall
            gk = a[ok]
            if self.want_V:
                V1 = self._V(x1[ok])
                iV[gk] += 0.5 * (Vx[gk] + V1) * inc[ok]
                Vx[gk] = V1
            Bcum[gk] += x1[ok] - xa[ok]
            x[gk] = x1[ok]
            rate[gk] = r1[ok]
            gam[gk] = g1[ok]
            steps[gk] += np.uint64(1)
            if record and ok.all():
                trace[0].append(float(g1[0]))
                trace[1].append(float(x1[0]))
                trace[2].append(float(Bcum[0]))
            done = ~ok | (jT[a] >= nT)
            active = a[~done]
        nanT = np.full((n, nT), np.nan)
        return _Batch(expl, censored, level_exit, x_at_T, iV_T, nanT, nanT.copy(), frozen, side, trace)


def _run_all(engine: _Engine, n_paths: int, threads: int | None) -> _Batch:
    ids = np.arange(n_paths, dtype=np.uint64)
    chunks = [ids[i:i + CHUNK] for i in range(0, n_paths, CHUNK)]
    workers = default_threads() if threads is None else max(1, int(threads))
    if workers == 1 or len(chunks) == 1:
        parts = [engine.run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(engine.run, chunks))
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    return _Batch(*(cat(f) for f in ("explosion_time", "censored", "level_exit", "x_at_T", "intV_at_T",
                                      "ib_at_T", "ib2_at_T", "frozen", "side")))


def _mean(values: np.ndarray) -> float:
    # index-ordered exact summation keeps reductions independent of batching
    return math.fsum(values.tolist()) / values.size if values.size else math.nan


# -- public operations ------------------------------------------------------------------


def _path_sample(engine: _Engine, path_index: int) -> PathSample:
    b = engine.run(np.array([path_index], dtype=np.uint64), record=True)
    times, states, W = (np.array(v) for v in b.trace)
    te = float(b.explosion_time[0])
    # ingredients on the final recorded time
    k = np.nonzero(np.isfinite(b.x_at_T[0]))[0]
    last = k[-1] if k.size else None
    return PathSample(
        times=times,
        states=states,
        brownian=W,
        exploded=math.isfinite(te),
        explosion_time=te,
        censored=bool(b.censored[0]),
        levels_exited=int(np.sum(np.isfinite(b.level_exit[0]))),
        level_exit_times=b.level_exit[0].copy(),
        int_b_dW=float(b.ib_at_T[0, last]) if last is not None and engine.want_b else 0.0,
        int_b2_dt=float(b.ib2_at_T[0, last]) if last is not None and engine.want_b else 0.0,
        int_V_dt=float(b.intV_at_T[0, last]) if last is not None and engine.want_V else 0.0,
    )


def simulate_path(spec: DiffusionSpec, xi: float, config: SimConfig, path_index: int = 0) -> PathSample:
    """Simulate one path up to ``T_grid[-1]`` or its explosion.

    The noise of path ``path_index`` depends only on ``(seed, path_index)``.
    ``brownian`` holds the driving Brownian motion ``W`` of ``dX = s (dW + b dt)``
    on the recorded grid.

    Raises
    ------
    SchemeUnavailableError
        E.g. ``dds_exact`` without ``s'``.
    """
    engine = _Engine(spec, xi, config, want_V=spec.has_s_deriv and config.scheme != "euler_raw", want_b=True)
    return _path_sample(engine, path_index)


def simulate_natural_scale(spec: DiffusionSpec, xi: float, T: float, config: SimConfig, path_index: int = 0) -> PathSample:
    """Driftless path by time change of a Brownian motion.

    Accumulates ``Gamma(theta) = int_0^theta s^-2(xi + B) dr`` by the
    trapezoidal rule on the ``B`` grid (steps halve while an increment of
    ``Gamma`` is far above the target), inverts it piecewise linearly and
    reports explosion when ``xi + B`` leaves the deepest ladder level before
    ``Gamma`` exceeds ``T``.  ``times`` are values of ``Gamma``.
    """
    if not spec.is_driftless():
        raise SchemeUnavailableError("natural-scale simulation needs b = 0")
    cfg = replace(config, scheme="timechange_natural", T_grid=(float(T),))
    engine = _Engine(spec, xi, cfg, want_V=False)
    return _path_sample(engine, path_index)


def _direct_curve(batch: _Batch, T: np.ndarray, method: str, n: int) -> SurvivalCurve:
    te = batch.explosion_time
    est = np.array([_mean((te > Tj).astype(float)) for Tj in T])
    se = np.sqrt(est * (1.0 - est) / n)
    cens = np.array([_mean((batch.censored & (te <= Tj)).astype(float)) for Tj in T])
    levels = np.array([[_mean((batch.level_exit[:, k] > Tj).astype(float)) for Tj in T]
                       for k in range(batch.level_exit.shape[1])])
    return SurvivalCurve(T, est, se, method, n, cens, level_estimates=levels)


def estimate_survival_direct(spec: DiffusionSpec, xi: float, config: SimConfig) -> SurvivalCurve:
    """Fraction of paths with explosion time beyond each ``T``.

    ``stderr`` is binomial.  Paths that left the deepest ladder level count
    as exploded; ``censored_fraction[j]`` is the share of paths whose
    explosion before ``T_j`` was a level exit rather than an observed hit of
    a finite boundary, which bounds the censoring bias.  ``level_estimates``
    holds ``P(S_n > T)`` for every level ``n``.
    """
    engine = _Engine(spec, xi, config)
    batch = _run_all(engine, config.n_paths, config.threads)
    curve = _direct_curve(batch, engine.T, f"mc-direct:{config.scheme}", config.n_paths)
    curve.info["levels"] = engine.N
    return curve


def _F_vectorized(spec: DiffusionSpec, xi: float, ladder: TruncationLadder):
    """``x -> F(x) - F(xi)`` for arrays."""
    if spec.F_exact is not None:
        F0 = ex.evaluate(spec.F_exact, xi, spec.params)
        fn = ex.compile_array(spec.F_exact, spec.params)
        return lambda x: fn(x) - F0
    nodes = ladder_mesh(ladder.breakpoints(), per_gap=200)
    vals = cumulative_integral(spec.f_fn, nodes, origin=int(np.searchsorted(nodes, ladder.anchor)))
    table = HermiteTable(nodes, vals, spec.f_fn(nodes))
    F0 = float(table(np.array([xi]))[0])
    return lambda x: table(x) - F0


def _companion_config(spec: DiffusionSpec, config: SimConfig) -> SimConfig:
    if config.scheme in ("euler_lamperti", "dds_exact") and not spec.has_s_deriv:
        return replace(config, scheme="euler_raw")
    return config


def estimate_survival_feynman_kac(spec: DiffusionSpec, xi: float, config: SimConfig, route: str = "auto") -> SurvivalCurve:
    """Weighted estimate over the driftless companion ``dX = s(X) dW``.

    ``route="fk"`` uses ``exp(F(X(T)) - F(xi) - int V dt)``;
    ``route="girsanov"`` uses ``exp(int b dW - 1/2 int b^2 dt)``; ``"auto"``
    picks the first when ``f`` is declared C^1 and ``s'`` is available.
    Paths killed before ``T`` carry weight 0.  Paths whose log-weight
    exceeds 700 are excluded and counted in ``excluded``.
    """
    if route == "auto":
        route = "fk" if (spec.f_c1 and spec.has_s_deriv) else "girsanov"
    if route not in ("fk", "girsanov"):
        raise ValueError(f"unknown route {route!r}")
    if route == "fk" and not spec.f_c1:
        raise ModelError("the Feynman-Kac weight needs f continuously differentiable")
    if route == "girsanov" and not spec.f_l2:
        raise ModelError("the Girsanov weight needs f locally square integrable")
    cfg = _companion_config(spec, config)
    if route == "girsanov" and cfg.scheme == "timechange_natural":
        cfg = replace(cfg, scheme="euler_lamperti" if spec.has_s_deriv else "euler_raw")
    engine = _Engine(spec, xi, cfg, companion=True, want_V=route == "fk", want_b=route == "girsanov")
    batch = _run_all(engine, cfg.n_paths, cfg.threads)
    n = cfg.n_paths
    if route == "fk":
        Fd = _F_vectorized(spec, xi, engine.ladder)
        logw = np.full(batch.x_at_T.shape, -np.inf)
        alive = np.isfinite(batch.x_at_T)
        with np.errstate(all="ignore"):
            logw[alive] = Fd(batch.x_at_T[alive]) - batch.intV_at_T[alive]
    else:
        logw = np.full(batch.x_at_T.shape, -np.inf)
        alive = np.isfinite(batch.x_at_T)
        logw[alive] = batch.ib_at_T[alive] - 0.5 * batch.ib2_at_T[alive]
    T = engine.T
    est, se, neff, cens = (np.empty(T.size) for _ in range(4))
    excluded = 0
    for j in range(T.size):
        lw = logw[:, j]
        bad = np.isnan(lw) | (lw > WEIGHT_EXPONENT_LIMIT)
        excluded = max(excluded, int(bad.sum()))
        w = np.exp(lw[~bad])
        m = _mean(w)
        var = _mean((w - m) ** 2) if w.size > 1 else 0.0
        est[j] = m
        se[j] = math.sqrt(var / max(1, w.size - 1)) if w.size > 1 else math.nan
        s1, s2 = math.fsum(w.tolist()), math.fsum((w * w).tolist())
        neff[j] = s1 * s1 / s2 if s2 > 0 else 0.0
        cens[j] = _mean((batch.censored & (batch.explosion_time <= T[j])).astype(float))
    curve = SurvivalCurve(T, est, se, f"mc-{route}:{cfg.scheme}", n, cens, n_eff=neff, excluded=excluded)
    curve.info["levels"] = engine.N
    return curve


def companion_terminal_values(spec: DiffusionSpec, xi: float, config: SimConfig) -> np.ndarray:
    """``X°(T ∧ S°)`` for the driftless companion, shape ``(n_paths, len(T_grid))``.

    Paths that exploded before ``T`` report the interval endpoint on their
    exit side.  Level-censored exits toward an infinite end have no
    meaningful value and are NaN.
    """
    cfg = _companion_config(spec, config)
    engine = _Engine(spec, xi, cfg, companion=True)
    batch = _run_all(engine, cfg.n_paths, cfg.threads)
    out = batch.x_at_T.copy()
    dead = ~np.isfinite(out)
    if dead.any():
        iv = spec.interval
        out[dead] = _exit_side_value(engine, batch, dead, iv)
    return out


def _exit_side_value(engine: _Engine, batch: _Batch, dead: np.ndarray, iv) -> np.ndarray:
    # the interval endpoint on the exit side; unknown (NaN) toward an infinite end
    rows, _ = np.nonzero(dead)
    side = batch.side[rows]
    return np.where(side > 0, iv.right if math.isfinite(iv.right) else np.nan,
                    iv.left if math.isfinite(iv.left) else np.nan)
