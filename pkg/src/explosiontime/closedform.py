"""
Analytic survival functions ``P_xi(S > T)`` for the built-in catalog.

Every formula has a primary evaluator (elementary functions or the
regularized gamma function where possible) and an independent secondary
route, usually quadrature of an integral representation, exposed through
:func:`cross_check`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import integrate
from scipy.special import ive, log_ndtr

from .model import CATALOG, ModelError
from .montecarlo import SurvivalCurve
from .special import (
    DEFAULT_CONTROL,
    ConvergenceError,
    SeriesControl,
    reg_lower_gamma,
    std_normal_cdf,
    theta_series,
    theta_tail_integral,
)

__all__ = [
    "NoClosedFormError",
    "ClosedForm",
    "closed_form",
    "cross_check",
    "reciprocal_bm_survival",
    "power_drift_survival",
    "htransform_32_survival",
    "affine_variance_survival",
    "quartic_survival",
    "cubic_survival",
    "bessel_lowdim_survival",
]


class NoClosedFormError(ModelError):
    """The model (or parameter choice) has no closed-form survival function."""


def _positive(**kw):
    for k, v in kw.items():
        if not v > 0:
            raise ValueError(f"{k} must be positive, got {v}")


def _quad(fn, a, b, **kw) -> float:
    val, err = integrate.quad(fn, a, b, epsabs=1e-13, epsrel=1e-11, limit=400, **kw)
    if not math.isfinite(val) or err > 1e-7:
        raise ConvergenceError(f"quadrature on [{a}, {b}] did not converge (error estimate {err:.3g})")
    return val


def _phi(r: float) -> float:
    return math.exp(-0.5 * r * r) / math.sqrt(2.0 * math.pi)


# -- reciprocal Brownian motion and affine variance ----------------------------------


def reciprocal_bm_survival(xi: float, T: float) -> float:
    """``2 Phi(1/(xi sqrt T)) - 1``: Brownian motion from 0 not yet at ``-1/xi``."""
    _positive(xi=xi, T=T)
    return math.erf(1.0 / (xi * math.sqrt(2.0 * T)))


def _reciprocal_quadrature(xi: float, T: float) -> float:
    return 2.0 * _quad(_phi, 0.0, 1.0 / (xi * math.sqrt(T)))


def affine_variance_survival(kappa: float, xi: float, T: float) -> float:
    """``2 Phi(2 sqrt(xi)/(kappa sqrt T)) - 1``."""
    _positive(kappa=kappa, xi=xi, T=T)
    return math.erf(2.0 * math.sqrt(xi) / (kappa * math.sqrt(2.0 * T)))


def _affine_quadrature(kappa: float, xi: float, T: float) -> float:
    return 2.0 * _quad(_phi, 0.0, 2.0 * math.sqrt(xi) / (kappa * math.sqrt(T)))


# -- power drift and low-dimensional Bessel -----------------------------------------


def bessel_lowdim_survival(delta: float, xi: float, T: float, ctrl: SeriesControl = DEFAULT_CONTROL) -> float:
    """``P(1 - delta/2, xi^2/(2T))``, the regularized lower incomplete gamma function."""
    if not delta < 2:
        raise ValueError("bessel_lowdim_survival needs delta < 2")
    _positive(xi=xi, T=T)
    return reg_lower_gamma(1.0 - 0.5 * delta, xi * xi / (2.0 * T), ctrl)


def power_drift_survival(kappa: float, xi: float, T: float, ctrl: SeriesControl = DEFAULT_CONTROL) -> float:
    """Survival for ``s = -x^2``, ``b = -kappa x``, via ``P(kappa - 1/2, 1/(2 xi^2 T))``.

    Raises
    ------
    NoClosedFormError
        For ``kappa = 1/2``, where the index ``kappa - 1/2`` vanishes and the
        gamma distribution degenerates.
    """
    if kappa == 0.5:
        raise NoClosedFormError("power_drift has no closed form at kappa = 1/2 (gamma index 0)")
    if not kappa > 0.5:
        raise ValueError("power_drift_survival needs kappa >= 1/2")
    _positive(xi=xi, T=T)
    return reg_lower_gamma(kappa - 0.5, 1.0 / (2.0 * xi * xi * T), ctrl)


def _power_drift_quadrature(kappa: float, xi: float, T: float) -> float:
    # (1/T) xi^-nu int x^(1-nu) exp(-(x - 1/xi)^2 / 2T) Ive_nu(x/(xi T)) dx, exponentials merged
    nu = kappa - 0.5
    if nu <= 0:
        raise NoClosedFormError("power_drift has no closed form at kappa = 1/2 (gamma index 0)")
    c = 1.0 / xi

    def g(x):
        if x == 0.0:
            return 0.0
        return x ** (1.0 - nu) * math.exp(-((x - c) ** 2) / (2.0 * T)) * ive(nu, x / (xi * T))

    w = 12.0 * math.sqrt(T)
    hi = c + w
    pts = [p for p in (c - w, c, c + 0.5 * w) if 0.0 < p < hi]
    return xi ** (-nu) / T * _quad(g, 0.0, hi, points=pts or None)


# -- h-transform ---------------------------------------------------------------------


def htransform_32_survival(xi: float, T: float) -> float:
    """``1 - exp(-2/(xi T))`` for ``s = x^{3/2}``, ``b = s/x``."""
    _positive(xi=xi, T=T)
    return -math.expm1(-2.0 / (xi * T))


def _htransform_32_quadrature(xi: float, T: float) -> float:
    # Gamma(tau) has density 2/(xi t^2) exp(-2/(xi t)); integrate it over (T, inf) as u = 1/t on (0, 1/T)
    return _quad(lambda u: 2.0 / xi * math.exp(-2.0 * u / xi), 0.0, 1.0 / T)


# -- tangent of Brownian motion -----------------------------------------------------


def _quartic_ends(xi: float) -> tuple[float, float]:
    at = math.atan(xi)
    return -0.5 * math.pi - at, 0.5 * math.pi - at


def quartic_survival(nu: float, xi: float, T: float, ctrl: SeriesControl = DEFAULT_CONTROL) -> float:
    """Exit survival of ``W + nu t`` from ``(a, b) = (-pi/2, pi/2) - arctan xi``.

    The exit-time density ``exp(-nu^2 t/2)(e^{nu a} Theta(t; b, pi) +
    e^{nu b} Theta(t; -a, pi))`` is integrated over ``[T, t_end]``, where
    ``t_end`` makes the exponential tail bound
    ``(e^{nu a} + e^{nu b}) (1.11/pi) (2/(1+nu^2)) e^{-(1+nu^2) t_end/2}``
    smaller than ``1e-13``.  The bound uses the sine-series form of ``Theta``,
    valid for ``t >= 2``.
    """
    _positive(T=T)
    a, b = _quartic_ends(xi)
    wa, wb = math.exp(nu * a), math.exp(nu * b)
    rate = 0.5 * (1.0 + nu * nu)
    lead = (wa + wb) * (1.11 / math.pi) / rate
    t_end = max(2.0, T, math.log(lead / 1e-13) / rate)

    def density(t):
        return math.exp(-0.5 * nu * nu * t) * (wa * theta_series(t, b, math.pi, ctrl) + wb * theta_series(t, -a, math.pi, ctrl))

    if T >= t_end:
        return 0.0
    # breakpoints spread over the decades where the density lives
    pts = [p for p in (0.05, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0) if T < p < t_end]
    return float(min(1.0, max(0.0, _quad(density, T, t_end, points=pts or None))))


def _quartic_laplace_route(nu: float, xi: float, T: float) -> float:
    a, b = _quartic_ends(xi)
    return math.exp(nu * a) * theta_tail_integral(T, b, math.pi, nu) + math.exp(nu * b) * theta_tail_integral(
        T, -a, math.pi, nu
    )


# -- cubic variance ----------------------------------------------------------------


def cubic_survival(nu: float, xi: float, T: float) -> float:
    """Survival of the first passage of ``B + nu t`` to ``alpha = 2/sqrt(xi)``.

    ``Phi((alpha - nu T)/sqrt T) - e^{2 nu alpha} Phi(-(alpha + nu T)/sqrt T)``,
    the second term formed in log space.  For ``nu < 0`` the limit as
    ``T -> inf`` is ``1 - exp(4 nu / sqrt xi)``.
    """
    _positive(xi=xi, T=T)
    alpha = 2.0 / math.sqrt(xi)
    rt = math.sqrt(T)
    first = std_normal_cdf((alpha - nu * T) / rt)
    second = math.exp(2.0 * nu * alpha + float(log_ndtr(-(alpha + nu * T) / rt)))
    return float(min(1.0, max(0.0, first - second)))


def _cubic_quadrature(nu: float, xi: float, T: float) -> float:
    alpha = 2.0 / math.sqrt(xi)

    def dens(t):
        return alpha / math.sqrt(2.0 * math.pi * t**3) * math.exp(-((alpha - nu * t) ** 2) / (2.0 * t))

    # survival = P(tau = inf) + int_T^inf density
    escape = -math.expm1(2.0 * nu * alpha) if nu < 0 else 0.0
    mode = alpha * alpha / 3.0
    pts = sorted(p for p in {mode, 10.0 * mode, alpha / abs(nu) if nu else mode} if p > T)
    total = 0.0
    lo = T
    for p in pts + [math.inf]:
        total += integrate.quad(dens, lo, p, epsabs=1e-14, epsrel=1e-11, limit=400)[0]
        lo = p
    return escape + total


# -- registry ------------------------------------------------------------------------


@dataclass(frozen=True)
class ClosedForm:
    """Closed-form survival ``(xi, T) -> P_xi(S > T)`` for one catalog model."""

    name: str
    example: int
    params: Mapping[str, float] = field(default_factory=dict)
    evaluator: Callable[[float, float], float] = field(repr=False, default=None)
    secondary: Callable[[float, float], float] | None = field(repr=False, default=None)

    def __call__(self, xi: float, T: float) -> float:
        return self.evaluator(xi, T)

    def curve(self, xi: float, T_grid) -> SurvivalCurve:
        T = np.atleast_1d(np.asarray(T_grid, dtype=float))
        est = np.array([self(xi, t) for t in T])
        return SurvivalCurve(T=T, estimate=est, stderr=np.zeros_like(T), method="closed", n_paths=0,
                             censored_fraction=0.0)


def closed_form(name: str, parameters: Mapping[str, float] | None = None) -> ClosedForm:
    """Closed form for a catalog model.

    Raises
    ------
    NoClosedFormError
        For ``exp_drift``, for ``htransform_power`` other than ``kappa = 1``
        with ``p`` in ``{3/2, 2}``, and for ``power_drift`` at ``kappa = 1/2``.
    """
    if name not in CATALOG:
        raise ModelError(f"unknown catalog model {name!r}")
    entry = CATALOG[name]
    p = dict(entry.defaults)
    p.update(parameters or {})
    entry.validate(p)
    ex = entry.position
    if name == "reciprocal_bm":
        return ClosedForm(name, ex, p, reciprocal_bm_survival, _reciprocal_quadrature)
    if name == "power_drift":
        k = p["kappa"]
        if k == 0.5:
            raise NoClosedFormError("power_drift has no closed form at kappa = 1/2 (gamma index 0)")
        return ClosedForm(name, ex, p, lambda xi, T: power_drift_survival(k, xi, T),
                          lambda xi, T: _power_drift_quadrature(k, xi, T))
    if name == "htransform_power":
        if p["kappa"] == 1.0 and p["p"] == 1.5:
            return ClosedForm(name, ex, p, htransform_32_survival, _htransform_32_quadrature)
        if p["kappa"] == 1.0 and p["p"] == 2.0:
            return ClosedForm(name, ex, p, reciprocal_bm_survival, _reciprocal_quadrature)
        raise NoClosedFormError("htransform_power has closed forms only for kappa = 1 and p in {3/2, 2}")
    if name == "affine_variance":
        k = p["kappa"]
        return ClosedForm(name, ex, p, lambda xi, T: affine_variance_survival(k, xi, T),
                          lambda xi, T: _affine_quadrature(k, xi, T))
    if name == "quartic_tan":
        nu = p["nu"]
        return ClosedForm(name, ex, p, lambda xi, T: quartic_survival(nu, xi, T),
                          lambda xi, T: _quartic_laplace_route(nu, xi, T))
    if name == "cubic_drift":
        nu = p["nu"]
        return ClosedForm(name, ex, p, lambda xi, T: cubic_survival(nu, xi, T),
                          lambda xi, T: _cubic_quadrature(nu, xi, T))
    if name == "bessel":
        d = p["delta"]
        # reciprocity: the Bessel hitting law is the power-drift law at 1/xi
        sec = (lambda xi, T: _power_drift_quadrature(1.5 - 0.5 * d, 1.0 / xi, T)) if d < 2 else None
        return ClosedForm(name, ex, p, lambda xi, T: bessel_lowdim_survival(d, xi, T), sec)
    raise NoClosedFormError(f"{name} has no closed-form survival function; use montecarlo or pde")


def cross_check(name: str, parameters: Mapping[str, float] | None, xi: float, T: float) -> tuple[float, float]:
    """``(primary, secondary)`` evaluations of the same survival probability."""
    cf = closed_form(name, parameters)
    return cf(xi, T), cf.secondary(xi, T)
