"""
Special functions used by the closed-form survival curves.

All routines here are plain-float scalar functions.  The gamma function is
taken from :func:`math.lgamma`; everything else is evaluated from its series,
continued fraction or integral representation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from scipy import integrate

__all__ = [
    "SeriesControl",
    "ConvergenceError",
    "bessel_i",
    "reg_lower_gamma",
    "theta_series",
    "theta_tail_integral",
    "inv_laplace_i",
    "std_normal_cdf",
]


class ConvergenceError(RuntimeError):
    """A series or quadrature did not reach its tolerance."""


@dataclass(frozen=True)
class SeriesControl:
    """Stopping rules for series and quadratures.

    Attributes
    ----------
    max_terms : int
        Hard cap on the number of terms (or shells, or panels).
    abs_tol, rel_tol : float
        Absolute and relative stopping tolerances.
    """

    max_terms: int = 2000
    abs_tol: float = 1e-15
    rel_tol: float = 1e-15

    def __post_init__(self):
        if self.max_terms < 1:
            raise ValueError("max_terms must be at least 1")
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("tolerances must be positive")


DEFAULT_CONTROL = SeriesControl()

_ASYMPTOTIC_SWITCH = 30.0


def bessel_i(nu: float, u: float, ctrl: SeriesControl = DEFAULT_CONTROL) -> float:
    """Modified Bessel function of the first kind, I_nu(u), for nu, u >= 0.

    The power series is summed for ``u <= 30``; above that the Hankel
    large-argument expansion is used, truncated at its smallest term.
    """
    if nu < 0 or u < 0:
        raise ValueError("bessel_i needs nu >= 0 and u >= 0")
    if u == 0.0:
        return 1.0 if nu == 0.0 else 0.0
    if u > _ASYMPTOTIC_SWITCH:
        return _bessel_i_asymptotic(nu, u, ctrl)

    half = 0.5 * u
    term = math.exp(nu * math.log(half) - math.lgamma(nu + 1.0))
    total = term
    q = half * half
    for n in range(1, ctrl.max_terms + 1):
        term *= q / (n * (n + nu))
        total += term
        if term < ctrl.rel_tol * total:
            return total
    raise ConvergenceError(f"bessel_i({nu}, {u}) series did not converge")


def _bessel_i_asymptotic(nu: float, u: float, ctrl: SeriesControl) -> float:
    mu = 4.0 * nu * nu
    term = 1.0
    total = 1.0
    prev = math.inf
    for k in range(1, ctrl.max_terms + 1):
        term *= -(mu - (2 * k - 1) ** 2) / (k * 8.0 * u)
        if abs(term) >= prev or term == 0.0:
            break
        total += term
        prev = abs(term)
        if prev < ctrl.rel_tol * abs(total):
            break
    return math.exp(u) / math.sqrt(2.0 * math.pi * u) * total


def reg_lower_gamma(nu: float, u: float, ctrl: SeriesControl = DEFAULT_CONTROL) -> float:
    """Regularized lower incomplete gamma function P(nu, u).

    Uses the power series below ``u = nu + 1`` and the Lentz continued
    fraction for the complement above it.
    """
    if nu <= 0:
        raise ValueError("reg_lower_gamma needs nu > 0")
    if u < 0:
        raise ValueError("reg_lower_gamma needs u >= 0")
    if u == 0.0:
        return 0.0
    if math.isinf(u):
        return 1.0
    log_prefactor = nu * math.log(u) - u - math.lgamma(nu)
    if u < nu + 1.0:
        # sum u^n / (nu (nu+1) ... (nu+n))
        a = nu
        term = 1.0 / nu
        total = term
        for _ in range(ctrl.max_terms):
            a += 1.0
            term *= u / a
            total += term
            if abs(term) < abs(total) * ctrl.rel_tol:
                return min(1.0, total * math.exp(log_prefactor))
        raise ConvergenceError(f"reg_lower_gamma({nu}, {u}) series did not converge")

    tiny = 1e-300
    b = u + 1.0 - nu
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, ctrl.max_terms + 1):
        an = -i * (i - nu)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < ctrl.rel_tol:
            upper = math.exp(log_prefactor) * h
            return max(0.0, 1.0 - upper)
    raise ConvergenceError(f"reg_lower_gamma({nu}, {u}) continued fraction did not converge")


def _theta_term(t: float, a: float) -> float:
    return a / math.sqrt(2.0 * math.pi * t**3) * math.exp(-a * a / (2.0 * t))


def theta_series(t: float, u: float, v: float, ctrl: SeriesControl = DEFAULT_CONTROL) -> float:
    """Two-sided image series ``sum_k a_k exp(-a_k^2/2t)/sqrt(2 pi t^3)``.

    Here ``a_k = v - u + 2 k v``.  Shells ``{k, -k}`` are added until the
    Gaussian envelope of the next shell, doubled as a geometric tail factor,
    falls below ``ctrl.abs_tol``.
    """
    if t <= 0 or v <= 0:
        raise ValueError("theta_series needs t > 0 and v > 0")
    d = v - u
    total = _theta_term(t, d)
    for k in range(1, ctrl.max_terms + 1):
        total += _theta_term(t, d + 2 * k * v) + _theta_term(t, d - 2 * k * v)
        a_next = min(abs(d + 2 * (k + 1) * v), abs(d - 2 * (k + 1) * v))
        if a_next * a_next > t:
            bound = 2.0 * 2.0 * a_next / math.sqrt(2.0 * math.pi * t**3) * math.exp(-a_next * a_next / (2.0 * t))
            if bound < ctrl.abs_tol:
                return total
    raise ConvergenceError(f"theta_series({t}, {u}, {v}) did not converge")


def theta_tail_integral(
    T: float, u: float, v: float, nu: float = 0.0, ctrl: SeriesControl = DEFAULT_CONTROL
) -> float:
    """``int_T^inf exp(-nu^2 t/2) theta_series(t; u, v) dt`` for ``0 < u < v``.

    The integral over ``[0, inf)`` is the Laplace transform
    ``sinh(|nu| u)/sinh(|nu| v)`` (``u/v`` when ``nu = 0``); the integral over
    ``[0, T]`` is summed image by image, each image integrating in closed form
    to normal distribution functions.  That sum converges absolutely, unlike
    the term-by-term integral over ``[T, inf)``.
    """
    if T <= 0 or v <= 0:
        raise ValueError("theta_tail_integral needs T > 0 and v > 0")
    if not 0.0 < u < v:
        raise ValueError("theta_tail_integral needs 0 < u < v")
    n = abs(nu)
    rt = math.sqrt(T)
    d = v - u
    whole = u / v if n == 0.0 else math.exp(_log_sinh(n * u) - _log_sinh(n * v))

    def head(a: float) -> float:
        # int_0^T |a|/sqrt(2 pi t^3) exp(-(a^2 + n^2 t^2)/2t) dt, with the sign of a
        s = math.copysign(1.0, a)
        a = abs(a)
        direct = math.exp(-n * a) * std_normal_cdf((n * T - a) / rt)
        reflected = math.exp(n * a) * std_normal_cdf(-(a + n * T) / rt) if n > 0 else std_normal_cdf(-a / rt)
        return s * (direct + reflected)

    total = head(d)
    for k in range(1, ctrl.max_terms + 1):
        total += head(d + 2 * k * v) + head(d - 2 * k * v)
        a_next = min(abs(d + 2 * (k + 1) * v), abs(d - 2 * (k + 1) * v))
        if a_next > n * T and 8.0 * std_normal_cdf((n * T - a_next) / rt) < ctrl.abs_tol:
            return whole - total
    raise ConvergenceError("theta_tail_integral did not converge")


def _log_sinh(x: float) -> float:
    return x + math.log1p(-math.exp(-2.0 * x)) - math.log(2.0)


def inv_laplace_i(t: float, z: float, ctrl: SeriesControl | None = None) -> float:
    """Inverse Laplace kernel ``i_t(z)`` of the Bessel index transform.

    The oscillating integrand is integrated panel by panel between the zeros
    ``u = 2kt`` of ``sin(pi u / 2t)``, up to the point where the envelope
    drops below ``abs_tol``.
    """
    if t <= 0 or z <= 0:
        raise ValueError("inv_laplace_i needs t > 0 and z > 0")
    ctrl = ctrl or SeriesControl(max_terms=20000, abs_tol=1e-12, rel_tol=1e-10)
    scale = z / (math.pi * math.sqrt(math.pi * t))
    c = math.pi**2 / (4.0 * t)
    if c > 600.0:
        # the result is exp(-c) smaller than the integrand; cancellation swamps it
        raise ConvergenceError(f"inv_laplace_i is ill-conditioned for t={t} (needs t > {math.pi**2 / 2400:.4g})")

    def log_envelope(u: float) -> float:
        # log of scale * exp(-z cosh u + (pi^2 - u^2)/4t) * sinh u
        return math.log(scale) - z * math.cosh(u) + c - u * u / (4.0 * t) + math.log(math.sinh(u)) if u > 0 else -math.inf

    def integrand(u: float) -> float:
        return math.exp(-z * math.cosh(u) + c - u * u / (4.0 * t)) * math.sinh(u) * math.sin(math.pi * u / (2.0 * t))

    width = 2.0 * t
    log_tol = math.log(ctrl.abs_tol)
    total = 0.0
    k = 0
    while True:
        a, b = k * width, (k + 1) * width
        # the envelope is unimodal in u, so stop once we are past its peak and below tolerance
        if k > 0 and log_envelope(a) < log_tol + math.log(1e-3) and log_envelope(b) < log_envelope(a):
            break
        val, err = integrate.quad(integrand, a, b, epsabs=ctrl.abs_tol / scale * 1e-3, epsrel=ctrl.rel_tol, limit=200)
        total += val
        k += 1
        if k > ctrl.max_terms:
            raise ConvergenceError(f"inv_laplace_i({t}, {z}) needed more than {ctrl.max_terms} panels")
    value = scale * total
    if not math.isfinite(value):
        raise ConvergenceError(f"inv_laplace_i({t}, {z}) is not finite")
    return value


def std_normal_cdf(x: float) -> float:
    """Standard normal distribution function via the complementary error function."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))
