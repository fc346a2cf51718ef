"""Equilibrium metrics of the cavity queue under exponential service.

The workload law has an atom ``F(0)`` at zero and a density made of at most
three exponential pieces, split at ``t2`` and ``t1``:

* ``(0, t2]``:  decays at ``mu - lambda_bar`` (grows if overloaded)
* ``(t2, t1]``: decays at ``mu - lam``
* ``(t1, inf)``: decays at ``mu``

Everything here (CDF, MGF, the ``k`` kernel, response-time tail) integrates
against those pieces, either exactly or by adaptive quadrature.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import integrate

from .errors import DegenerateLoss, OutOfDomain, UnstableSystem
from .model import (
    EquilibriumConstants,
    PolicyParams,
    effective_rate,
    expm1_ratio,
    require_stable,
    solve_constants,
)

inf = math.inf

QUAD_EPSABS = 1e-10
TAIL_CUTOFF = 1e-13


class ServiceLaw:
    """Service-time distribution.  Subclasses provide ``tail``, ``mean`` and ``sample``."""

    mean: float

    def tail(self, x: float) -> float:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Exponential(ServiceLaw):
    mu: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"service rate must be positive, got {self.mu}")

    @property
    def mean(self) -> float:
        return 1.0 / self.mu

    def tail(self, x: float) -> float:
        if x <= 0.0:
            return 1.0
        return math.exp(-self.mu * x)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.standard_exponential(size) / self.mu


class Piece(NamedTuple):
    """Density ``height * exp(-rate * (w - anchor))`` on ``(lo, hi]``."""

    lo: float
    hi: float
    rate: float
    anchor: float
    height: float

    def density(self, w: float) -> float:
        return self.height * math.exp(-self.rate * (w - self.anchor))


@dataclass(frozen=True)
class WorkloadLaw:
    params: PolicyParams
    constants: EquilibriumConstants

    @classmethod
    def from_params(cls, params: PolicyParams) -> "WorkloadLaw":
        return cls(params, solve_constants(params))

    @property
    def lambda_bar(self) -> float:
        return effective_rate(self.params)

    @property
    def slope_t2(self) -> float:
        """Density just above ``t2``."""
        c = self.constants
        if math.isinf(self.params.t2):
            return 0.0
        return (self.params.mu - self.params.lam) * c.fbar_t2 + self.params.lam * c.fbar_t1

    @property
    def pieces(self) -> tuple[Piece, ...]:
        p, c = self.params, self.constants
        lb, mu, lam = self.lambda_bar, p.mu, p.lam
        slow = mu - lb
        out = []
        if p.t2 > 0.0:
            if slow >= 0.0 or math.isinf(p.t2):
                out.append(Piece(0.0, p.t2, slow, 0.0, lb * c.f0))
            else:
                # anchored at its upper end so an underflowed F(0) cannot zero it
                out.append(Piece(0.0, p.t2, slow, p.t2, self.slope_t2))
        if p.t1 > p.t2:
            out.append(Piece(p.t2, p.t1, mu - lam, p.t2, self.slope_t2))
        if math.isfinite(p.t1):
            out.append(Piece(p.t1, inf, mu, p.t1, mu * c.fbar_t1))
        return tuple(out)

    @property
    def tail_rate(self) -> float:
        """Exponential decay rate of ``1 - F(w)`` for large ``w``."""
        p = self.params
        if math.isfinite(p.t1):
            return p.mu
        if math.isfinite(p.t2):
            return p.mu - p.lam
        return p.mu - self.lambda_bar

    def sf(self, w: float) -> float:
        """``1 - F(w)``, evaluated from the nearest knot."""
        p, c = self.params, self.constants
        if w < 0.0:
            return 1.0
        if math.isinf(w):
            return 0.0
        if w >= p.t1:
            return c.fbar_t1 * math.exp(-p.mu * (w - p.t1))
        if w >= p.t2:
            return c.fbar_t2 - self.slope_t2 * expm1_ratio(p.mu - p.lam, w - p.t2)
        lb = self.lambda_bar
        slow = p.mu - lb
        if slow >= 0.0 or math.isinf(p.t2):
            return 1.0 - c.f0 * (1.0 + lb * expm1_ratio(slow, w))
        return c.fbar_t2 + self.slope_t2 * expm1_ratio(-slow, p.t2 - w)

    def cdf(self, w: float) -> float:
        return 1.0 - self.sf(w)


def _clamp_probability(x: float) -> float:
    if -1e-12 <= x < 0.0:
        return 0.0
    if 1.0 < x <= 1.0 + 1e-12:
        return 1.0
    return x


def workload_cdf(law: WorkloadLaw, w: float) -> float:
    """Equilibrium ``P(W <= w)`` of the cavity queue."""
    if w < 0.0:
        return 0.0
    if w == 0.0:
        return law.constants.f0
    return _clamp_probability(law.cdf(w))


def closed_form_cdf(law: WorkloadLaw, w: float) -> float:
    """The workload CDF written as one expression in the three constants.

    Same function as ``workload_cdf`` but with every exponential expanded;
    it cancels badly once ``lambda_bar`` exceeds ``mu`` and is kept for
    cross-checking.
    """
    p, c = law.params, law.constants
    lb, lam, mu = law.lambda_bar, p.lam, p.mu
    value = c.f0 * (1.0 + lb * expm1_ratio(mu - lb, w))
    if w > p.t1:
        excess = w - p.t1
        value -= mu * c.fbar_t1 * (expm1_ratio(mu - lam, excess) - expm1_ratio(mu, excess))
    if w > p.t2:
        excess = w - p.t2
        value += law.slope_t2 * (expm1_ratio(mu - lam, excess) - expm1_ratio(mu - lb, excess))
    return value


def workload_mgf(law: WorkloadLaw, theta: float) -> float:
    """``E[exp(-theta W)]`` at equilibrium.

    Defined for ``theta > -law.tail_rate``.  Uses the closed form, except
    next to its removable poles (or under overload, where the closed form
    cancels) where the pieces are integrated directly.
    """
    if not theta > -law.tail_rate:
        raise OutOfDomain(f"theta={theta} outside the region of convergence (> {-law.tail_rate})")
    p, c = law.params, law.constants
    lb, lam, mu = law.lambda_bar, p.lam, p.mu
    near_pole = min(abs(theta + mu - lb), abs(theta + mu - lam), abs(theta + mu))
    if near_pole < 1e-6 or lb > mu:
        return _mgf_from_pieces(law, theta)

    value = c.f0 * (1.0 + lb / (theta + mu - lb))
    if math.isfinite(p.t2):
        value += law.slope_t2 * math.exp(-theta * p.t2) * (
            1.0 / (theta + mu - lam) - 1.0 / (theta + mu - lb)
        )
    if math.isfinite(p.t1):
        value -= mu * c.fbar_t1 * math.exp(-theta * p.t1) * (
            1.0 / (theta + mu - lam) - 1.0 / (theta + mu)
        )
    return value


def _mgf_from_pieces(law: WorkloadLaw, theta: float) -> float:
    total = law.constants.f0
    for piece in law.pieces:
        # exp(-theta w) * density: log-linear with slope -(rate + theta)
        slope = -(piece.rate + theta)

        def log_at(w):
            return math.log(piece.height) - piece.rate * (w - piece.anchor) - theta * w

        if piece.height == 0.0:
            continue
        if math.isinf(piece.hi):
            total += math.exp(log_at(piece.lo)) / -slope
        else:
            total += _loglinear_integral(log_at(piece.lo), log_at(piece.hi), slope, piece.hi - piece.lo)
    return total


def _loglinear_integral(log_lo: float, log_hi: float, slope: float, length: float) -> float:
    """Integral over an interval of ``exp(linear)``, factoring out the larger end."""
    if slope >= 0.0:
        return math.exp(log_hi) * expm1_ratio(slope, length)
    return math.exp(log_lo) * expm1_ratio(-slope, length)


def loss_probability(law: WorkloadLaw) -> float:
    p, c = law.params, law.constants
    if math.isinf(p.t1):
        return 0.0
    return c.fbar_t1 * (p.p * c.fbar_t2 ** (p.d - 1) + (1.0 - p.p))


# k(x, T) = E[Gbar(x - W) 1{W <= T}]

def _closed_form_kind(law: WorkloadLaw, t: float) -> str | None:
    p = law.params
    if math.isinf(p.t1) and math.isinf(p.t2):
        return "no_discard" if math.isinf(t) else None
    if math.isfinite(p.t1) and p.t1 == p.t2 and t == p.t1:
        return "identical_thresholds"
    if math.isinf(p.t1) and math.isfinite(p.t2):
        if t == p.t2:
            return "no_loss_secondary"
        if math.isinf(t):
            return "no_loss_primary"
    return None


def _k_below_threshold_form(f0: float, lb: float, mu: float, t: float, x: float) -> float:
    # k(x, T) when the density on [0, T] is lb * f0 * exp(-(mu - lb) w)
    slow = mu - lb
    if x >= t:
        return f0 * math.exp(lb * t - mu * x)
    return f0 * (mu * math.exp(-slow * x) * expm1_ratio(slow, t - x) + math.exp(-slow * t))


def k_closed_form(law: WorkloadLaw, x: float, t: float) -> float:
    """Closed-form ``k(x, t)`` for the special policies that have one."""
    kind = _closed_form_kind(law, t)
    p, c = law.params, law.constants
    lb, lam, mu = law.lambda_bar, p.lam, p.mu
    if kind == "no_discard":
        return math.exp(-(mu - lb) * x)
    if kind in ("identical_thresholds", "no_loss_secondary"):
        return _k_below_threshold_form(c.f0, lb, mu, t, x)
    if kind == "no_loss_primary":
        t2 = p.t2
        base = _k_below_threshold_form(c.f0, lb, mu, t2, x)
        if x >= t2:
            # exp(lb t2 - mu x) (exp(lam (x - t2)) - 1) / lam, folded to avoid overflow
            extra = c.f0 * lb * (
                math.exp(lb * t2 - mu * x + lam * (x - t2)) * expm1_ratio(lam, x - t2)
                + math.exp((lb - lam) * t2 - (mu - lam) * x) / (mu - lam)
            )
        else:
            extra = lb * c.f0 * math.exp(-(mu - lb) * t2) / (mu - lam)
        return base + extra
    raise ValueError(f"no closed form for k(x, {t}) under {p}")


def k_stieltjes(law: WorkloadLaw, x: float, t: float) -> float:
    """Exact ``k(x, t)`` for exponential service by integrating each density piece."""
    mu = law.params.mu
    upper = min(x, t)
    # W in (x, t]: the replica's remaining service exceeds zero surely
    value = law.sf(upper) - law.sf(t) if t > x else 0.0
    value += law.constants.f0 * math.exp(-mu * x)
    for piece in law.pieces:
        hi = min(piece.hi, upper)
        if hi <= piece.lo or piece.height == 0.0:
            continue
        # exp(-mu (x - w)) * density is log-linear in w with slope mu - rate >= 0
        log_hi = math.log(piece.height) - piece.rate * (hi - piece.anchor) - mu * (x - hi)
        value += math.exp(log_hi) * expm1_ratio(mu - piece.rate, hi - piece.lo)
    return value


def k_quadrature(law: WorkloadLaw, service: ServiceLaw, x: float, t: float) -> float:
    """``k(x, t)`` by adaptive quadrature against the workload density."""
    value = law.constants.f0 * service.tail(x)
    for piece in law.pieces:
        hi = min(piece.hi, t)
        if hi <= piece.lo or piece.height == 0.0:
            continue
        cuts = [piece.lo] + ([x] if piece.lo < x < hi else []) + [hi]
        for lo_, hi_ in zip(cuts, cuts[1:]):
            part, _ = integrate.quad(
                lambda w: service.tail(x - w) * piece.density(w),
                lo_, hi_, epsabs=QUAD_EPSABS * 1e-2, epsrel=1e-12, limit=500,
            )
            value += part
    return value


def k_kernel(law: WorkloadLaw, service: ServiceLaw | None, x: float, t: float,
             method: str = "auto") -> float:
    """``k(x, t) = E[Gbar(x - W) 1{W <= t}]``.

    ``method`` is one of ``auto``, ``closed_form``, ``stieltjes`` or
    ``quadrature``.  ``auto`` picks the closed form when one exists, then the
    exact piecewise integral for exponential service, then quadrature.
    """
    if service is None:
        service = Exponential(law.params.mu)
    exponential = isinstance(service, Exponential) and service.mu == law.params.mu
    if method == "auto":
        if exponential and _closed_form_kind(law, t) is not None:
            method = "closed_form"
        elif exponential:
            method = "stieltjes"
        else:
            method = "quadrature"
    if method == "closed_form":
        return k_closed_form(law, x, t)
    if method == "stieltjes":
        if not exponential:
            raise ValueError("stieltjes path needs exponential service at the policy's rate")
        return k_stieltjes(law, x, t)
    if method == "quadrature":
        return k_quadrature(law, service, x, t)
    raise ValueError(f"unknown method {method!r}")


def audit_closed_forms(law: WorkloadLaw, rtol: float = 1e-6, n_points: int = 24) -> bool:
    """Check the closed-form kernels against the general piecewise integral.

    Returns False (after warning) when any applicable closed form differs by
    more than ``rtol`` relative on a grid of ``x``.
    """
    p = law.params
    thresholds = {t for t in (p.t1, p.t2, inf) if _closed_form_kind(law, t) is not None}
    if not thresholds:
        return True
    finite_knots = [t for t in (p.t1, p.t2) if math.isfinite(t)]
    span = max(finite_knots, default=0.0) + 10.0 / law.tail_rate
    xs = np.linspace(0.0, span, n_points)
    ok = True
    for t in thresholds:
        for x in xs:
            closed = k_closed_form(law, float(x), t)
            general = k_stieltjes(law, float(x), t)
            if abs(closed - general) > rtol * max(abs(general), 1e-300) and abs(closed - general) > 1e-15:
                warnings.warn(
                    f"closed form {_closed_form_kind(law, t)} for k(x, {t}) disagrees with the "
                    f"general integral at x={x:.4g}: {closed!r} vs {general!r}",
                    stacklevel=2,
                )
                ok = False
                break
    return ok


def response_tail(law: WorkloadLaw, service: ServiceLaw | None, x: float,
                  method: str = "auto") -> float:
    """``P(R > x, job admitted)``; at ``x = 0`` this is ``1 - P_L``."""
    p, c = law.params, law.constants
    k1 = k_kernel(law, service, x, p.t1, method)
    if p.p == 0.0 or p.d == 1:
        # no secondaries: the expression collapses to k1
        return k1
    k2 = k1 if p.t2 == p.t1 else k_kernel(law, service, x, p.t2, method)
    replicated = (c.fbar_t1 + k1) * (c.fbar_t2 + k2) ** (p.d - 1) - c.fbar_t1 * c.fbar_t2 ** (p.d - 1)
    return p.p * replicated + (1.0 - p.p) * k1


@dataclass(frozen=True)
class ResponseMetrics:
    tau: float
    p_loss: float
    quadrature_error: float


def truncation_point(law: WorkloadLaw, service: ServiceLaw | None = None,
                     method: str = "auto") -> float:
    """A point beyond which the response tail is below ``TAIL_CUTOFF``."""
    p = law.params
    knots = [t for t in (p.t2, p.t1) if math.isfinite(t)]
    last = max(knots, default=0.0)
    rate = law.tail_rate if math.isinf(p.t1) else p.mu
    x_max = last + 40.0 / rate
    while response_tail(law, service, x_max, method) >= TAIL_CUTOFF:
        x_max = last + 2.0 * (x_max - last)
    return x_max


def mean_response_time(law: WorkloadLaw, service: ServiceLaw | None = None,
                       method: str = "auto") -> ResponseMetrics:
    """Conditional mean response time of admitted jobs, with the loss probability.

    Integrates the response tail over ``[0, x_max]`` split at the thresholds;
    the reported error adds quadpack's estimates to a bound on the truncated
    tail.
    """
    if service is None:
        service = Exponential(law.params.mu)
    if method == "auto" and not audit_closed_forms(law):
        method = "stieltjes"
    p_loss = loss_probability(law)
    if p_loss > 1.0 - 1e-12:
        raise DegenerateLoss(f"loss probability {p_loss} leaves no admitted jobs")

    p = law.params
    x_max = truncation_point(law, service, method)
    cuts = sorted({0.0, x_max, *(t for t in (p.t2, p.t1) if math.isfinite(t) and t < x_max)})
    area, error = 0.0, 0.0
    for lo, hi in zip(cuts, cuts[1:]):
        if hi <= lo:
            continue
        part, err = integrate.quad(
            lambda x: response_tail(law, service, x, method),
            lo, hi, epsabs=QUAD_EPSABS, epsrel=1e-12, limit=1000,
        )
        area += part
        error += err
    decay = law.tail_rate if math.isinf(p.t1) else p.mu
    error += response_tail(law, service, x_max, method) / decay
    scale = 1.0 - p_loss
    return ResponseMetrics(tau=area / scale, p_loss=p_loss, quadrature_error=error / scale)


def tau_no_discard(params: PolicyParams) -> float:
    """Mean response time when nothing is ever discarded (both thresholds infinite)."""
    lb, mu, p, d = effective_rate(params), params.mu, params.p, params.d
    if lb >= mu:
        raise UnstableSystem(f"lambda_bar={lb} >= mu={mu}")
    return p / ((mu - lb) * d) + (1.0 - p) / (mu - lb)


def tau_idle_replication(params: PolicyParams) -> float:
    """Mean response time when secondaries only join idle servers (p=1, t1=inf, t2=0).

    Binomial sum over how many of the ``d - 1`` secondaries found an idle server.
    """
    lam, mu, d = params.lam, params.mu, params.d
    if lam >= mu:
        raise UnstableSystem(f"lam={lam} >= mu={mu}")
    f0 = (mu - lam) / (mu + lam * (d - 1))
    busy = 1.0 - f0
    total = 0.0
    for n in range(d):
        weight = math.comb(d - 1, n) * busy ** (d - 1 - n) * f0 ** (n + 1)
        total += weight * (d * mu / ((mu - lam) * (mu * (n + 1) - lam)) - (d - 1) / (mu * (n + 1)))
    return total


def evaluate(params: PolicyParams, service: ServiceLaw | None = None) -> tuple[WorkloadLaw, ResponseMetrics]:
    """Solve the equilibrium and compute ``tau`` and ``P_L`` in one call."""
    require_stable(params)
    law = WorkloadLaw.from_params(params)
    return law, mean_response_time(law, service)


def improvement_over_random(params: PolicyParams, tau: float) -> float:
    """Percentage reduction of ``tau`` relative to random routing, ``1 / (mu - lam)``."""
    if params.lam >= params.mu:
        return math.nan
    tau_random = 1.0 / (params.mu - params.lam)
    return 100.0 * (tau_random - tau) / tau_random
