"""Policy parameters, stability, and the equilibrium constants of the cavity queue.

A job arrives at total rate ``lam * n_servers``.  Its primary replica goes to
one uniformly chosen server and is served only if that server's workload is
at most ``t1``.  With probability ``p`` the dispatcher also sends ``d - 1``
secondary replicas to other servers, each served only if the workload there
is at most ``t2``.

In the large-system limit every queue behaves like an M/M/1 queue whose
arrival rate depends on its own workload: ``lambda_bar`` on ``[0, t2]``,
``lam`` on ``(t2, t1]`` and zero above ``t1``.  Its law is pinned down by
three numbers, ``F(0)``, ``1 - F(t1)`` and ``1 - F(t2)``.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParams, SingularSystem, UnstableSystem

inf = math.inf

# Below this gap the removable singularities at mu == lambda_bar (or lam)
# are evaluated through their limits.
DEGENERATE_GAP = 1e-9


def expm1_ratio(rate: float, w: float) -> float:
    """Return ``(1 - exp(-rate * w)) / rate`` for ``w >= 0``, including ``rate -> 0``."""
    if w == 0.0:
        return 0.0
    if math.isinf(w):
        if rate > 0.0:
            return 1.0 / rate
        return inf
    if abs(rate) < DEGENERATE_GAP:
        return w * (1.0 - 0.5 * rate * w)
    try:
        return -math.expm1(-rate * w) / rate
    except OverflowError:
        return inf


@dataclass(frozen=True)
class PolicyParams:
    """Parameters of the pi(p, t1, t2) policy.

    ``lam`` is the per-server arrival rate (jobs arrive at ``lam * n_servers``),
    ``d`` counts the primary plus ``d - 1`` secondaries, and thresholds may be
    ``math.inf``.
    """

    lam: float
    mu: float = 1.0
    n_servers: int = 20
    d: int = 1
    p: float = 0.0
    t1: float = inf
    t2: float = inf

    def __post_init__(self):
        for name in ("lam", "mu", "p", "t1", "t2"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise InvalidParams(f"{name} must be a real number, got {value!r}")
            if math.isnan(value):
                raise InvalidParams(f"{name} is NaN")
            object.__setattr__(self, name, float(value))
        for name in ("n_servers", "d"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value:
                raise InvalidParams(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))

        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise InvalidParams(f"lam must be positive and finite, got {self.lam}")
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise InvalidParams(f"mu must be positive and finite, got {self.mu}")
        if self.d < 1:
            raise InvalidParams(f"d must be >= 1, got {self.d}")
        if self.n_servers < self.d:
            raise InvalidParams(f"n_servers ({self.n_servers}) must be >= d ({self.d})")
        if not 0.0 <= self.p <= 1.0:
            raise InvalidParams(f"p must lie in [0, 1], got {self.p}")
        if self.t1 < 0 or self.t2 < 0:
            raise InvalidParams("thresholds must be non-negative")
        if self.t2 > self.t1:
            raise InvalidParams(f"t2 ({self.t2}) must not exceed t1 ({self.t1})")

    @property
    def lambda_bar(self) -> float:
        return effective_rate(self)

    def replace(self, **changes) -> "PolicyParams":
        fields = dict(
            lam=self.lam, mu=self.mu, n_servers=self.n_servers, d=self.d,
            p=self.p, t1=self.t1, t2=self.t2,
        )
        fields.update(changes)
        return PolicyParams(**fields)


def effective_rate(params: PolicyParams) -> float:
    """Potential replica arrival rate seen by a single queue.

    Every job puts its primary on a given queue at rate ``lam``; with
    probability ``p`` it also puts one of ``d - 1`` secondaries there, so the
    total is ``lam * (1 - p) + p * lam * d``.
    """
    return params.lam * (1.0 - params.p) + params.p * params.lam * params.d


class StabilityRegime(enum.Enum):
    ALWAYS_STABLE = "always_stable"
    STABLE_IFF_LAMBDA_LT_MU = "stable_iff_lambda_lt_mu"
    STABLE_IFF_LAMBDA_BAR_LT_MU = "stable_iff_lambda_bar_lt_mu"


@dataclass(frozen=True)
class Stability:
    regime: StabilityRegime
    stable: bool


def stability(params: PolicyParams) -> Stability:
    if math.isfinite(params.t1):
        return Stability(StabilityRegime.ALWAYS_STABLE, True)
    if math.isfinite(params.t2):
        return Stability(StabilityRegime.STABLE_IFF_LAMBDA_LT_MU, params.lam < params.mu)
    return Stability(
        StabilityRegime.STABLE_IFF_LAMBDA_BAR_LT_MU, effective_rate(params) < params.mu
    )


def require_stable(params: PolicyParams) -> None:
    verdict = stability(params)
    if not verdict.stable:
        raise UnstableSystem(
            f"{verdict.regime.value} violated: lam={params.lam}, "
            f"lambda_bar={effective_rate(params)}, mu={params.mu}"
        )


@dataclass(frozen=True)
class EquilibriumConstants:
    f0: float
    fbar_t1: float
    fbar_t2: float


def zero_mass_residual(params: PolicyParams, c: EquilibriumConstants) -> float:
    """Residual of the rate-balance identity tying F(0) to the two tails."""
    lam, mu, lb = params.lam, params.mu, effective_rate(params)
    rhs = 1.0 - lb / mu + (lb - lam) / mu * c.fbar_t2 + lam / mu * c.fbar_t1
    return c.f0 - rhs


def solve_constants(params: PolicyParams) -> EquilibriumConstants:
    """Solve for ``(F(0), 1 - F(t1), 1 - F(t2))``.

    The closed-form workload CDF is affine in the three constants, so
    requiring it to return ``1 - fbar`` at ``t1`` and ``t2``, together with
    the rate-balance identity for ``F(0)``, gives a linear system.  Infinite
    thresholds pin their tail to zero and shrink the system.
    """
    require_stable(params)
    lam, mu, lb = params.lam, params.mu, effective_rate(params)
    t1, t2 = params.t1, params.t2
    slow, fast = mu - lb, mu - lam

    if math.isinf(t2):
        return EquilibriumConstants(f0=1.0 - lb / mu, fbar_t1=0.0, fbar_t2=0.0)

    # Solved for F(t2) = F(0) * cdf_t2_per_f0 rather than F(0): the ratio
    # overflows for long thresholds under overload while its inverse -> 0.
    f0_per_cdf_t2 = 1.0 / (1.0 + lb * expm1_ratio(slow, t2))
    if math.isinf(t1):
        # unknowns (F(t2), fbar_t2)
        matrix = np.array([
            [f0_per_cdf_t2, -(lb - lam) / mu],
            [1.0, 1.0],
        ])
        rhs = np.array([1.0 - lb / mu, 1.0])
        cdf_t2, fbar_t2 = _solve(matrix, rhs)
        return _clip_constants(cdf_t2 * f0_per_cdf_t2, 0.0, fbar_t2)

    # The closed form at t1 equals F(t2) + slope * expm1_ratio(fast, t1 - t2)
    # with slope = fast * fbar_t2 + lam * fbar_t1.  Writing it that way instead
    # of expanding every exponential keeps the row O(1) when lambda_bar > mu.
    bridge = expm1_ratio(fast, t1 - t2)
    # unknowns (F(t2), fbar_t1, fbar_t2)
    matrix = np.array([
        [f0_per_cdf_t2, -lam / mu, -(lb - lam) / mu],
        [1.0, 0.0, 1.0],
        [0.0, -(1.0 + lam * bridge), 1.0 - fast * bridge],
    ])
    rhs = np.array([1.0 - lb / mu, 1.0, 0.0])
    cdf_t2, fbar_t1, fbar_t2 = _solve(matrix, rhs)
    if t1 == t2:
        fbar_t1 = fbar_t2
    return _clip_constants(cdf_t2 * f0_per_cdf_t2, fbar_t1, fbar_t2)


def _solve(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(matrix)):
        raise SingularSystem("constant system has non-finite coefficients")
    # row equilibration; the t1 row grows like exp((lambda_bar - mu) t1) when overloaded
    scale = np.abs(matrix).max(axis=1)
    matrix = matrix / scale[:, None]
    rhs = rhs / scale
    if np.linalg.cond(matrix) > 1e13:
        raise SingularSystem("constant system is numerically singular")
    return np.linalg.solve(matrix, rhs)


def _clip_constants(f0: float, fbar_t1: float, fbar_t2: float) -> EquilibriumConstants:
    values = [f0, fbar_t1, fbar_t2]
    for v in values:
        if not -1e-9 <= v <= 1 + 1e-9:
            raise SingularSystem(f"constant solve left [0, 1]: {values}")
    f0, fbar_t1, fbar_t2 = (min(max(float(v), 0.0), 1.0) for v in values)
    fbar_t1 = min(fbar_t1, fbar_t2)  # tails are ordered; only rounding can break it
    return EquilibriumConstants(f0=f0, fbar_t1=fbar_t1, fbar_t2=fbar_t2)


# Closed forms for special cases.  Used as cross-checks, not by the solver.

def f0_identical_thresholds(params: PolicyParams) -> float:
    """F(0) when ``t1 == t2 == T`` (finite)."""
    lb, mu, t = effective_rate(params), params.mu, params.t1
    if abs(mu - lb) < DEGENERATE_GAP:
        return 1.0 / (lb * t + 2.0)
    rho = lb / mu
    return (1.0 - rho) / (1.0 - rho * rho * math.exp(-(mu - lb) * t))


def f0_no_loss(params: PolicyParams) -> float:
    """F(0) when ``t1`` is infinite, in the normalized-load form.

    Numerator and denominator both vanish at ``lambda_bar == mu``.
    """
    lb, lam, mu, t2 = effective_rate(params), params.lam, params.mu, params.t2
    rho, rho_bar = lam / mu, lb / mu
    num = (1.0 - rho) * (1.0 - rho_bar)
    den = (1.0 - rho) + rho_bar * (rho - rho_bar) * math.exp(-(mu - lb) * t2)
    return num / den


def f0_no_loss_normalization(params: PolicyParams) -> float:
    """F(0) when ``t1`` is infinite, written as one over the total unnormalized mass."""
    lb, lam, mu, t2 = effective_rate(params), params.lam, params.mu, params.t2
    slow = mu - lb
    mass = lb * (expm1_ratio(slow, t2) + math.exp(-slow * t2) / (mu - lam)) + 1.0
    return 1.0 / mass


def f0_idle_replication(params: PolicyParams) -> float:
    """F(0) for replication onto idle servers only (p=1, t1=inf, t2=0)."""
    lam, mu, d = params.lam, params.mu, params.d
    return (mu - lam) / (mu + lam * (d - 1))


def cross_check_constants(params: PolicyParams, tol: float = 1e-9) -> dict:
    """Compare the solver's F(0) with every applicable closed form.

    Returns ``{name: absolute_difference}`` and warns about any entry above
    ``tol``.
    """
    solved = solve_constants(params).f0
    checks = {}
    if math.isfinite(params.t1) and params.t1 == params.t2:
        checks["identical_thresholds"] = f0_identical_thresholds(params)
    if math.isinf(params.t1) and math.isfinite(params.t2):
        if abs(params.mu - effective_rate(params)) > 1e-6 * params.mu:
            checks["no_loss"] = f0_no_loss(params)
        checks["no_loss_normalization"] = f0_no_loss_normalization(params)
        if params.t2 == 0.0 and params.p == 1.0:
            checks["idle_replication"] = f0_idle_replication(params)
    if math.isinf(params.t1) and math.isinf(params.t2):
        checks["no_discard"] = 1.0 - effective_rate(params) / params.mu
    diffs = {name: abs(value - solved) for name, value in checks.items()}
    for name, diff in diffs.items():
        if diff > tol:
            warnings.warn(f"closed form {name} disagrees with solver by {diff:.3g}", stacklevel=2)
    return diffs
