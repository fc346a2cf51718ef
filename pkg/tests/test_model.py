import math
import warnings

import pytest
from hypothesis import given, settings

from discard_lb.errors import InvalidParams, SingularSystem, UnstableSystem
from discard_lb.model import (
    PolicyParams,
    StabilityRegime,
    cross_check_constants,
    effective_rate,
    f0_identical_thresholds,
    f0_idle_replication,
    f0_no_loss,
    f0_no_loss_normalization,
    solve_constants,
    stability,
    zero_mass_residual,
)
from oracles import LevelCrossingLaw
from strategies import stable_params

inf = math.inf


@pytest.mark.parametrize("kwargs", [
    dict(lam=0.0),
    dict(lam=-1.0),
    dict(lam=inf),
    dict(lam=math.nan),
    dict(lam=0.5, mu=0.0),
    dict(lam=0.5, p=1.5),
    dict(lam=0.5, p=-0.1),
    dict(lam=0.5, d=0),
    dict(lam=0.5, d=5, n_servers=4),
    dict(lam=0.5, t1=1.0, t2=2.0),
    dict(lam=0.5, t1=-1.0, t2=-1.0),
    dict(lam=0.5, d=2.5),
    dict(lam=True),
    dict(lam="0.5"),
])
def test_invalid_params_rejected(kwargs):
    with pytest.raises(InvalidParams):
        PolicyParams(**kwargs)


def test_params_coerced_and_replace():
    par = PolicyParams(lam=1, d=3.0, n_servers=10, p=1, t1=5, t2=5)
    assert isinstance(par.lam, float) and isinstance(par.d, int)
    assert par.replace(lam=0.2).lam == 0.2
    with pytest.raises(InvalidParams):
        par.replace(t2=6.0)


def test_effective_rate_counts_every_replica():
    assert effective_rate(PolicyParams(0.1, d=3, p=1.0)) == pytest.approx(0.3)
    assert effective_rate(PolicyParams(0.1, d=3, p=0.0)) == pytest.approx(0.1)
    assert effective_rate(PolicyParams(0.2, d=4, p=0.5)) == pytest.approx(0.2 * 0.5 + 0.5 * 0.2 * 4)
    assert isinstance(effective_rate(PolicyParams(0.1, d=3, p=1.0)), float)


def test_stability_regimes():
    assert stability(PolicyParams(5.0, d=3, p=1, t1=2, t2=1)).regime is StabilityRegime.ALWAYS_STABLE
    assert stability(PolicyParams(5.0, d=3, p=1, t1=2, t2=1)).stable
    no_loss = stability(PolicyParams(0.9, d=6, p=1, t2=3))
    assert no_loss.regime is StabilityRegime.STABLE_IFF_LAMBDA_LT_MU and no_loss.stable
    assert not stability(PolicyParams(1.0, d=6, p=1, t2=3)).stable
    no_discard = stability(PolicyParams(0.3, d=3, p=1))
    assert no_discard.regime is StabilityRegime.STABLE_IFF_LAMBDA_BAR_LT_MU
    assert no_discard.stable
    assert not stability(PolicyParams(0.34, d=3, p=1)).stable


@pytest.mark.parametrize("params", [
    PolicyParams(0.7, d=3, p=1),
    PolicyParams(1.0, d=2, p=1, t2=0.0),
])
def test_unstable_raises(params):
    with pytest.raises(UnstableSystem):
        solve_constants(params)


ORACLE_CASES = [
    (0.3, 1.0, 3, 1.0, 5.0, 5.0),
    (0.16, 1.0, 3, 1.0, 5.0, 5.0),
    (0.5, 1.0, 4, 0.5, 3.0, 1.0),
    (0.9, 1.0, 6, 1.0, inf, 3.0),
    (0.51, 1.0, 3, 1.0, inf, 2.0),
    (0.21, 1.0, 3, 1.0, inf, 0.0),
    (1.2, 1.0, 3, 1.0, 5.0, 2.0),
    (2.0, 1.0, 3, 1.0, 6.0, 4.0),
    (0.4, 2.0, 5, 0.3, 1.0, 0.0),
    (0.3, 1.0, 3, 1.0, 0.0, 0.0),
    (0.6, 1.5, 2, 0.7, 2.5, 2.5),
]


@pytest.mark.parametrize("case", ORACLE_CASES)
def test_constants_match_level_crossing(case):
    lam, mu, d, p, t1, t2 = case
    c = solve_constants(PolicyParams(lam, mu, 20, d, p, t1, t2))
    ref = LevelCrossingLaw(*case)
    assert c.f0 == pytest.approx(ref.f0, rel=1e-9, abs=1e-12)
    if t1 < inf:
        assert c.fbar_t1 == pytest.approx(1 - ref.cdf(t1), abs=1e-10)
    if t2 < inf:
        assert c.fbar_t2 == pytest.approx(1 - ref.cdf(t2), abs=1e-10)


def test_identical_thresholds_example():
    # value frozen from the level-crossing oracle
    c = solve_constants(PolicyParams(0.3, d=3, p=1, t1=5, t2=5))
    assert c.f0 == pytest.approx(0.19657558813595458, rel=1e-12)
    assert c.fbar_t1 == c.fbar_t2


def test_no_discard_constants():
    c = solve_constants(PolicyParams(0.1, d=3, p=1))
    assert (c.f0, c.fbar_t1, c.fbar_t2) == (pytest.approx(0.7), 0.0, 0.0)


def test_long_thresholds_under_overload_stay_finite():
    c = solve_constants(PolicyParams(2.0, d=3, p=1, t1=400, t2=300))
    assert c.f0 == 0.0
    assert c.fbar_t2 == pytest.approx(1.0)
    assert c.fbar_t1 == pytest.approx(0.5)
    c = solve_constants(PolicyParams(5.0, d=6, p=1, t1=50, t2=40))
    assert 0 <= c.fbar_t1 <= c.fbar_t2 <= 1


def test_closed_forms_agree_with_solver():
    assert f0_identical_thresholds(PolicyParams(0.3, d=3, p=1, t1=5, t2=5)) == pytest.approx(
        solve_constants(PolicyParams(0.3, d=3, p=1, t1=5, t2=5)).f0, abs=1e-12)
    par = PolicyParams(0.5, d=4, p=1, t2=1.5)
    assert f0_no_loss(par) == pytest.approx(f0_no_loss_normalization(par), abs=1e-12)
    par = PolicyParams(0.4, d=5, p=1, t2=0.0)
    assert f0_idle_replication(par) == pytest.approx(solve_constants(par).f0, abs=1e-12)


def test_identical_thresholds_critical_load_limit():
    par = PolicyParams(1.0 / 3.0, d=3, p=1, t1=2, t2=2)
    assert f0_identical_thresholds(par) == pytest.approx(1 / (1.0 * 2 + 2))
    assert solve_constants(par).f0 == pytest.approx(0.25, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(stable_params())
def test_constants_are_probabilities_and_balance_rates(par):
    c = solve_constants(par)
    assert 0 <= c.f0 <= 1
    assert 0 <= c.fbar_t1 <= c.fbar_t2 <= 1
    assert c.f0 + c.fbar_t2 <= 1 + 1e-12
    assert abs(zero_mass_residual(par, c)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(stable_params())
def test_special_case_closed_forms_at_1e9(par):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        diffs = cross_check_constants(par, tol=1e-9)
    assert all(v <= 1e-9 for v in diffs.values())


def test_cross_check_warns_on_disagreement(monkeypatch):
    import discard_lb.model as model
    monkeypatch.setattr(model, "f0_identical_thresholds", lambda params: 0.5)
    with pytest.warns(UserWarning, match="identical_thresholds"):
        model.cross_check_constants(PolicyParams(0.3, d=3, p=1, t1=5, t2=5))


def test_singular_system_is_a_domain_error():
    assert issubclass(SingularSystem, Exception)
    from discard_lb.errors import DomainError
    assert issubclass(SingularSystem, DomainError)
