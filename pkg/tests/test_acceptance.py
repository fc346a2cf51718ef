"""Acceptance suite: one verdict line per criterion, at the pinned tolerances.

Run ``pytest tests/test_acceptance.py -v``; the verdicts are repeated in the
terminal summary under "acceptance criteria".
"""

import json
import math
import time
from pathlib import Path

import pytest

import test_analytic
import test_model
import test_simulate
from acceptance_report import record
from discard_lb.analytic import (
    WorkloadLaw,
    evaluate,
    improvement_over_random,
    mean_response_time,
    tau_idle_replication,
    tau_no_discard,
)
from discard_lb.cli import main
from discard_lb.errors import UnstableSystem
from discard_lb.model import PolicyParams, cross_check_constants
from discard_lb.simulate import SimConfig, convergence_study, run

inf = math.inf
REFERENCE = json.loads((Path(__file__).parent / "data" / "reference_series.json").read_text())


def test_criterion_1_no_discard_closed_form():
    worst, slowest = 0.0, 0.0
    for lam, expected in REFERENCE["no_discard_d3"]["th"]:
        par = PolicyParams(lam, 1.0, 20, 3, 1.0)
        start = time.perf_counter()
        for _ in range(1000):
            tau = tau_no_discard(par)
        slowest = max(slowest, (time.perf_counter() - start) / 1000)
        worst = max(worst, abs(tau - expected) / expected)
    ok = worst <= 1e-9 and slowest < 1e-3
    record(1, ok, f"max rel err {worst:.2e} (tol 1e-9) over {len(REFERENCE['no_discard_d3']['th'])} "
                  f"points, {slowest * 1e6:.1f} us per call (limit 1 ms)")
    assert ok


def test_criterion_2_no_loss_general_path():
    series = dict(REFERENCE["no_loss_t2_2"]["d3"])
    worst, slowest = 0.0, 0.0
    for lam in (0.01, 0.11, 0.31, 0.51, 0.71, 0.91):
        start = time.perf_counter()
        _, metrics = evaluate(PolicyParams(lam, 1.0, 20, 3, 1.0, inf, 2.0))
        slowest = max(slowest, time.perf_counter() - start)
        worst = max(worst, abs(metrics.tau - series[lam]) / series[lam])
    ok = worst <= 1e-4 and slowest < 1.0
    record(2, ok, f"max rel err {worst:.2e} (tol 1e-4), slowest point {slowest * 1e3:.1f} ms (limit 1 s)")
    assert ok


def test_criterion_3_idle_replication():
    points = list(REFERENCE["idle_replication"]["d3"]) + list(REFERENCE["idle_replication_d3"]["th"])
    worst, sum_gap = 0.0, 0.0
    for lam, expected in points:
        par = PolicyParams(lam, 1.0, 20, 3, 1.0, inf, 0.0)
        law = WorkloadLaw.from_params(par)
        tau = mean_response_time(law, method="quadrature").tau
        worst = max(worst, abs(tau - expected) / expected)
        sum_gap = max(sum_gap, abs(tau_idle_replication(par) - tau) / tau)
    ok = worst <= 1e-4
    record(3, ok, f"max rel err {worst:.2e} (tol 1e-4) over {len(points)} points via quadrature; "
                  f"binomial-sum form differs by at most {sum_gap:.1e} relative (reported only)")
    assert ok


def test_criterion_4_improvement_table():
    table = REFERENCE["improvement_no_discard"]
    failures, worst = [], 0.0
    for d_key, row in table.items():
        d = int(d_key[1:])
        for lam_key, expected in row.items():
            par = PolicyParams(float(lam_key), 1.0, 20, d, 1.0)
            if expected is None:
                # the table marks this cell as not applicable: the policy is unstable there
                with pytest.raises(UnstableSystem):
                    evaluate(par)
                continue
            _, metrics = evaluate(par)
            # the table reports two decimals; compare at that precision so that an exact
            # zero does not miss the boundary by a rounding residue
            gain = round(improvement_over_random(par, metrics.tau), 2) + 0.0
            gap = abs(gain - expected)
            worst = max(worst, gap)
            if gap > 1.0:
                failures.append(f"d={d} lambda={lam_key}: {gain:.2f}% vs table {expected}%")
    ok = not failures
    detail = f"max abs gap {worst:.2f} points (tol 1.0)"
    if failures:
        detail += "; outside tolerance: " + "; ".join(failures)
    record(4, ok, detail)
    assert ok, detail


def test_criterion_5_simulation_convergence():
    start = time.perf_counter()
    worst = 0.0
    for lam, _ in REFERENCE["no_discard_d3"]["th"]:
        if lam > 0.19 + 1e-12:
            continue
        par = PolicyParams(lam, 1.0, 10, 3, 1.0)
        stats = run(SimConfig(par, n_arrivals=100_000, n_replications=20, seed=5))
        worst = max(worst, abs(stats.tau_hat - tau_no_discard(par)) / tau_no_discard(par))
    elapsed = time.perf_counter() - start

    par = PolicyParams(0.11, 1.0, 10, 3, 1.0)
    rows = convergence_study(par, [3, 5, 8, 10], SimConfig(par, seed=6))
    trend = all(
        b.gap <= a.gap + (a.tau_ci + b.tau_ci) / a.tau_analytic for a, b in zip(rows, rows[1:])
    )
    ok = worst < 0.05 and elapsed < 30.0 and trend
    gaps = ", ".join(f"N={r.n}: {100 * r.gap:.2f}%" for r in rows)
    record(5, ok, f"max rel gap {100 * worst:.2f}% (limit 5%) in {elapsed:.1f} s (limit 30 s); "
                  f"gap by N at lambda=0.11 [{gaps}] {'decreasing' if trend else 'NOT decreasing'} up to CI overlap")
    assert ok


def test_criterion_6_finite_threshold_simulation():
    par = PolicyParams(0.16, 1.0, 10, 3, 1.0, 5.0, 5.0)
    stats = run(SimConfig(par, seed=7))
    _, metrics = evaluate(par)
    tau_gap = abs(stats.tau_hat - metrics.tau) / metrics.tau

    big = par.replace(n_servers=100)
    big_stats = run(SimConfig(big, seed=8))
    _, big_metrics = evaluate(big)
    standard_error = big_stats.p_loss_ci_halfwidth / 1.959963984540054
    z = abs(big_stats.p_loss_hat - big_metrics.p_loss) / standard_error
    ok = tau_gap < 0.05 and z < 3.0
    record(6, ok, f"N=10 tau {stats.tau_hat:.4f} vs {metrics.tau:.4f} ({100 * tau_gap:.2f}%, limit 5%); "
                  f"N=100 loss {big_stats.p_loss_hat:.3g} vs {big_metrics.p_loss:.3g}, "
                  f"{z:.2f} standard errors (limit 3)")
    assert ok


def _check(name, fn, *args):
    try:
        fn(*args)
        return None
    except AssertionError as exc:
        return f"{name}: {exc}"


def test_criterion_7_property_suites():
    problems = []
    for par in test_analytic._random_stable_sets(20):
        problems.append(_check("mgf vs cdf", test_analytic.test_mgf_matches_cdf, par))
    for case in test_analytic.CASES:
        problems.append(_check("kernel integral", test_analytic.test_kernel_integral_identity, case))

    special = 0.0
    for lam in (0.05, 0.2, 0.45, 0.8):
        for d in (1, 2, 3, 6):
            for t1, t2 in ((2.0, 2.0), (inf, 1.5), (inf, 0.0), (inf, inf)):
                par = PolicyParams(lam / (d if math.isinf(t1) and math.isinf(t2) else 1), 1.0, 20, d, 1.0, t1, t2)
                special = max(special, *cross_check_constants(par).values(), 0.0)
                if t1 == inf and t2 == 0.0:
                    special = max(special, abs(tau_idle_replication(par) - evaluate(par)[1].tau))
    if special > 1e-9:
        problems.append(f"special cases differ by {special:.2e}")

    mm1 = 0.0
    for lam in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9):
        tau = evaluate(PolicyParams(lam, 1.0, 20, 1, 0.0))[1].tau
        mm1 = max(mm1, abs(tau - 1 / (1 - lam)) / (1 / (1 - lam)))
    if mm1 > 1e-10:
        problems.append(f"M/M/1 reduction off by {mm1:.2e}")

    problems.append(_check("KS", test_simulate.test_random_routing_workload_is_mm1))
    problems.append(_check("monotone", test_analytic.test_tau_monotone_in_identical_threshold))
    problems.append(_check("constants", test_model.test_closed_forms_agree_with_solver))
    problems = [p for p in problems if p]
    ok = not problems
    record(7, ok, "MGF/CDF 1e-8 on 20 sets x 5 thetas, kernel integral identity 1e-8, "
                  f"special cases {special:.1e} (tol 1e-9), M/M/1 {mm1:.1e} (tol 1e-10), "
                  "KS at 1% on 1e5 samples, monotone tau and loss in T"
                  + ("" if ok else "; failures: " + " | ".join(problems)))
    assert ok


def test_criterion_8_determinism(tmp_path):
    sweep = tmp_path / "sweep.json"
    sweep.write_text(json.dumps({
        "base": {"lambda": 0.1, "n_servers": 10, "d": 3, "p": 1, "t1": 5, "t2": 5},
        "axis": "lambda", "values": [0.1, 0.3], "outputs": ["tau", "tau_sim", "tau_ci", "gap"],
        "sim": {"n_arrivals": 20_000, "n_replications": 4},
    }))
    simulate = tmp_path / "simulate.json"
    simulate.write_text(json.dumps({"base": {"lambda": 0.16, "n_servers": 10, "d": 3, "p": 1,
                                             "t1": 5, "t2": 5},
                                    "sim": {"n_arrivals": 20_000, "n_replications": 4}}))
    same = []
    for command, cfg in (("sweep", sweep), ("simulate", simulate)):
        outs = []
        for attempt in range(2):
            out = tmp_path / f"{command}{attempt}.csv"
            assert main([command, "--config", str(cfg), "--seed", "123", "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        same.append(outs[0] == outs[1])
    ok = all(same)
    record(8, ok, "sweep and simulate CSVs byte-identical across two runs with seed 123")
    assert ok
