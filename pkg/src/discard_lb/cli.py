"""Command-line front end.

    discard-lb analytic --lambda 0.11 --d 3 --p 1
    discard-lb simulate --config experiments/simulate_random_routing.json --seed 7
    discard-lb sweep    --config experiments/no_loss_t2_2_vs_lambda_d3.json --out out.csv
    discard-lb validate --config experiments/validate_no_discard.json --threads 0

Configs are JSON.  ``base`` holds the policy (``lambda``, ``mu``,
``n_servers``, ``d``, ``p``, ``t1``, ``t2``; thresholds may be ``"inf"``),
``sim`` the simulation settings, and sweeps add ``axis``, ``values`` and
``outputs``.  An optional ``command`` names the subcommand the file is meant
for and ``description`` is free text.  Exit status is 0 on success, 1 on I/O
or parse errors, 2 on domain errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import simulate as sim
from .analytic import evaluate, improvement_over_random
from .errors import DomainError, InvalidConfig
from .model import PolicyParams, effective_rate

AXES = ("lambda", "t", "t2", "d", "p", "n_servers")
OUTPUTS = ("tau", "p_loss", "tau_analytic", "tau_sim", "gap",
           "tau_ci", "p_loss_sim", "p_loss_ci", "improvement", "lambda_bar")
SIM_OUTPUTS = {"tau_sim", "gap", "tau_ci", "p_loss_sim", "p_loss_ci"}

ANALYTIC_HEADER = ["lambda", "mu", "d", "p", "t1", "t2", "lambda_bar", "f0",
                   "fbar_t1", "fbar_t2", "p_loss", "tau", "quadrature_error"]
SIMULATE_HEADER = ["lambda", "mu", "n_servers", "d", "p", "t1", "t2", "n_arrivals",
                   "n_replications", "seed", "tau_sim", "tau_ci", "p_loss_sim",
                   "p_loss_ci", "n_admitted", "n_lost"]
VALIDATE_HEADER = ["n", "tau_sim", "tau_ci", "tau_analytic", "gap",
                   "p_loss_sim", "p_loss_ci", "p_loss_analytic"]


class CliError(Exception):
    """Raised for unusable input; mapped to exit status 1."""


# parsing

def _real(value, name):
    if isinstance(value, str):
        text = value.strip().lower()
        if text in ("inf", "+inf", "infinity"):
            return math.inf
        try:
            return float(text)
        except ValueError:
            raise InvalidConfig(f"{name}: cannot read {value!r} as a number") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidConfig(f"{name}: expected a number, got {value!r}")
    return value


PARAM_KEYS = {"lambda": "lam", "lam": "lam", "mu": "mu", "n_servers": "n_servers",
              "d": "d", "p": "p", "t1": "t1", "t2": "t2"}


def parse_params(raw: dict) -> PolicyParams:
    if not isinstance(raw, dict):
        raise InvalidConfig("'base' must be an object")
    kwargs = {}
    for key, value in raw.items():
        if key not in PARAM_KEYS:
            raise InvalidConfig(f"unknown policy field {key!r}")
        kwargs[PARAM_KEYS[key]] = _real(value, key)
    if "lam" not in kwargs:
        raise InvalidConfig("policy needs 'lambda'")
    return PolicyParams(**kwargs)


SIM_KEYS = ("n_arrivals", "warmup_fraction", "n_replications", "seed", "reservoir_size")


def parse_sim(raw: dict | None, params: PolicyParams, seed: int | None) -> sim.SimConfig:
    raw = dict(raw or {})
    unknown = set(raw) - set(SIM_KEYS)
    if unknown:
        raise InvalidConfig(f"unknown sim fields {sorted(unknown)}")
    raw.setdefault("reservoir_size", 0)
    if seed is not None:
        raw["seed"] = seed
    return sim.SimConfig(params=params, **raw)


@dataclass(frozen=True)
class SweepSpec:
    base: PolicyParams
    axis: str
    values: tuple
    outputs: tuple
    sim: dict | None = None


def parse_sweep(config: dict) -> SweepSpec:
    base = parse_params(config.get("base", {}))
    axis = config.get("axis")
    if axis not in AXES:
        raise InvalidConfig(f"axis must be one of {AXES}, got {axis!r}")
    values = config.get("values")
    if not isinstance(values, list) or not values:
        raise InvalidConfig("values must be a non-empty list")
    values = tuple(_real(v, "values") for v in values)
    if any(b <= a for a, b in zip(values, values[1:])):
        raise InvalidConfig("values must be strictly increasing")
    outputs = tuple(config.get("outputs", ["tau", "p_loss"]))
    bad = [o for o in outputs if o not in OUTPUTS]
    if bad or not outputs:
        raise InvalidConfig(f"outputs must be a non-empty subset of {OUTPUTS}, got {bad}")
    if SIM_OUTPUTS & set(outputs) and config.get("sim") is None:
        raise InvalidConfig(f"outputs {sorted(SIM_OUTPUTS & set(outputs))} need a 'sim' block")
    return SweepSpec(base, axis, values, outputs, config.get("sim"))


def substitute(base: PolicyParams, axis: str, value: float) -> PolicyParams:
    if axis == "lambda":
        return base.replace(lam=value)
    if axis == "t":
        return base.replace(t1=value, t2=value)
    return base.replace(**{axis: value})


# output

def fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, ".12g")
    return str(value)


def render_csv(header, rows) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buffer.getvalue()


def write_output(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    with open(path, "w", newline="", encoding="utf-8") as handle:
        handle.write(text)


# commands

def analytic_row(params: PolicyParams) -> list:
    law, metrics = evaluate(params)
    c = law.constants
    return [params.lam, params.mu, params.d, params.p, params.t1, params.t2,
            effective_rate(params), c.f0, c.fbar_t1, c.fbar_t2,
            metrics.p_loss, metrics.tau, metrics.quadrature_error]


def cmd_analytic(params: PolicyParams, out: str | None) -> int:
    write_output(render_csv(ANALYTIC_HEADER, [analytic_row(params)]), out)
    return 0


def cmd_simulate(config: sim.SimConfig, out: str | None, threads: int) -> int:
    stats = sim.run(config, threads)
    par = config.params
    row = [par.lam, par.mu, par.n_servers, par.d, par.p, par.t1, par.t2,
           config.n_arrivals, config.n_replications, config.seed,
           stats.tau_hat, stats.tau_ci_halfwidth, stats.p_loss_hat,
           stats.p_loss_ci_halfwidth, stats.n_admitted, stats.n_lost]
    write_output(render_csv(SIMULATE_HEADER, [row]), out)
    return 0


def sweep_point(spec: SweepSpec, value: float, seed: int | None) -> list:
    """Outputs for one axis value, or blanks plus an error message."""
    try:
        params = substitute(spec.base, spec.axis, value)
        found = {"lambda_bar": effective_rate(params)}
        if {"tau", "tau_analytic", "p_loss", "gap", "improvement"} & set(spec.outputs):
            _, metrics = evaluate(params)
            found.update(tau=metrics.tau, tau_analytic=metrics.tau, p_loss=metrics.p_loss,
                         improvement=improvement_over_random(params, metrics.tau))
        if SIM_OUTPUTS & set(spec.outputs):
            stats = sim.run(parse_sim(spec.sim, params, seed))
            found.update(tau_sim=stats.tau_hat, tau_ci=stats.tau_ci_halfwidth,
                         p_loss_sim=stats.p_loss_hat, p_loss_ci=stats.p_loss_ci_halfwidth)
            if "tau" in found:
                found["gap"] = (stats.tau_hat - found["tau"]) / found["tau"]
        return [value] + [found.get(name, math.nan) for name in spec.outputs] + [""]
    except (DomainError, ValueError) as exc:
        return [value] + [""] * len(spec.outputs) + [f"{type(exc).__name__}: {exc}"]


def cmd_sweep(spec: SweepSpec, out: str | None, seed: int | None = None, threads: int = 1) -> int:
    with ThreadPoolExecutor(sim._n_workers(threads, len(spec.values))) as pool:
        rows = list(pool.map(lambda v: sweep_point(spec, v, seed), spec.values))
    write_output(render_csv([spec.axis, *spec.outputs, "error"], rows), out)
    return 0 if any(not row[-1] for row in rows) else 2


def cmd_validate(params: PolicyParams, n_grid, config: sim.SimConfig,
                 out: str | None, threads: int = 1) -> int:
    rows = sim.convergence_study(params, n_grid, config, threads)
    table = [[r.n, r.tau_sim, r.tau_ci, r.tau_analytic, r.gap,
              r.p_loss_sim, r.p_loss_ci, r.p_loss_analytic] for r in rows]
    write_output(render_csv(VALIDATE_HEADER, table), out)
    return 0


# argument handling

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="discard-lb", description=__doc__.split("\n\n")[0])
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [
        ("analytic", "large-system tau and loss probability for one policy"),
        ("simulate", "finite-system simulation of one policy"),
        ("sweep", "vary one parameter and tabulate outputs"),
        ("validate", "simulation vs large-system limit over a grid of server counts"),
    ]:
        sub = commands.add_parser(name, help=text, description=text)
        sub.add_argument("--config", help="JSON configuration file")
        sub.add_argument("--out", help="CSV destination (default: stdout)")
        sub.add_argument("--seed", type=int, help="base seed, overrides the config")
        sub.add_argument("--threads", type=int, default=1, help="worker threads, 0 = one per CPU")
        if name in ("analytic", "simulate"):
            policy = sub.add_argument_group("policy (used when no --config is given)")
            policy.add_argument("--lambda", dest="lam", type=float)
            policy.add_argument("--mu", type=float)
            policy.add_argument("--n-servers", type=int)
            policy.add_argument("--d", type=int)
            policy.add_argument("--p", type=float)
            policy.add_argument("--t1", type=str)
            policy.add_argument("--t2", type=str)
    return parser


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as handle:
            config = json.load(handle)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(config, dict):
        raise CliError(f"{path}: top level must be an object")
    return config


def _config_from_flags(args) -> dict:
    base = {}
    for flag, key in [("lam", "lambda"), ("mu", "mu"), ("n_servers", "n_servers"),
                      ("d", "d"), ("p", "p"), ("t1", "t1"), ("t2", "t2")]:
        value = getattr(args, flag)
        if value is not None:
            base[key] = value
    if not base:
        raise CliError("give --config or at least --lambda")
    return {"base": base}


def dispatch(args) -> int:
    if args.config:
        config = load_config(args.config)
        wanted = config.get("command", args.command)
        if wanted != args.command:
            raise CliError(f"{args.config} is a {wanted!r} config, not {args.command!r}")
    elif args.command in ("analytic", "simulate"):
        config = _config_from_flags(args)
    else:
        raise CliError(f"{args.command} needs --config")

    if args.command == "sweep":
        return cmd_sweep(parse_sweep(config), args.out, args.seed, args.threads)
    params = parse_params(config.get("base", {}))
    if args.command == "analytic":
        return cmd_analytic(params, args.out)
    sim_config = parse_sim(config.get("sim"), params, args.seed)
    if args.command == "simulate":
        return cmd_simulate(sim_config, args.out, args.threads)
    n_grid = config.get("n_grid", [params.n_servers])
    if not isinstance(n_grid, list):
        raise InvalidConfig("n_grid must be a list")
    return cmd_validate(params, n_grid, sim_config, args.out, args.threads)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return dispatch(args)
    except DomainError as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return 2
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
