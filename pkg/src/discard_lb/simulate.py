"""Discrete-event simulation of the finite system of ``n_servers`` FCFS queues.

Jobs arrive as a Poisson stream of rate ``lam * n_servers``.  Each job picks
a primary server uniformly and, with probability ``p``, ``d - 1`` distinct
secondaries among the rest.  A replica is admitted iff the workload it finds
is at most its threshold; the job's response time is the minimum over its
admitted replicas and the job is lost if none is admitted.

Under FCFS the wait of a replica equals the workload it finds, so admission
is decided at arrival.  Workloads are decayed lazily: only the servers a job
touches are brought up to date.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .analytic import Exponential, ServiceLaw, evaluate
from .errors import InvalidConfig
from .model import PolicyParams

CHUNK = 1 << 16
Z95 = 1.959963984540054

# layout of the per-replication counter arrays
_N_ADMITTED, _N_LOST, _N_POST, _N_SEEN, _JOB_INDEX = range(5)
_CLOCK, _RESPONSE_SUM = range(2)


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.  Replication ``r`` draws from the stream keyed by ``(seed, r)``."""

    params: PolicyParams
    n_arrivals: int = 100_000
    warmup_fraction: float = 0.1
    n_replications: int = 20
    seed: int = 0
    reservoir_size: int = 10_000
    tail_points: tuple = ()
    service: ServiceLaw | None = None

    def __post_init__(self):
        if not isinstance(self.params, PolicyParams):
            raise InvalidConfig("params must be a PolicyParams")
        if int(self.n_arrivals) != self.n_arrivals or self.n_arrivals < 1000:
            raise InvalidConfig(f"n_arrivals must be an integer >= 1000, got {self.n_arrivals}")
        if not 0.0 <= self.warmup_fraction <= 0.5:
            raise InvalidConfig(f"warmup_fraction must lie in [0, 0.5], got {self.warmup_fraction}")
        if int(self.n_replications) != self.n_replications or self.n_replications < 1:
            raise InvalidConfig(f"n_replications must be a positive integer, got {self.n_replications}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise InvalidConfig(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.reservoir_size < 0:
            raise InvalidConfig("reservoir_size must be non-negative")
        points = tuple(float(x) for x in self.tail_points)
        if any(not x >= 0.0 for x in points) or list(points) != sorted(points):
            raise InvalidConfig("tail_points must be non-negative and sorted")
        object.__setattr__(self, "tail_points", points)
        if self.params.d > self.params.n_servers:
            raise InvalidConfig(f"d={self.params.d} exceeds n_servers={self.params.n_servers}")

    def replace(self, **changes) -> "SimConfig":
        fields_ = {name: getattr(self, name) for name in self.__dataclass_fields__}
        fields_.update(changes)
        return SimConfig(**fields_)

    @property
    def n_warmup(self) -> int:
        return int(round(self.warmup_fraction * self.n_arrivals))

    @property
    def service_law(self) -> ServiceLaw:
        return self.service if self.service is not None else Exponential(self.params.mu)


@dataclass(eq=False)
class SimStats:
    tau_hat: float
    p_loss_hat: float
    tau_ci_halfwidth: float
    p_loss_ci_halfwidth: float
    n_admitted: int
    n_lost: int
    n_post_warmup: int
    workload_samples: np.ndarray
    tail_points: tuple = ()
    tail_hat: np.ndarray = field(default_factory=lambda: np.empty(0))
    tail_ci_halfwidth: np.ndarray = field(default_factory=lambda: np.empty(0))
    replication_tau: np.ndarray = field(default_factory=lambda: np.empty(0))
    replication_p_loss: np.ndarray = field(default_factory=lambda: np.empty(0))


@numba.njit(cache=True, nogil=True)
def _advance(inter, zeta, picks, service, reservoir_u,
             p, d, t1, t2, n_warmup,
             workload, last_update, perm, ints, floats,
             reservoir, tail_points, tail_counts,
             trace_response, trace_admitted):
    """Process one chunk of jobs, updating the server and counter arrays in place."""
    n_servers = workload.shape[0]
    n_keep = reservoir.shape[0]
    n_tail = tail_points.shape[0]
    tracing = trace_response.shape[0] > 0
    seen = np.empty(d)
    chosen = np.empty(d, dtype=np.int64)
    for i in range(inter.shape[0]):
        clock = floats[_CLOCK] + inter[i]
        floats[_CLOCK] = clock
        job = ints[_JOB_INDEX]
        ints[_JOB_INDEX] = job + 1
        post = job >= n_warmup

        if post and n_keep > 0:
            w0 = workload[0] - (clock - last_update[0])
            if w0 < 0.0:
                w0 = 0.0
            k = ints[_N_SEEN]
            if k < n_keep:
                reservoir[k] = w0
            else:
                slot = int(reservoir_u[i] * (k + 1))
                if slot < n_keep:
                    reservoir[slot] = w0
            ints[_N_SEEN] = k + 1

        n_rep = d if zeta[i] < p else 1
        # partial Fisher-Yates: primary uniform, secondaries distinct from it
        for j in range(n_rep):
            r = j + int(picks[i, j] * (n_servers - j))
            if r >= n_servers:
                r = n_servers - 1
            tmp = perm[j]
            perm[j] = perm[r]
            perm[r] = tmp
            s = perm[j]
            chosen[j] = s
            w = workload[s] - (clock - last_update[s])
            seen[j] = w if w > 0.0 else 0.0

        best = math.inf
        for j in range(n_rep):
            threshold = t1 if j == 0 else t2
            s = chosen[j]
            if seen[j] <= threshold:
                response = seen[j] + service[i, j]
                workload[s] = response
                last_update[s] = clock
                if response < best:
                    best = response
        admitted = best < math.inf

        if tracing:
            trace_response[job] = best if admitted else math.nan
            trace_admitted[job] = admitted
        if post:
            ints[_N_POST] += 1
            if admitted:
                ints[_N_ADMITTED] += 1
                floats[_RESPONSE_SUM] += best
                for m in range(n_tail):
                    if best > tail_points[m]:
                        tail_counts[m] += 1
                    else:
                        break
            else:
                ints[_N_LOST] += 1


def replication_key(seed: int, replication: int) -> int:
    """128-bit Philox key: the base seed in the low word, the replication index in the high one.

    Distinct ``(seed, replication)`` pairs never share a stream, so runs with
    adjacent base seeds stay independent.
    """
    return int(seed) | (int(replication) << 64)


class _Replication:
    """State of one independent run; drives the compiled kernel chunk by chunk."""

    def __init__(self, config: SimConfig, replication: int, trace: bool = False):
        self.config = config
        par = config.params
        self.rng = np.random.Generator(np.random.Philox(key=replication_key(config.seed, replication)))
        self.workload = np.zeros(par.n_servers)
        self.last_update = np.zeros(par.n_servers)
        self.perm = np.arange(par.n_servers, dtype=np.int64)
        self.ints = np.zeros(5, dtype=np.int64)
        self.floats = np.zeros(2)
        self.reservoir = np.zeros(config.reservoir_size)
        self.tail_points = np.asarray(config.tail_points, dtype=np.float64)
        self.tail_counts = np.zeros(len(config.tail_points), dtype=np.int64)
        n_trace = config.n_arrivals if trace else 0
        self.trace_response = np.zeros(n_trace)
        self.trace_admitted = np.zeros(n_trace, dtype=np.bool_)
        self.inputs = [] if trace else None

    def draw(self, size: int):
        """Random inputs for ``size`` jobs, always drawn in the same order."""
        par, rng = self.config.params, self.rng
        inter = rng.standard_exponential(size) / (par.lam * par.n_servers)
        zeta = rng.random(size)
        picks = rng.random((size, par.d))
        service = np.ascontiguousarray(self.config.service_law.sample(rng, (size, par.d)), dtype=np.float64)
        reservoir_u = rng.random(size)
        return inter, zeta, picks, service, reservoir_u

    def run(self):
        par = self.config.params
        remaining = self.config.n_arrivals
        while remaining > 0:
            size = min(CHUNK, remaining)
            inputs = self.draw(size)
            if self.inputs is not None:
                self.inputs.append(inputs)
            _advance(*inputs, par.p, par.d, par.t1, par.t2, self.config.n_warmup,
                     self.workload, self.last_update, self.perm, self.ints, self.floats,
                     self.reservoir, self.tail_points, self.tail_counts,
                     self.trace_response, self.trace_admitted)
            remaining -= size
        return self

    @property
    def samples(self) -> np.ndarray:
        return self.reservoir[: min(int(self.ints[_N_SEEN]), self.reservoir.shape[0])].copy()


def _halfwidth(values: np.ndarray) -> float:
    if values.shape[0] < 2:
        return math.nan
    return Z95 * float(np.std(values, ddof=1)) / math.sqrt(values.shape[0])


def _n_workers(threads: int, jobs: int) -> int:
    if threads <= 0:
        threads = os.cpu_count() or 1
    return max(1, min(threads, jobs))


def run(config: SimConfig, threads: int = 1) -> SimStats:
    """Simulate ``config.n_replications`` independent runs and pool them.

    Point estimates are means of the per-replication estimates and the 95%
    half-widths use the spread across replications.  Results do not depend
    on ``threads``.
    """
    reps = range(config.n_replications)
    with ThreadPoolExecutor(_n_workers(threads, config.n_replications)) as pool:
        done = list(pool.map(lambda r: _Replication(config, r).run(), reps))

    n_adm = np.array([rep.ints[_N_ADMITTED] for rep in done], dtype=np.int64)
    n_post = np.array([rep.ints[_N_POST] for rep in done], dtype=np.int64)
    sums = np.array([rep.floats[_RESPONSE_SUM] for rep in done])
    with np.errstate(invalid="ignore", divide="ignore"):
        tau = np.where(n_adm > 0, sums / np.maximum(n_adm, 1), np.nan)
    loss = 1.0 - n_adm / n_post
    tails = np.array([rep.tail_counts / rep.ints[_N_POST] for rep in done]).reshape(len(done), -1)

    return SimStats(
        tau_hat=float(np.mean(tau)),
        p_loss_hat=float(np.mean(loss)),
        tau_ci_halfwidth=_halfwidth(tau),
        p_loss_ci_halfwidth=_halfwidth(loss),
        n_admitted=int(n_adm.sum()),
        n_lost=int(sum(rep.ints[_N_LOST] for rep in done)),
        n_post_warmup=int(n_post.sum()),
        workload_samples=np.concatenate([rep.samples for rep in done]),
        tail_points=config.tail_points,
        tail_hat=tails.mean(axis=0),
        tail_ci_halfwidth=np.array([_halfwidth(tails[:, m]) for m in range(tails.shape[1])]),
        replication_tau=tau,
        replication_p_loss=loss,
    )


@dataclass(frozen=True)
class Trace:
    """Per-job record of one replication together with the inputs that drove it."""

    inter: np.ndarray
    zeta: np.ndarray
    picks: np.ndarray
    service: np.ndarray
    response: np.ndarray
    admitted: np.ndarray
    final_workload: np.ndarray
    final_time: float


def run_trace(config: SimConfig, replication: int = 0) -> Trace:
    """Run a single replication and keep every job's outcome (for testing)."""
    rep = _Replication(config, replication, trace=True).run()
    stack = [np.concatenate(parts) for parts in zip(*rep.inputs)]
    clock = float(rep.floats[_CLOCK])
    final = np.maximum(rep.workload - (clock - rep.last_update), 0.0)
    return Trace(stack[0], stack[1], stack[2], stack[3],
                 rep.trace_response, rep.trace_admitted, final, clock)


@dataclass(frozen=True)
class ConvergenceRow:
    n: int
    tau_sim: float
    tau_ci: float
    tau_analytic: float
    gap: float
    p_loss_sim: float
    p_loss_ci: float
    p_loss_analytic: float


def convergence_study(params: PolicyParams, n_grid, config: SimConfig,
                      threads: int = 1) -> list[ConvergenceRow]:
    """Simulate at each server count in ``n_grid`` and compare with the large-system limit.

    ``gap`` is the relative difference ``(tau_sim - tau_analytic) / tau_analytic``.
    """
    grid = [int(n) for n in n_grid]
    if not grid:
        raise InvalidConfig("n_grid is empty")
    for n in grid:
        if n < params.d:
            raise InvalidConfig(f"server count {n} is below d={params.d}")
    _, metrics = evaluate(params, config.service)
    rows = []
    for n in grid:
        point = params.replace(n_servers=n)
        stats = run(config.replace(params=point), threads)
        rows.append(ConvergenceRow(
            n=n,
            tau_sim=stats.tau_hat,
            tau_ci=stats.tau_ci_halfwidth,
            tau_analytic=metrics.tau,
            gap=(stats.tau_hat - metrics.tau) / metrics.tau,
            p_loss_sim=stats.p_loss_hat,
            p_loss_ci=stats.p_loss_ci_halfwidth,
            p_loss_analytic=metrics.p_loss,
        ))
    return rows
