"""Load balancing with replica discard thresholds: large-system analysis and simulation."""

from .analytic import (
    Exponential,
    ResponseMetrics,
    ServiceLaw,
    WorkloadLaw,
    evaluate,
    improvement_over_random,
    k_kernel,
    loss_probability,
    mean_response_time,
    response_tail,
    tau_idle_replication,
    tau_no_discard,
    workload_cdf,
    workload_mgf,
)
from .errors import (
    DegenerateLoss,
    DomainError,
    InvalidConfig,
    InvalidParams,
    OutOfDomain,
    SingularSystem,
    UnstableSystem,
)
from .model import PolicyParams, effective_rate, solve_constants, stability
from .simulate import SimConfig, SimStats, convergence_study, run

__all__ = [name for name in dir() if not name.startswith("_")]
