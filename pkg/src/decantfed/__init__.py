"""Semi-synchronous federated learning on a shared wireless uplink.

Clients are clustered into latency tiers, each tier gets a bandwidth share
and a deadline that is a multiple of the aggregation period, per-client
training workloads are maximized by a small LP, and the resulting schedule
drives a deterministic simulated-clock training loop with synchronous and
proximal baselines for comparison.
"""

__version__ = "0.1.0"

from . import fl, report, scenario, scheduler, sim, wireless, workload

__all__ = [
    "fl",
    "report",
    "scenario",
    "scheduler",
    "sim",
    "wireless",
    "workload",
    "__version__",
]
