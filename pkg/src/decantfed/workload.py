"""Per-client workload optimization under a frozen tier schedule.

With tier membership, bandwidth, and upload order fixed, each client's
sample count d_i only moves its own computing latency, and the queue
deadline constraints reduce to one linear row per client:

    (cycles_i / cpu_i) * d_i  <=  j*tau - sum of uploads from i to the
                                  end of its tier's queue

The resulting LP (maximize tier-weighted workload subject to those rows
and d_min lower bounds) is solved by a small dense simplex with bounded
variables and Bland's pivoting rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scenario import ClientProfile
from .scheduler import (
    FEASIBILITY_TOL_S,
    FeasibilityReport,
    TierPlan,
    _per_client_d_min,
    validate_plan,
)
from .wireless import ChannelParams, upload_latency_s

SIMPLEX_TOL = 1e-9


class PlanInfeasibleError(ValueError):
    """The frozen schedule leaves some client no room for even d_min samples."""


class UnboundedLPError(RuntimeError):
    """The LP has no finite optimum (cannot happen for well-formed plans)."""


class CertificationError(RuntimeError):
    """A floored workload assignment failed re-validation against the plan."""


@dataclass
class LinearProgram:
    """Maximize objective . d subject to row_coeffs . d <= row_bounds, lower <= d <= upper."""

    client_ids: list[int]
    objective: np.ndarray
    row_coeffs: list[dict[int, float]]
    row_bounds: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.client_ids)
        self.objective = np.asarray(self.objective, dtype=float)
        self.row_bounds = np.asarray(self.row_bounds, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if not (len(self.objective) == len(self.lower) == len(self.upper) == n):
            raise ValueError("objective and bounds must align with client_ids")
        if len(self.row_coeffs) != len(self.row_bounds):
            raise ValueError("row_coeffs and row_bounds must align")
        if not np.isfinite(self.lower).all() or not np.isfinite(self.upper).all():
            raise ValueError("all variable bounds must be finite")
        if (self.upper < self.lower).any():
            raise ValueError("upper bounds must be >= lower bounds")


@dataclass
class WorkloadAssignment:
    """Continuous LP optimum and its floored integer counterpart."""

    d_star: dict[int, float]
    d_int: dict[int, int]
    objective_cont: float
    objective_int: float

    def to_doc(self) -> dict:
        return {
            "d_star": {str(i): v for i, v in sorted(self.d_star.items())},
            "d_int": {str(i): v for i, v in sorted(self.d_int.items())},
            "objective_cont": self.objective_cont,
            "objective_int": self.objective_int,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "WorkloadAssignment":
        return cls(
            d_star={int(i): float(v) for i, v in doc["d_star"].items()},
            d_int={int(i): int(v) for i, v in doc["d_int"].items()},
            objective_cont=float(doc["objective_cont"]),
            objective_int=float(doc["objective_int"]),
        )


def build_lp(
    plan: TierPlan,
    profiles: list[ClientProfile],
    d_min,
    tau_s: float | None = None,
) -> LinearProgram:
    """Assemble the workload LP for a frozen tier schedule.

    Uploads are d-independent, so the binding constraint for the m-th
    client of a tier is its computing latency against the tier deadline
    minus every upload from position m to the end of the queue. Raises
    PlanInfeasibleError when d_min already violates some row.
    """
    tau = plan.deadline_s if tau_s is None else tau_s
    by_id = {p.id: p for p in profiles}
    d_min_of = _per_client_d_min(d_min, [by_id[i] for i in plan.clients()])

    ids: list[int] = plan.clients()
    pos = {i: k for k, i in enumerate(ids)}
    objective = np.array([plan.weight_of(i) for i in ids])
    lower = np.array([float(d_min_of[i]) for i in ids])
    upper = lower.copy()
    row_coeffs: list[dict[int, float]] = []
    row_bounds: list[float] = []

    for j in plan.tiers():
        order = plan.upload_order[j]
        band = plan.tier_bandwidth_hz[j]
        deadline = j * tau
        ups = []
        for i in order:
            p = by_id[i]
            ch = ChannelParams(
                bandwidth_hz=band,
                tx_power_w=p.tx_power_w,
                gain=p.gain,
                noise_w=plan.noise_w,
                model_size_bits=plan.model_size_bits,
            )
            ups.append(upload_latency_s(ch))
        suffix = np.cumsum(ups[::-1])[::-1]
        for m, i in enumerate(order):
            p = by_id[i]
            coeff = p.cycles_per_sample / p.cpu_hz
            rhs = deadline - float(suffix[m])
            if rhs + FEASIBILITY_TOL_S < coeff * d_min_of[i]:
                raise PlanInfeasibleError(
                    f"client {i} in tier {j}: deadline leaves {rhs:.6g}s of compute "
                    f"but d_min={d_min_of[i]} needs {coeff * d_min_of[i]:.6g}s"
                )
            row_coeffs.append({i: coeff})
            row_bounds.append(rhs)
            upper[pos[i]] = max(lower[pos[i]], rhs / coeff)

    return LinearProgram(
        client_ids=ids,
        objective=objective,
        row_coeffs=row_coeffs,
        row_bounds=np.array(row_bounds),
        lower=lower,
        upper=upper,
    )


def simplex_solve(lp: LinearProgram, tol: float = SIMPLEX_TOL) -> dict[int, float]:
    """Maximize the LP with a dense tableau and Bland's rule.

    Variables are shifted to their lower bounds so the slack basis is
    feasible immediately; upper bounds enter as explicit rows. Bland's
    entering/leaving choices (lowest eligible index) guarantee termination
    on the degenerate ties this LP family produces.
    """
    ids = lp.client_ids
    n = len(ids)
    col_of = {i: k for k, i in enumerate(ids)}

    a_rows = np.zeros((len(lp.row_coeffs), n))
    for r, coeffs in enumerate(lp.row_coeffs):
        for i, v in coeffs.items():
            a_rows[r, col_of[i]] = v
    rhs_rows = lp.row_bounds - a_rows @ lp.lower
    rhs_bounds = lp.upper - lp.lower

    scale = max(1.0, float(np.abs(lp.row_bounds).max(initial=0.0)))
    if (rhs_rows < -tol * scale).any():
        worst = int(np.argmin(rhs_rows))
        raise PlanInfeasibleError(
            f"row {worst} violated at the lower bounds by {-rhs_rows[worst]:.3e}"
        )

    a_all = np.vstack([a_rows, np.eye(n)])
    b_all = np.concatenate([np.maximum(rhs_rows, 0.0), rhs_bounds])
    m = len(b_all)

    tableau = np.zeros((m + 1, n + m + 1))
    tableau[:m, :n] = a_all
    tableau[:m, n : n + m] = np.eye(m)
    tableau[:m, -1] = b_all
    tableau[m, :n] = -lp.objective
    basis = list(range(n, n + m))

    while True:
        costs = tableau[m, : n + m]
        entering = np.nonzero(costs < -tol)[0]
        if entering.size == 0:
            break
        e = int(entering[0])  # Bland: lowest improving variable index
        column = tableau[:m, e]
        positive = np.nonzero(column > tol)[0]
        if positive.size == 0:
            raise UnboundedLPError(f"variable {e} increases the objective without bound")
        ratios = tableau[positive, -1] / column[positive]
        best = ratios.min()
        ties = positive[ratios <= best + 1e-12 * max(1.0, abs(best))]
        leave = min(ties, key=lambda r: basis[r])  # Bland: lowest basis index
        pivot = tableau[leave, e]
        tableau[leave] /= pivot
        for r in range(m + 1):
            if r != leave and tableau[r, e] != 0.0:
                tableau[r] -= tableau[r, e] * tableau[leave]
        basis[leave] = e

    shifted = np.zeros(n + m)
    for r, var in enumerate(basis):
        shifted[var] = tableau[r, -1]
    values = lp.lower + shifted[:n]
    return {i: float(values[k]) for k, i in enumerate(ids)}


def floor_and_certify(
    d_star: dict[int, float],
    plan: TierPlan,
    profiles: list[ClientProfile],
    d_min,
) -> tuple[WorkloadAssignment, FeasibilityReport]:
    """Floor the continuous optimum and re-validate it against the plan.

    Flooring only shrinks computing latencies, so the certificate must
    pass; a failure indicates an internal inconsistency and raises.
    """
    by_id = {p.id: p for p in profiles}
    d_min_of = _per_client_d_min(d_min, [by_id[i] for i in plan.clients()])
    d_int = {
        i: max(d_min_of[i], math.floor(v + FEASIBILITY_TOL_S))
        for i, v in d_star.items()
    }
    report = validate_plan(plan, profiles, d_int)
    if not report.ok:
        bad = report.violations()[0]
        raise CertificationError(
            f"floored workloads fail certification: client {bad.client_id} "
            f"completes at {bad.completion_s:.6g}s against deadline {bad.deadline_s:.6g}s"
        )
    objective_cont = sum(plan.weight_of(i) * v for i, v in d_star.items())
    objective_int = sum(plan.weight_of(i) * v for i, v in d_int.items())
    assignment = WorkloadAssignment(
        d_star=dict(d_star),
        d_int=d_int,
        objective_cont=objective_cont,
        objective_int=objective_int,
    )
    return assignment, report


def optimize_workloads(
    plan: TierPlan,
    profiles: list[ClientProfile],
    d_min,
) -> WorkloadAssignment:
    """build_lp -> simplex_solve -> floor_and_certify, in one call."""
    lp = build_lp(plan, profiles, d_min)
    d_star = simplex_solve(lp)
    assignment, _ = floor_and_certify(d_star, plan, profiles, d_min)
    return assignment
