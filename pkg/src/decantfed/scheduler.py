"""Latency-tier construction, bandwidth shares, deadlines, plan validation.

Tier j must finish compute + queueing + upload within j times the
aggregation period tau. Each tier's band is a population share of the
total: b_j = (clients in tier j / all clients) * B, and inside a tier
clients take turns on the full tier band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scenario import ClientProfile
from .wireless import ChannelParams, tier_waiting_times, upload_latency_s

# slack when certifying completion times against deadlines; absorbs the
# float-path difference between the vectorized clustering arithmetic and
# the scalar waiting-time recursion
FEASIBILITY_TOL_S = 1e-9


class InfeasibleClientError(RuntimeError):
    """A client cannot meet any deadline within the configured tier range."""

    def __init__(self, client_id: int, j_max: int, message: str | None = None):
        self.client_id = client_id
        self.j_max = j_max
        super().__init__(
            message
            or f"client {client_id} cannot meet any tier deadline up to j_max={j_max}"
        )


@dataclass
class TierPlan:
    """Output of clustering: who sits in which tier, with what band, in what order."""

    assignment: dict[int, int]
    tier_bandwidth_hz: dict[int, float]
    upload_order: dict[int, list[int]]
    deadline_s: float
    n_tiers: int
    tier_weights: dict[int, float]
    total_bandwidth_hz: float
    noise_w: float
    model_size_bits: float
    n_clients: int

    def tiers(self) -> list[int]:
        """Non-empty tier indices, ascending."""
        return sorted(self.upload_order)

    def deadline_of(self, tier: int) -> float:
        return tier * self.deadline_s

    def weight_of(self, client_id: int) -> float:
        return self.tier_weights[self.assignment[client_id]]

    def clients(self) -> list[int]:
        return sorted(self.assignment)

    def to_doc(self) -> dict:
        return {
            "version": PLAN_DOC_VERSION,
            "deadline_s": self.deadline_s,
            "n_tiers": self.n_tiers,
            "assignment": {str(i): j for i, j in sorted(self.assignment.items())},
            "tier_bandwidth_hz": {str(j): b for j, b in sorted(self.tier_bandwidth_hz.items())},
            "upload_order": {str(j): list(order) for j, order in sorted(self.upload_order.items())},
            "tier_weights": {str(j): w for j, w in sorted(self.tier_weights.items())},
            "total_bandwidth_hz": self.total_bandwidth_hz,
            "noise_w": self.noise_w,
            "model_size_bits": self.model_size_bits,
            "n_clients": self.n_clients,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "TierPlan":
        if doc.get("version") != PLAN_DOC_VERSION:
            raise ValueError(f"unsupported plan doc version {doc.get('version')!r}")
        return cls(
            assignment={int(i): int(j) for i, j in doc["assignment"].items()},
            tier_bandwidth_hz={int(j): float(b) for j, b in doc["tier_bandwidth_hz"].items()},
            upload_order={int(j): [int(i) for i in order] for j, order in doc["upload_order"].items()},
            deadline_s=float(doc["deadline_s"]),
            n_tiers=int(doc["n_tiers"]),
            tier_weights={int(j): float(w) for j, w in doc["tier_weights"].items()},
            total_bandwidth_hz=float(doc["total_bandwidth_hz"]),
            noise_w=float(doc["noise_w"]),
            model_size_bits=float(doc["model_size_bits"]),
            n_clients=int(doc["n_clients"]),
        )


PLAN_DOC_VERSION = 1


@dataclass
class ClientFeasibility:
    client_id: int
    tier: int
    comp_s: float
    wait_s: float
    upload_s: float
    completion_s: float
    deadline_s: float
    ok: bool


@dataclass
class FeasibilityReport:
    clients: list[ClientFeasibility]
    ok: bool = field(init=False)

    def __post_init__(self) -> None:
        self.ok = all(c.ok for c in self.clients)

    def violations(self) -> list[ClientFeasibility]:
        return [c for c in self.clients if not c.ok]


def tier_upload_latency(
    profile: ClientProfile,
    tier_count: int,
    *,
    total_bandwidth_hz: float,
    n_total_clients: int,
    noise_w: float,
    model_size_bits: float,
) -> float:
    """Upload latency of one client under the population bandwidth rule.

    The tier band is (tier_count / n_total_clients) * B and the client
    transmits on the whole tier band during its turn.
    """
    if tier_count < 1 or tier_count > n_total_clients:
        raise ValueError(
            f"tier_count must be in [1, {n_total_clients}], got {tier_count}"
        )
    band = tier_count / n_total_clients * total_bandwidth_hz
    ch = ChannelParams(
        bandwidth_hz=band,
        tx_power_w=profile.tx_power_w,
        gain=profile.gain,
        noise_w=noise_w,
        model_size_bits=model_size_bits,
    )
    return upload_latency_s(ch)


def _per_client_d_min(d_min, profiles: list[ClientProfile]) -> dict[int, int]:
    if isinstance(d_min, dict):
        missing = [p.id for p in profiles if p.id not in d_min]
        if missing:
            raise ValueError(f"d_min mapping misses clients {missing[:5]}")
        out = {p.id: int(d_min[p.id]) for p in profiles}
    else:
        out = {p.id: int(d_min) for p in profiles}
    bad = [i for i, d in out.items() if d < 1]
    if bad:
        raise ValueError(f"d_min must be >= 1 for every client, bad ids {bad[:5]}")
    return out


def _completion_times(comp: np.ndarray, up: np.ndarray) -> np.ndarray:
    """Queue completion times for a fixed order, vectorized.

    completion[k] = S_k + max_{m<=k}(comp[m] - S_{m-1}) with S the upload
    prefix sum; algebraically identical to the waiting-time recursion.
    """
    prefix = np.cumsum(up)
    start_floor = np.maximum.accumulate(comp - (prefix - up))
    return prefix + start_floor


def _spectral_efficiency(profile: ClientProfile, noise_w: float) -> float:
    snr = profile.tx_power_w * profile.gain / noise_w
    return math.log2(1.0 + snr)


def lead_cluster(
    profiles: list[ClientProfile],
    *,
    total_bandwidth_hz: float,
    tau_s: float,
    d_min,
    model_size_bits: float,
    noise_w: float,
    order: str = "ascending",
    j_max: int = 1024,
) -> TierPlan:
    """Cluster clients into deadline tiers by trial assignment and eviction.

    Tier j is built by tentatively assigning every unassigned client (sorted
    by computing latency), granting the tier its population bandwidth share,
    and then scanning the upload queue in order: the first client whose
    comp + wait + upload exceeds j*tau is evicted, the band is recomputed
    for the smaller tier, and the scan restarts, until the queue is stable.
    Evicted clients compete again for tier j+1. Tier weights decay linearly
    with the tier index so earlier tiers count more.
    """
    if not profiles:
        raise ValueError("profiles must be non-empty")
    if not (math.isfinite(tau_s) and tau_s > 0):
        raise ValueError(f"tau_s must be finite and > 0, got {tau_s!r}")
    if order not in ("ascending", "descending"):
        raise ValueError(f"order must be 'ascending' or 'descending', got {order!r}")
    if j_max < 1:
        raise ValueError(f"j_max must be >= 1, got {j_max}")

    d_min_of = _per_client_d_min(d_min, profiles)
    n_total = len(profiles)
    by_id = {p.id: p for p in profiles}
    if len(by_id) != n_total:
        raise ValueError("client ids must be unique")

    comp = {
        p.id: p.cycles_per_sample * d_min_of[p.id] / p.cpu_hz for p in profiles
    }
    # seconds*Hz a client needs on the air: size / spectral efficiency
    unit = {}
    for p in profiles:
        eff = _spectral_efficiency(p, noise_w)
        unit[p.id] = model_size_bits / eff if eff > 0.0 else math.inf

    unassigned = sorted(by_id)
    assignment: dict[int, int] = {}
    tier_bandwidth: dict[int, float] = {}
    upload_order: dict[int, list[int]] = {}

    j = 0
    while unassigned:
        j += 1
        if j > j_max:
            culprit = unassigned[0]
            for i in unassigned:
                solo_band = total_bandwidth_hz / n_total
                solo = comp[i] + unit[i] / solo_band
                if solo > j_max * tau_s:
                    culprit = i
                    break
            raise InfeasibleClientError(culprit, j_max)

        sign = 1.0 if order == "ascending" else -1.0
        members = sorted(unassigned, key=lambda i: (sign * comp[i], i))
        comp_arr = np.array([comp[i] for i in members])
        unit_arr = np.array([unit[i] for i in members])
        deadline = j * tau_s
        while members:
            band = len(members) / n_total * total_bandwidth_hz
            completions = _completion_times(comp_arr, unit_arr / band)
            violators = np.nonzero(completions > deadline)[0]
            if violators.size == 0:
                break
            k = int(violators[0])
            del members[k]
            comp_arr = np.delete(comp_arr, k)
            unit_arr = np.delete(unit_arr, k)
        if members:
            tier_bandwidth[j] = len(members) / n_total * total_bandwidth_hz
            upload_order[j] = list(members)
            for i in members:
                assignment[i] = j
            remaining = set(unassigned) - set(members)
            unassigned = sorted(remaining)

    n_tiers = max(upload_order)
    tier_weights = {
        t: (n_tiers - t + 1) / n_tiers for t in upload_order
    }
    return TierPlan(
        assignment=assignment,
        tier_bandwidth_hz=tier_bandwidth,
        upload_order=upload_order,
        deadline_s=tau_s,
        n_tiers=n_tiers,
        tier_weights=tier_weights,
        total_bandwidth_hz=total_bandwidth_hz,
        noise_w=noise_w,
        model_size_bits=model_size_bits,
        n_clients=n_total,
    )


def p1_objective(plan: TierPlan) -> float:
    """Sum of tier weights over all assigned clients (placement quality)."""
    return sum(plan.tier_weights[j] for j in plan.assignment.values())


def p0_objective(plan: TierPlan, d: dict[int, float]) -> float:
    """Weighted workload sum: each client's sample count times its tier weight."""
    missing = [i for i in plan.assignment if i not in d]
    if missing:
        raise ValueError(f"d misses clients {missing[:5]}")
    return sum(d[i] * plan.tier_weights[j] for i, j in plan.assignment.items())


def validate_plan(
    plan: TierPlan,
    profiles: list[ClientProfile],
    d: dict[int, float],
) -> FeasibilityReport:
    """Re-derive every completion time and certify it against its deadline.

    Recomputes comp from ``d``, uploads from the plan's stored tier bands,
    and waits from the scalar queue recursion, then compares comp + wait +
    upload against tier * tau with a small float tolerance.
    """
    by_id = {p.id: p for p in profiles}
    missing = [i for i in plan.assignment if i not in by_id]
    if missing:
        raise ValueError(f"profiles miss clients {missing[:5]}")
    rows: list[ClientFeasibility] = []
    for j in plan.tiers():
        band = plan.tier_bandwidth_hz[j]
        deadline = plan.deadline_of(j)
        order = plan.upload_order[j]
        comps = []
        ups = []
        for i in order:
            p = by_id[i]
            comps.append(p.cycles_per_sample * d[i] / p.cpu_hz)
            ch = ChannelParams(
                bandwidth_hz=band,
                tx_power_w=p.tx_power_w,
                gain=p.gain,
                noise_w=plan.noise_w,
                model_size_bits=plan.model_size_bits,
            )
            ups.append(upload_latency_s(ch))
        waits = tier_waiting_times(comps, ups)
        for pos, i in enumerate(order):
            completion = comps[pos] + waits[pos] + ups[pos]
            rows.append(
                ClientFeasibility(
                    client_id=i,
                    tier=j,
                    comp_s=comps[pos],
                    wait_s=waits[pos],
                    upload_s=ups[pos],
                    completion_s=completion,
                    deadline_s=deadline,
                    ok=completion <= deadline + FEASIBILITY_TOL_S,
                )
            )
    return FeasibilityReport(clients=rows)
