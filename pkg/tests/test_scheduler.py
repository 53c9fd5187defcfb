import json
import math

import numpy as np
import pytest

from decantfed.scenario import ClientProfile, ScenarioConfig, generate_scenario
from decantfed.scheduler import (
    InfeasibleClientError,
    TierPlan,
    lead_cluster,
    p0_objective,
    p1_objective,
    tier_upload_latency,
    validate_plan,
)

NOISE_W = 1e-13


def _profile(cid, cycles, cpu, gain=1e-12):
    # gain 1e-12 with 0.1 W tx and 1e-13 W noise puts the SNR at 1, so the
    # spectral efficiency is exactly 1 bit/s/Hz and latencies stay round
    return ClientProfile(
        id=cid, position_km=(0.0, 0.0), distance_km=0.5, gain=gain,
        cpu_hz=cpu, cycles_per_sample=cycles, tx_power_w=0.1,
    )


def _cluster(profiles, tau_s, **kw):
    args = dict(
        total_bandwidth_hz=1e6, tau_s=tau_s, d_min=10,
        model_size_bits=2e5, noise_w=NOISE_W,
    )
    args.update(kw)
    return lead_cluster(profiles, **args)


def test_two_equal_clients_fit_tier_one_when_deadline_allows():
    # comp 1.0 each; full band gives 0.2 s uploads; queue ends at 1.4 <= 1.5
    profiles = [_profile(0, 1e7, 1e8), _profile(1, 1e7, 1e8)]
    plan = _cluster(profiles, tau_s=1.5)
    assert plan.assignment == {0: 1, 1: 1}
    assert plan.n_tiers == 1
    assert plan.upload_order == {1: [0, 1]}
    assert plan.tier_bandwidth_hz[1] == pytest.approx(1e6)
    assert plan.tier_weights == {1: 1.0}
    report = validate_plan(plan, profiles, {0: 10, 1: 10})
    assert report.ok
    by_id = {c.client_id: c for c in report.clients}
    assert by_id[0].completion_s == pytest.approx(1.2, rel=1e-9)
    assert by_id[1].completion_s == pytest.approx(1.4, rel=1e-9)
    assert by_id[1].wait_s == pytest.approx(0.2, rel=1e-9)


def test_two_equal_clients_cascade_when_deadline_is_tight():
    # at tau 1.25 the queue tail misses tier 1; evicting it halves the band,
    # which pushes the survivor over too, so both land in tier 2 on full band
    profiles = [_profile(0, 1e7, 1e8), _profile(1, 1e7, 1e8)]
    plan = _cluster(profiles, tau_s=1.25)
    assert plan.assignment == {0: 2, 1: 2}
    assert plan.n_tiers == 2
    assert plan.tiers() == [2]
    assert plan.tier_bandwidth_hz[2] == pytest.approx(1e6)
    assert plan.tier_weights == {2: 0.5}
    assert validate_plan(plan, profiles, {0: 10, 1: 10}).ok


def test_three_client_trace_with_empty_middle_tier():
    # comps 0.5 / 1.0 / 2.4; the slow client misses tiers 1 and 2 (its solo
    # band is a third of the total) and settles in tier 3
    profiles = [
        _profile(0, 5e6, 1e8),
        _profile(1, 1e7, 1e8),
        _profile(2, 2.4e7, 1e8),
    ]
    plan = _cluster(profiles, tau_s=1.2, model_size_bits=1e5)
    assert plan.assignment == {0: 1, 1: 1, 2: 3}
    assert plan.tiers() == [1, 3]
    assert plan.n_tiers == 3
    assert plan.tier_bandwidth_hz[1] == pytest.approx(2e6 / 3.0)
    assert plan.tier_bandwidth_hz[3] == pytest.approx(1e6 / 3.0)
    assert plan.tier_weights[1] == pytest.approx(1.0)
    assert plan.tier_weights[3] == pytest.approx(1.0 / 3.0)
    assert p1_objective(plan) == pytest.approx(2.0 + 1.0 / 3.0)
    assert p0_objective(plan, {0: 30, 1: 20, 2: 5}) == pytest.approx(50.0 + 5.0 / 3.0)
    report = validate_plan(plan, profiles, {0: 10, 1: 10, 2: 10})
    assert report.ok
    by_id = {c.client_id: c for c in report.clients}
    assert by_id[1].completion_s == pytest.approx(1.15, rel=1e-9)
    assert by_id[2].completion_s == pytest.approx(2.7, rel=1e-9)


def test_huge_tau_collapses_to_single_tier():
    profiles = generate_scenario(ScenarioConfig(n_clients=30, seed=2))
    plan = lead_cluster(
        profiles, total_bandwidth_hz=1e6, tau_s=1e6, d_min=10,
        model_size_bits=1e5, noise_w=3.981071705534972e-13,
    )
    assert plan.n_tiers == 1
    assert set(plan.assignment.values()) == {1}
    assert plan.tier_bandwidth_hz[1] == pytest.approx(1e6)
    assert plan.tier_weights == {1: 1.0}


def test_unreachable_client_raises_with_ids():
    profiles = [_profile(0, 1e7, 1e8), _profile(1, 1e7, 1e8, gain=1e-20)]
    with pytest.raises(InfeasibleClientError) as info:
        _cluster(profiles, tau_s=1.5, j_max=4)
    assert info.value.client_id == 1
    assert info.value.j_max == 4


def test_upload_order_follows_comp_and_switch():
    profiles = [_profile(0, 3e7, 1e8), _profile(1, 1e7, 1e8), _profile(2, 2e7, 1e8)]
    plan = _cluster(profiles, tau_s=100.0)
    assert plan.upload_order[1] == [1, 2, 0]
    plan_desc = _cluster(profiles, tau_s=100.0, order="descending")
    assert plan_desc.upload_order[1] == [0, 2, 1]
    with pytest.raises(ValueError):
        _cluster(profiles, tau_s=100.0, order="fastest")


def test_equal_comp_ties_break_by_id():
    profiles = [_profile(3, 1e7, 1e8), _profile(1, 1e7, 1e8), _profile(2, 1e7, 1e8)]
    plan = _cluster(profiles, tau_s=100.0)
    assert plan.upload_order[1] == [1, 2, 3]


def test_bandwidth_shares_are_population_shares_and_sum_to_total():
    for seed in range(10):
        profiles = generate_scenario(ScenarioConfig(n_clients=60, seed=seed))
        plan = lead_cluster(
            profiles, total_bandwidth_hz=1e6, tau_s=10.0, d_min=10,
            model_size_bits=1e5, noise_w=3.981071705534972e-13,
        )
        assert sorted(plan.assignment) == [p.id for p in profiles]
        total = 0.0
        for j, order in plan.upload_order.items():
            assert order  # no empty tier is recorded
            assert plan.tier_bandwidth_hz[j] == pytest.approx(len(order) / 60.0 * 1e6)
            total += plan.tier_bandwidth_hz[j]
        assert total == pytest.approx(1e6, rel=1e-12)
        assert validate_plan(plan, profiles, {p.id: 10 for p in profiles}).ok


def test_cluster_is_deterministic():
    profiles = generate_scenario(ScenarioConfig(n_clients=50, seed=77))
    kw = dict(total_bandwidth_hz=1e6, tau_s=8.0, d_min=10,
              model_size_bits=1e5, noise_w=3.981071705534972e-13)
    assert lead_cluster(profiles, **kw) == lead_cluster(profiles, **kw)


def test_per_client_d_min_mapping():
    profiles = [_profile(0, 1e7, 1e8), _profile(1, 1e7, 1e8)]
    plan = _cluster(profiles, tau_s=3.0, d_min={0: 10, 1: 20})
    report = validate_plan(plan, profiles, {0: 10, 1: 20})
    assert report.ok
    with pytest.raises(ValueError):
        _cluster(profiles, tau_s=3.0, d_min={0: 10})
    with pytest.raises(ValueError):
        _cluster(profiles, tau_s=3.0, d_min=0)


def test_tier_upload_latency_population_rule():
    p = _profile(0, 1e7, 1e8)
    full = tier_upload_latency(
        p, tier_count=2, total_bandwidth_hz=1e6, n_total_clients=2,
        noise_w=NOISE_W, model_size_bits=1e5,
    )
    assert full == pytest.approx(0.1, rel=1e-9)
    half = tier_upload_latency(
        p, tier_count=1, total_bandwidth_hz=1e6, n_total_clients=2,
        noise_w=NOISE_W, model_size_bits=1e5,
    )
    assert half == pytest.approx(0.2, rel=1e-9)
    with pytest.raises(ValueError):
        tier_upload_latency(p, tier_count=0, total_bandwidth_hz=1e6,
                            n_total_clients=2, noise_w=NOISE_W, model_size_bits=1e5)
    with pytest.raises(ValueError):
        tier_upload_latency(p, tier_count=3, total_bandwidth_hz=1e6,
                            n_total_clients=2, noise_w=NOISE_W, model_size_bits=1e5)


def test_validate_plan_flags_overload():
    profiles = [_profile(0, 1e7, 1e8), _profile(1, 1e7, 1e8)]
    plan = _cluster(profiles, tau_s=1.5)
    report = validate_plan(plan, profiles, {0: 10, 1: 500})
    assert not report.ok
    assert [c.client_id for c in report.violations()] == [1]
    with pytest.raises(ValueError):
        p0_objective(plan, {0: 10})
    with pytest.raises(ValueError):
        validate_plan(plan, profiles[:1], {0: 10, 1: 10})


def test_plan_doc_round_trip():
    profiles = generate_scenario(ScenarioConfig(n_clients=25, seed=4))
    plan = lead_cluster(
        profiles, total_bandwidth_hz=1e6, tau_s=10.0, d_min=10,
        model_size_bits=1e5, noise_w=3.981071705534972e-13,
    )
    doc = json.loads(json.dumps(plan.to_doc()))
    assert TierPlan.from_doc(doc) == plan
    with pytest.raises(ValueError):
        TierPlan.from_doc({"version": -1})


def test_weights_decay_linearly_with_tier_index():
    profiles = generate_scenario(ScenarioConfig(n_clients=80, seed=6))
    plan = lead_cluster(
        profiles, total_bandwidth_hz=1e6, tau_s=6.0, d_min=10,
        model_size_bits=1e5, noise_w=3.981071705534972e-13,
    )
    n = plan.n_tiers
    assert n == max(plan.assignment.values())
    for j, w in plan.tier_weights.items():
        assert w == pytest.approx((n - j + 1) / n)
    # earlier tiers always weigh at least as much
    tiers = plan.tiers()
    for a, b in zip(tiers, tiers[1:]):
        assert plan.tier_weights[a] > plan.tier_weights[b]
