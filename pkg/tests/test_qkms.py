import base64

import numpy as np
import pytest

from qenergydex.entropy import generate_qber_trace
from qenergydex.qkms import (
    AlreadyRetired,
    InsufficientEntropy,
    KeyPoolState,
    KmsCluster,
    KmsReplica,
    RateAdaptState,
    UnknownKey,
    crdt_merge,
    generation_rate,
    rate_adapt_fixed_point,
    rate_adapt_mse_bound,
    rate_adapt_step,
    run_rate_controller,
    step_bucket,
)
from qenergydex.rng import substream


def make_pool(balance=10**6, capacity=10**6, rate=0.0):
    return KeyPoolState(balance_bits=balance, capacity_bits=capacity, gen_rate_bps=rate)


# ---------------------------------------------------------------------------
# token bucket
# ---------------------------------------------------------------------------


def test_step_bucket_inside_bounds():
    s = KeyPoolState(balance_bits=1000, capacity_bits=1200, gen_rate_bps=200_000.0)
    out = step_bucket(s, delta_ms=1, consumed_bits=300)
    assert out.balance_bits == 900  # 1000 - 300 + 200


def test_step_bucket_capacity_clamp():
    s = KeyPoolState(balance_bits=1150, capacity_bits=1200, gen_rate_bps=500_000.0)
    assert step_bucket(s, 1, 0).balance_bits == 1200


def test_step_bucket_exact_depletion():
    s = KeyPoolState(balance_bits=100, capacity_bits=1200, gen_rate_bps=0.0)
    assert step_bucket(s, 1, 100).balance_bits == 0


def test_step_bucket_over_consumption_clamps_at_zero():
    s = KeyPoolState(balance_bits=100, capacity_bits=1200, gen_rate_bps=0.0)
    assert step_bucket(s, 1, 500).balance_bits == 0


def test_bucket_never_leaves_bounds_random_walk():
    rng = np.random.default_rng(8)
    s = KeyPoolState(balance_bits=500, capacity_bits=1000, gen_rate_bps=123_456.0)
    for _ in range(10**6):
        s = step_bucket(s, int(rng.integers(1, 5)), int(rng.integers(0, 400)))
        assert 0 <= s.balance_bits <= 1000


def test_pool_state_validation():
    with pytest.raises(ValueError):
        KeyPoolState(balance_bits=-1, capacity_bits=100, gen_rate_bps=0.0)
    with pytest.raises(ValueError):
        KeyPoolState(balance_bits=200, capacity_bits=100, gen_rate_bps=0.0)


# ---------------------------------------------------------------------------
# rent / retire / expire
# ---------------------------------------------------------------------------


def test_rent_success_decrements_balance():
    kms = KmsReplica(0, make_pool(500, 1200), seed=1)
    record = kms.rent(256, now_ms=0)
    assert kms.pool.balance_bits == 244
    assert len(record.key_bits) == 32
    assert record.ttl_ms == 30_000


def test_rent_failure_leaves_state_unchanged():
    kms = KmsReplica(0, make_pool(100, 1200), seed=1)
    with pytest.raises(InsufficientEntropy):
        kms.rent(256, now_ms=0)
    assert kms.pool.balance_bits == 100
    assert kms.keys == {}


def test_rent_json_schema():
    kms = KmsReplica(3, make_pool(), seed=1)
    doc = kms.rent(256, now_ms=5).to_json()
    assert set(doc) == {"key_id", "key", "ttl_ms"}
    assert len(doc["key_id"]) == 32
    int(doc["key_id"], 16)
    assert len(base64.b64decode(doc["key"])) == 32
    assert doc["ttl_ms"] == 30_000
    # replica index lives in the top byte of the identifier
    assert doc["key_id"][:2] == "03"


def test_rents_across_replicas_have_distinct_ids():
    a = KmsReplica(0, make_pool(), seed=1)
    b = KmsReplica(1, make_pool(), seed=1)
    ids = {a.rent(128, 0).key_id for _ in range(50)} | {
        b.rent(128, 0).key_id for _ in range(50)
    }
    assert len(ids) == 100


def test_retire_lifecycle():
    kms = KmsReplica(0, make_pool(), seed=2)
    record = kms.rent(256, 0)
    kms.retire(record.key_id)
    assert record.state == "retired"
    with pytest.raises(AlreadyRetired):
        kms.retire(record.key_id)
    with pytest.raises(UnknownKey):
        kms.retire("ff" * 16)


def test_expire_sweep_past_ttl():
    kms = KmsReplica(0, make_pool(), seed=2)
    record = kms.rent(256, 0)
    assert kms.expire_sweep(30_000) == 0     # exactly at ttl: still alive
    assert kms.expire_sweep(30_001) == 1
    assert record.state == "expired"
    with pytest.raises(AlreadyRetired):
        kms.retire(record.key_id)


def test_generation_accrues_with_clock():
    kms = KmsReplica(0, KeyPoolState(balance_bits=0, capacity_bits=10**6, gen_rate_bps=1000.0), seed=3)
    with pytest.raises(InsufficientEntropy):
        kms.rent(256, now_ms=0)
    record = kms.rent(256, now_ms=1000)      # 1000 bits accrued
    assert record is not None
    assert kms.pool.balance_bits == 744


def test_event_log_schema(tmp_path):
    kms = KmsReplica(0, make_pool(300, 1200), seed=4)
    kms.rent(128, 0)
    with pytest.raises(InsufficientEntropy):
        kms.rent(512, 1)
    path = tmp_path / "events.csv"
    kms.write_event_log(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t_ms,event,replica,key_id,bits,balance"
    assert lines[1].split(",")[1] == "rent"
    assert lines[2].split(",")[1] == "rent_fail"


# ---------------------------------------------------------------------------
# CRDT merge
# ---------------------------------------------------------------------------


def test_crdt_merge_examples():
    assert crdt_merge(500, 300) == 300
    assert crdt_merge(7, 7) == 7


def test_crdt_merge_algebra():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        a, b, c = (int(v) for v in rng.integers(0, 10**9, size=3))
        assert crdt_merge(a, b) == crdt_merge(b, a)
        assert crdt_merge(crdt_merge(a, b), c) == crdt_merge(a, crdt_merge(b, c))
        assert crdt_merge(a, a) == a


def test_cluster_interleaved_rents_no_duplicates():
    cluster = KmsCluster(3, make_pool(), seed=9)
    rng = substream(9, "test", "interleave")
    for step in range(600):
        n = int(rng.integers(64, 512))
        cluster.rent(n, now_ms=step)
    merged = cluster.reconcile()
    assert cluster.collisions == []
    assert len(merged) == 600
    assert len(set(cluster.all_key_ids())) == 600


# ---------------------------------------------------------------------------
# rate adaptation
# ---------------------------------------------------------------------------


def test_rate_adapt_zero_qber_is_identity():
    st = RateAdaptState(r_t_bps=5e6, r_max_bps=5e6, gamma0=0.5)
    for _ in range(100):
        st = rate_adapt_step(st, 0.0)
    assert st.r_t_bps == 5e6
    assert st.t == 101


def test_rate_adapt_hand_value():
    st = RateAdaptState(r_t_bps=5e6, r_max_bps=5e6, gamma0=0.5, t=1)
    out = rate_adapt_step(st, 0.04)
    assert out.r_t_bps == pytest.approx(4.9e6)   # (1 - 0.5*0.04) * 5e6


def test_rate_adapt_floor_clamp():
    st = RateAdaptState(r_t_bps=0.5e6 + 1.0, r_max_bps=5e6, gamma0=0.9, t=1)
    out = rate_adapt_step(st, 0.9)
    assert out.r_t_bps == 0.5e6


def test_rate_adapt_state_validation():
    with pytest.raises(ValueError):
        RateAdaptState(r_t_bps=0.4e6, r_max_bps=5e6)    # below the floor
    with pytest.raises(ValueError):
        RateAdaptState(r_t_bps=6e6, r_max_bps=5e6)
    with pytest.raises(ValueError):
        RateAdaptState(r_t_bps=5e6, r_max_bps=5e6, gamma0=1.5)


def test_fixed_point_values():
    assert rate_adapt_fixed_point(5e6, 0.5, 0.0) == 5e6
    assert rate_adapt_fixed_point(5e6, 0.5, 0.02) == pytest.approx(4.95e6)
    assert rate_adapt_fixed_point(5e6, 1.0, 1.0) == 0.0


def test_mse_bound_values():
    assert rate_adapt_mse_bound(0.5, 1.0, 0.0) == 0.0
    assert rate_adapt_mse_bound(0.5, 1.0, 0.01) == pytest.approx(0.005 / 1.5)
    with pytest.raises(ValueError):
        rate_adapt_mse_bound(2.0, 1.0, 0.01)


def test_rate_floor_holds_across_random_traces():
    for seed in range(1000):
        trace = generate_qber_trace(1.0, seed=seed, pulse_count=3)
        st0 = RateAdaptState(r_t_bps=5e6, r_max_bps=5e6)
        res = run_rate_controller(trace, st0, strategy="rate_adapt")
        assert (res.state_bps >= 0.1 * 5e6 - 1e-9).all()


def test_error_contraction_in_expectation():
    # ensemble mean |R_t - R_final| shrinks monotonically after burn-in
    rng = substream(17, "qkms", "contraction")
    horizon, members = 400, 64
    gaps = np.zeros((members, horizon))
    for m in range(members):
        st = RateAdaptState(r_t_bps=5e6, r_max_bps=5e6)
        traj = np.empty(horizon)
        for t in range(horizon):
            st = rate_adapt_step(st, float(rng.uniform(0.005, 0.03)))
            traj[t] = st.r_t_bps
        gaps[m] = np.abs(traj - traj[-1])
    mean_gap = gaps.mean(axis=0)
    burn = 10
    assert (np.diff(mean_gap[burn:]) <= 1e-9).all()


# ---------------------------------------------------------------------------
# rate controller
# ---------------------------------------------------------------------------


def test_controller_no_drops_below_capacity():
    trace = generate_qber_trace(2.0, seed=3, pulse_count=0, noise_sigma=0.0, base_q=0.01)
    st0 = RateAdaptState(r_t_bps=5e6, r_max_bps=5e6)
    res = run_rate_controller(trace, st0, strategy="fixed", fixed_target_bps=2e6)
    assert res.total_dropped_bits == 0.0
    assert res.cap_exceed_fraction == 0.0


def test_controller_strategy_separation_on_paper_style_trace():
    trace = generate_qber_trace(60.0, seed=1)
    st0 = RateAdaptState(r_t_bps=5e6, r_max_bps=5e6)
    adaptive = run_rate_controller(trace, st0, strategy="rate_adapt")
    fixed_at_max = run_rate_controller(trace, st0, strategy="fixed", fixed_target_bps=5e6)
    assert fixed_at_max.cap_exceed_fraction >= 1e3 * adaptive.cap_exceed_fraction
    assert adaptive.total_dropped_bits <= 1e4
    assert fixed_at_max.total_dropped_bits >= 1e6


def test_controller_adaptive_never_exceeds_fixed_over_ensemble():
    for seed in range(100):
        trace = generate_qber_trace(3.0, seed=seed)
        st0 = RateAdaptState(r_t_bps=5e6, r_max_bps=5e6)
        adaptive = run_rate_controller(trace, st0, strategy="rate_adapt")
        fixed = run_rate_controller(trace, st0, strategy="fixed")
        assert adaptive.cap_exceed_fraction <= fixed.cap_exceed_fraction


def test_controller_output_never_above_capacity():
    trace = generate_qber_trace(10.0, seed=21)
    st0 = RateAdaptState(r_t_bps=5e6, r_max_bps=5e6)
    for strategy in ("rate_adapt", "fixed"):
        res = run_rate_controller(trace, st0, strategy=strategy)
        assert (res.output_bps <= res.capacity_bps + 1e-9).all()


def test_controller_capacity_matches_scalar_op():
    from qenergydex.entropy import EntropyParams, extractable_length

    trace = generate_qber_trace(0.2, seed=22)
    st0 = RateAdaptState(r_t_bps=5e6, r_max_bps=5e6)
    res = run_rate_controller(trace, st0, strategy="fixed")
    n_raw = int(5e6 // 1000)
    for i, q in enumerate(trace.samples):
        expected = extractable_length(EntropyParams(n=n_raw, q=float(q))) * 1000.0
        assert res.capacity_bps[i] == expected


def test_controller_window_aggregation():
    trace = generate_qber_trace(1.0, seed=2)
    st0 = RateAdaptState(r_t_bps=5e6, r_max_bps=5e6)
    res = run_rate_controller(trace, st0, window_ms=10, strategy="rate_adapt")
    # controller state constant within each 10 ms window
    assert len(np.unique(res.state_bps[:10])) == 1
    with pytest.raises(ValueError):
        run_rate_controller(trace, st0, window_ms=0)
    with pytest.raises(ValueError):
        run_rate_controller(trace, st0, strategy="bogus")


# ---------------------------------------------------------------------------
# audit and generation model
# ---------------------------------------------------------------------------


def test_audit_counts_and_empty_pool_flag():
    kms = KmsReplica(0, make_pool(300, 1200), seed=6)
    kms.rent(128, 10)
    kms.rent(128, 20)
    with pytest.raises(InsufficientEntropy):
        kms.rent(512, 30)
    report = kms.audit("sid-1", (0, 100))
    assert report.rent_count == 2
    assert report.bits_consumed == 256
    assert report.failure_count == 1
    assert "empty_pool" in report.anomaly_flags


def test_audit_qber_alarm():
    kms = KmsReplica(0, make_pool(), seed=6, baseline_qber=0.01)
    for _ in range(50):
        kms.record_qber(0.013)   # deviation 0.003 over a 1e6-bit window
    report = kms.audit("sid-2", (0, 100))
    assert "qber_alarm" in report.anomaly_flags
    quiet = KmsReplica(0, make_pool(), seed=6, baseline_qber=0.01)
    quiet.record_qber(0.0100001)
    assert "qber_alarm" not in quiet.audit("sid-3", (0, 100)).anomaly_flags


def test_generation_rate_loss_model():
    # eta = h2(q) + 256/n ; rate never negative
    assert generation_rate(1e6, 0.0, n_block=1000) == pytest.approx(1e6 * (1 - 0.128))
    assert generation_rate(1e6, 0.49, n_block=128) == 0.0
    mid = generation_rate(5e6, 0.02, n_block=5000)
    assert 0.0 < mid < 5e6
