from __future__ import annotations

import random

import pytest
from hypothesis import given, strategies as st

from modelless.autoscale_vm import (
    ClusterView,
    NoCapacity,
    PendingWorker,
    dispatch_bin_pack,
    make_worker,
    place_instance,
    rule_r1,
    rule_r2,
    rule_r3,
    vm_scale_decision,
)
from modelless.catalog import DOMINANT_RESOURCE, HARDWARE, RESOURCE_TYPES
from modelless.store import MetadataStore, State

from vm_views import oracle_r1, oracle_r2, oracle_r3, random_view


def gpu_view(utils, states=None):
    ws = []
    for i, u in enumerate(utils):
        w = make_worker(f"g{i}", "GPU")
        w.util["gpu_mem_gb"] = u
        ws.append(w)
    hosted = {w.worker_id: [("GPU", s) for s in (states or {}).get(w.worker_id, [])] for w in ws}
    return ClusterView(ws, hosted)


def test_r1_examples():
    acts = vm_scale_decision(gpu_view([0.9, 0.85]), 0.0)
    assert [(a.kind, a.hardware, a.rule, a.ready_at) for a in acts] == [("add", "GPU", "R1", 30.0)]
    assert vm_scale_decision(gpu_view([0.9, 0.5]), 0.0) == []
    assert vm_scale_decision(gpu_view([0.8]), 0.0) == []  # strictly exceeds


def test_r1_blocked_by_pending_worker():
    v = gpu_view([0.9])
    v.pending.append(PendingWorker("g9", "GPU", 30.0))
    assert not rule_r1(v, "GPU")


def test_r2_every_worker_interfered():
    st_ = {"g0": [State.INTERFERED], "g1": [State.ACTIVE, State.INTERFERED]}
    assert rule_r2(gpu_view([0.1, 0.1], st_), "GPU")
    assert not rule_r2(gpu_view([0.1, 0.1], {"g0": [State.INTERFERED]}), "GPU")


def test_r3_fraction_and_hardware():
    v = gpu_view([0.1] * 5, {f"g{i}": [State.OVERLOADED] for i in range(5)})
    assert rule_r3(v) == "GPU"
    assert [a.rule for a in vm_scale_decision(v, 0.0)] == ["R3"]
    v = gpu_view([0.1] * 5, {f"g{i}": [State.OVERLOADED] for i in range(4)})
    assert rule_r3(v) is None  # 80% is not more than 80%


def test_one_add_per_hardware():
    v = gpu_view([0.9, 0.9], {"g0": [State.OVERLOADED, State.INTERFERED], "g1": [State.OVERLOADED, State.INTERFERED]})
    acts = vm_scale_decision(v, 0.0)
    assert [(a.hardware, a.rule) for a in acts] == [("GPU", "R1")]


def test_idle_removal_and_no_thrashing():
    w = make_worker("c1", "CPU", start_time=10.0)
    view = ClusterView([make_worker("c0", "CPU"), w], {"c0": [], "c1": []}, idle_since={"c1": 10.0})
    # Idle for the window but still within startup + window of its start.
    assert vm_scale_decision(view, 80.0, min_workers={"CPU": 1}) == []
    acts = vm_scale_decision(view, 100.0, min_workers={"CPU": 1})
    assert [(a.kind, a.worker_id) for a in acts] == [("remove", "c1")]
    # Never below the initial fleet.
    assert vm_scale_decision(view, 100.0, min_workers={"CPU": 2}) == []


@given(st.integers(0, 2**32 - 1))
def test_rules_match_quantifiers(seed):
    v = random_view(random.Random(seed))
    for hw in HARDWARE:
        assert rule_r1(v, hw) == oracle_r1(v, hw)
        assert rule_r2(v, hw) == oracle_r2(v, hw)
    assert rule_r3(v) == oracle_r3(v)


@given(st.integers(0, 2**32 - 1), st.floats(0, 0.3))
def test_r1_monotone(seed, bump):
    v = random_view(random.Random(seed))
    for hw in HARDWARE:
        if not rule_r1(v, hw):
            continue
        for w in v.workers:
            d = DOMINANT_RESOURCE[w.kind]
            w.util[d] = min(1.0, w.util[d] + bump)
        assert rule_r1(v, hw)


def test_aggregates_recomputable():
    v = random_view(random.Random(7))
    agg = v.aggregates()
    for hw in HARDWARE:
        ws = [w for w in v.workers if w.kind == hw]
        assert agg[hw]["workers"] == len(ws) + len([p for p in v.pending if p.hardware == hw])


def test_bin_pack_examples():
    cands = [("a", {"gpu_mem_gb": 8.0}), ("b", {"gpu_mem_gb": 4.0})]
    assert dispatch_bin_pack(cands, {"gpu_mem_gb": 3.0}) == "b"
    assert dispatch_bin_pack(cands[:1], {"gpu_mem_gb": 3.0}) == "a"
    assert dispatch_bin_pack([("z", {"gpu_mem_gb": 4.0}), ("y", {"gpu_mem_gb": 4.0})], {"gpu_mem_gb": 1}) == "y"
    with pytest.raises(NoCapacity):
        dispatch_bin_pack(cands, {"gpu_mem_gb": 9.0})
    with pytest.raises(NoCapacity):
        dispatch_bin_pack([], {"gpu_mem_gb": 1.0})


@given(st.lists(st.tuples(st.sampled_from([4.0, 8.0, 16.0]), st.sampled_from([16.0, 32.0, 64.0])),
                min_size=1, max_size=5),
       st.lists(st.tuples(st.sampled_from([1.0, 2.0, 4.0]), st.sampled_from([1.0, 4.0, 8.0])), max_size=40))
def test_bin_pack_never_overcommits(workers, demands):
    s = MetadataStore()
    for i, (cores, mem) in enumerate(workers):
        s.add_worker(make_worker(f"w{i}", "CPU", total={"cpu_cores": cores, "cpu_mem_gb": mem}))
    for cores, mem in demands:
        demand = {"cpu_cores": cores, "cpu_mem_gb": mem}
        free_before = {wid: w.free() for wid, w in s.workers.items()}
        fits = [wid for wid, f in free_before.items() if f["cpu_cores"] >= cores and f["cpu_mem_gb"] >= mem]
        try:
            wid = place_instance(s, "CPU", demand)
        except NoCapacity:
            assert not fits
            continue
        # Best fit on cores, lowest id on ties.
        assert wid == min(fits, key=lambda w: (free_before[w]["cpu_cores"] - cores, w))
        s.reserve(wid, demand)
        for w in s.workers.values():
            assert all(w.used[t] <= w.total[t] + 1e-9 for t in RESOURCE_TYPES)
