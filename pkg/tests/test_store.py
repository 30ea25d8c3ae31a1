from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, strategies as st

from modelless.autoscale_vm import make_worker
from modelless.catalog import ModelArchitecture, VariantProfile, example_variants
from modelless.lifecycle import transition
from modelless.store import IllegalTransition, InstanceRecord, MetadataStore, NoWorker, State, StoreError

from stores import random_store


def _v(vid, lat, load=0.0, acc=0.7, arch="m"):
    return VariantProfile(vid, arch, "CPU", "none", 1, acc, {1: lat}, load, 10.0, 1.0, {"cpu_cores": 1.0})


def example_store(app="demo") -> MetadataStore:
    cat = example_variants()
    s = MetadataStore()
    s.register_model(cat.arch("resnet50"), list(cat), app)
    return s


def test_register_and_lookup():
    s = example_store()
    assert {v.variant_id for v in s.app_variants("demo")} == {"A", "B", "C"}
    with pytest.raises(StoreError, match="already registered"):
        s.register_model(example_variants().arch("resnet50"), list(example_variants()), "demo")
    with pytest.raises(StoreError, match="unknown arch"):
        s.register_model(ModelArchitecture("other"), [_v("x", 10)], "demo2")


def test_candidates_examples():
    s = MetadataStore()
    s.register_model(ModelArchitecture("m"), [_v("a", 20, 10), _v("b", 50, 50), _v("c", 300, 100)], "app")
    assert s.candidates_by_requirements("app", 0.5, 200, {State.INACTIVE}) == [("a", 30.0), ("b", 100.0)]
    assert s.candidates_by_requirements("app", 0.9, 1e9, {State.INACTIVE}) == []
    t = example_store()
    assert [vid for vid, _ in t.candidates_by_requirements("demo", 0.0, 50, {State.INACTIVE})] == ["C", "B"]
    with pytest.raises(StoreError, match="unknown app"):
        s.candidates_by_requirements("nope", 0.0, 10)


def test_equal_latency_ties_by_id():
    s = MetadataStore()
    s.register_model(ModelArchitecture("m"), [_v("z", 20), _v("a", 20), _v("m", 20)], "app")
    assert [v for v, _ in s.candidates_by_requirements("app", 0, 100)] == ["a", "m", "z"]


def test_update_instance_edges():
    s = example_store()
    s.add_worker(make_worker("w1", "CPU"))
    rec = InstanceRecord("A", "w1", "demo")
    s.add_instance(rec)
    active = transition(rec, "load_complete")
    s.update_instance(active)
    assert s.instances[rec.key].state == State.ACTIVE
    with pytest.raises(IllegalTransition, match="Active->Inactive on monitor"):
        transition(active, "monitor", State.INACTIVE)
    over = transition(active, "monitor", State.OVERLOADED)
    s.update_instance(over)
    assert s.instances_in(State.OVERLOADED) == [over]
    s2 = example_store()
    s2.add_worker(make_worker("w1", "CPU"))
    s2.add_instance(rec)
    with pytest.raises(IllegalTransition, match="Inactive->Overloaded"):
        s2.update_instance(InstanceRecord("A", "w1", "demo", State.OVERLOADED, current_qps=5))


def test_inactive_carries_zero_qps():
    with pytest.raises(StoreError):
        InstanceRecord("A", "w", "app", State.INACTIVE, current_qps=1.0)


def test_least_loaded_worker():
    s = MetadataStore()
    for wid, u in (("w1", 0.2), ("w2", 0.7)):
        w = make_worker(wid, "GPU")
        w.util["gpu_mem_gb"] = u
        s.add_worker(w)
    assert s.least_loaded_worker(["w1", "w2"], "GPU") == "w1"
    s.workers["w2"].util["gpu_mem_gb"] = 0.2
    assert s.least_loaded_worker(["w2", "w1"], "GPU") == "w1"
    assert s.least_loaded_worker(["w2"], "GPU") == "w2"
    with pytest.raises(NoWorker, match="no worker"):
        s.least_loaded_worker([], "GPU")


def test_reserve_never_overcommits():
    s = MetadataStore()
    s.add_worker(make_worker("w", "ACCEL"))
    s.reserve("w", {"accel_cores": 4})
    with pytest.raises(StoreError, match="over-commit"):
        s.reserve("w", {"accel_cores": 1})


def test_snapshot_is_stable_json():
    s = example_store()
    s.add_worker(make_worker("w1", "CPU"))
    s.add_instance(InstanceRecord("A", "w1", "demo"))
    d = json.loads(s.dump())
    assert list(d) == ["apps", "variants", "instances", "workers"]
    assert list(d["instances"][0]) == ["variant_id", "worker_id", "replica", "app_id", "state",
                                       "current_qps", "observed_latency_ms", "since"]
    assert s.dump() == s.dump()


def test_observed_latency_ema():
    r = InstanceRecord("A", "w", "app", State.ACTIVE).observe_latency(100.0).observe_latency(200.0)
    assert r.observed_latency_ms == pytest.approx(0.3 * 200 + 0.7 * 100)


STATES = st.sampled_from([State.INACTIVE, State.ACTIVE, State.OVERLOADED, State.INTERFERED])


@given(st.integers(0, 10_000), st.lists(st.tuples(st.floats(0, 1), st.floats(0, 2000), STATES), max_size=12))
def test_index_matches_scan(seed, probes):
    s = random_store(random.Random(seed))
    for acc, budget, state in probes:
        for filt in ({state}, {State.ACTIVE, State.OVERLOADED}):
            assert s.candidates_by_requirements("app", acc, budget, filt) == s.candidates_scan("app", acc, budget, filt)
            # Independent filter-and-sort over every registered variant.
            want = sorted((v.latency_ms + (v.load_latency_ms if State.INACTIVE in filt else 0), v.variant_id)
                          for v in s.app_variants("app")
                          if (State.INACTIVE in filt or any(r.variant_id == v.variant_id and r.state in filt
                                                            for r in s.instances.values()))
                          and v.accuracy >= acc)
            want = [(vid, k) for k, vid in want if k <= budget]
            assert s.candidates_by_requirements("app", acc, budget, filt) == want


@given(st.integers(0, 10_000), st.lists(st.tuples(st.integers(0, 200), STATES), max_size=60))
def test_state_index_partitions_instances(seed, updates):
    rng = random.Random(seed)
    s = random_store(rng)
    keys = sorted(s.instances)
    for i, target in updates:
        if not keys:
            break
        rec = s.instances[keys[i % len(keys)]]
        new = InstanceRecord(rec.variant_id, rec.worker_id, rec.app_id, target,
                             current_qps=0.0 if target == State.INACTIVE else 1.0, replica=rec.replica)
        try:
            s.update_instance(new)
        except IllegalTransition:
            assert s.instances[rec.key] == rec
        part = s.state_partition()
        seen = [k for ks in part.values() for k in ks]
        assert sorted(seen) == sorted(s.instances)
        for st_, ks in part.items():
            assert all(s.instances[k].state == st_ for k in ks)
