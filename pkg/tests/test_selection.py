from __future__ import annotations

import random

import pytest
from hypothesis import given, strategies as st

from modelless.autoscale_vm import make_worker
from modelless.catalog import example_variants
from modelless.lifecycle import transition
from modelless.selection import (
    Escalate,
    NoFeasibleVariant,
    QueryRequest,
    SelectionError,
    Unplaceable,
    get_variant_for_query,
    mitigate,
)
from modelless.store import InstanceRecord, MetadataStore, State

from stores import brute_force_select, random_query, random_store


def example_store(workers=("CPU", "ACCEL", "GPU")) -> MetadataStore:
    cat = example_variants()
    s = MetadataStore()
    s.register_model(cat.arch("resnet50"), list(cat), "demo")
    for i, hw in enumerate(workers):
        s.add_worker(make_worker(f"w{i}-{hw.lower()}", hw))
    return s


def load(s, vid, wid, replica=0, state=State.ACTIVE, qps=0.0):
    rec = InstanceRecord(vid, wid, "demo", replica=replica)
    s.reserve(wid, s.variants[vid].resources)
    s.add_instance(rec)
    rec = transition(rec, "load_complete")
    s.update_instance(rec)
    if state != State.ACTIVE:
        rec = transition(rec, "monitor", state)
        s.update_instance(rec)
    s.set_load(rec.key, qps)
    return rec


def q(slo, acc=0.7, **kw):
    return QueryRequest("demo", latency_slo_ms=slo, min_accuracy=acc, **kw)


def test_query_invariants():
    with pytest.raises(SelectionError):
        QueryRequest("a", "by_model")
    with pytest.raises(SelectionError):
        QueryRequest("a", "by_requirements", latency_slo_ms=10)
    with pytest.raises(SelectionError):
        QueryRequest("a", latency_slo_ms=10, min_accuracy=0, batch=0)


def test_active_instance_preferred():
    s = example_store()
    load(s, "A", "w0-cpu")
    p = get_variant_for_query(q(300), s)
    assert (p.variant_id, p.worker_id, p.needs_load) == ("A", "w0-cpu", False)
    assert p.estimated_latency_ms == 200


def test_inactive_lowest_combined_latency():
    p = get_variant_for_query(q(50), example_store())
    assert (p.variant_id, p.needs_load) == ("C", True)


def test_no_feasible_suggests_closest():
    with pytest.raises(NoFeasibleVariant) as e:
        get_variant_for_query(q(10), example_store())
    assert e.value.suggestion == "C"
    with pytest.raises(NoFeasibleVariant) as e:
        get_variant_for_query(q(1000, acc=0.99), example_store())
    # Nothing meets the accuracy; equal accuracies fall back to min latency.
    assert e.value.suggestion == "C"


def test_unplaceable_without_workers():
    with pytest.raises(Unplaceable):
        get_variant_for_query(q(50), example_store(workers=("CPU",)))


def test_skips_overloaded_and_interfered():
    s = example_store()
    load(s, "B", "w1-accel", state=State.OVERLOADED, qps=100)
    load(s, "C", "w2-gpu", state=State.INTERFERED)
    p = get_variant_for_query(q(300), s)
    # A fresh C instance, never the Interfered one.
    assert p.needs_load and p.variant_id == "C"


def test_active_without_headroom_skipped():
    s = example_store()
    load(s, "A", "w0-cpu", qps=5.0)
    assert get_variant_for_query(q(300), s).needs_load


def test_offline_takes_cheapest():
    p = get_variant_for_query(q(1, kind="offline"), example_store())
    assert p.variant_id == "A"


def test_by_model():
    s = example_store()
    p = get_variant_for_query(QueryRequest("demo", "by_model", model_name="resnet50"), s)
    # Cheapest to load: min load + inference latency.
    assert p.variant_id == "C" and p.needs_load
    load(s, "A", "w0-cpu")
    p = get_variant_for_query(QueryRequest("demo", "by_model", model_name="resnet50"), s)
    assert (p.variant_id, p.needs_load) == ("A", False)
    with pytest.raises(SelectionError, match="unknown model"):
        get_variant_for_query(QueryRequest("demo", "by_model", model_name="bert"), s)


def test_mitigation():
    s = example_store(workers=("GPU", "GPU"))
    rec = load(s, "C", "w0-gpu", state=State.INTERFERED)
    assert mitigate(rec, s).kind == "intra"
    s.reserve("w0-gpu", s.workers["w0-gpu"].free())
    s.workers["w1-gpu"].util["gpu_mem_gb"] = 0.3
    plan = mitigate(rec, s)
    assert (plan.kind, plan.target_worker) == ("remote", "w1-gpu")
    s.reserve("w1-gpu", s.workers["w1-gpu"].free())
    with pytest.raises(Escalate):
        mitigate(rec, s)
    with pytest.raises(SelectionError):
        mitigate(load(s, "A", s.add_worker(make_worker("c", "CPU")) or "c"), s)


def check_against_oracle(store, query):
    try:
        want = brute_force_select(query, store)
    except (NoFeasibleVariant, Unplaceable) as e:
        with pytest.raises(type(e)):
            get_variant_for_query(query, store)
        return None
    p = get_variant_for_query(query, store)
    assert (p.variant_id, p.worker_id, p.needs_load) == want
    v = store.variants[p.variant_id]
    assert v.accuracy >= query.min_accuracy
    assert p.estimated_latency_ms <= query.latency_slo_ms
    assert p.estimated_latency_ms == v.latency_at(query.batch) + (v.load_latency_ms if p.needs_load else 0)
    if not p.needs_load:
        hosts = [r for r in store.instances.values() if r.variant_id == p.variant_id and r.worker_id == p.worker_id]
        assert any(r.state == State.ACTIVE for r in hosts)
    return p


@given(st.integers(0, 2**32 - 1))
def test_selection_matches_brute_force(seed):
    rng = random.Random(seed)
    store = random_store(rng)
    for _ in range(5):
        check_against_oracle(store, random_query(rng))
