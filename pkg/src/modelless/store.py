"""Metadata store: variants, instances, and worker stats with ordered indexes.

Candidate lookups go through per-(app, state filter) indexes that hold variants
sorted by key latency, so a probe is a binary search plus a vectorized accuracy
mask instead of a full scan and sort.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

import numpy as np

from .catalog import DOMINANT_RESOURCE, RESOURCE_TYPES, ModelArchitecture, VariantProfile

EMA_ALPHA = 0.3


class State(str, Enum):
    INACTIVE = "Inactive"
    ACTIVE = "Active"
    OVERLOADED = "Overloaded"
    INTERFERED = "Interfered"


LOADED_STATES = frozenset({State.ACTIVE, State.OVERLOADED, State.INTERFERED})


class StoreError(Exception):
    pass


class IllegalTransition(StoreError):
    def __init__(self, src: State, dst: State, event: str = ""):
        self.src, self.dst = State(src), State(dst)
        how = f" on {event}" if event else ""
        super().__init__(f"illegal transition {self.src.value}->{self.dst.value}{how}")


class NoWorker(StoreError):
    def __init__(self):
        super().__init__("no worker")


@dataclass(frozen=True)
class InstanceRecord:
    variant_id: str
    worker_id: str
    app_id: str
    state: State = State.INACTIVE
    current_qps: float = 0.0
    observed_latency_ms: float = 0.0
    since: float = 0.0
    replica: int = 0

    def __post_init__(self):
        if self.state == State.INACTIVE and self.current_qps != 0:
            raise StoreError("Inactive records carry current_qps = 0")

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.variant_id, self.worker_id, self.replica)

    def observe_latency(self, latency_ms: float) -> "InstanceRecord":
        if self.observed_latency_ms <= 0:
            return replace(self, observed_latency_ms=latency_ms)
        ema = EMA_ALPHA * latency_ms + (1 - EMA_ALPHA) * self.observed_latency_ms
        return replace(self, observed_latency_ms=ema)


@dataclass
class WorkerState:
    worker_id: str
    total: dict[str, float]
    used: dict[str, float] = field(default_factory=dict)
    running: list[tuple[str, str, int]] = field(default_factory=list)
    util: dict[str, float] = field(default_factory=dict)
    start_time: float = 0.0
    kind: str = ""

    def __post_init__(self):
        for t in RESOURCE_TYPES:
            self.total.setdefault(t, 0.0)
            self.used.setdefault(t, 0.0)
            self.util.setdefault(t, 0.0)

    def free(self) -> dict[str, float]:
        return {t: self.total[t] - self.used[t] for t in RESOURCE_TYPES}

    def fits(self, demand: dict[str, float]) -> bool:
        return all(self.used[t] + amt <= self.total[t] + 1e-9 for t, amt in demand.items() if amt > 0)

    def has_hardware(self, hardware: str) -> bool:
        return self.total[DOMINANT_RESOURCE[hardware]] > 0

    def hw_util(self, hardware: str) -> float:
        return self.util[DOMINANT_RESOURCE[hardware]]

    def allocation(self, rtype: str) -> float:
        return self.used[rtype] / self.total[rtype] if self.total[rtype] > 0 else 0.0


# Edge set of the variant lifecycle. Interfered->Overloaded is routed through
# classification (Overloaded dominates); the reverse requires a healthy window.
EDGES: dict[str, set[tuple[State, State]]] = {
    "load_complete": {(State.INACTIVE, State.ACTIVE)},
    "unload": {(s, State.INACTIVE) for s in LOADED_STATES},
    "monitor": {
        (State.ACTIVE, State.OVERLOADED),
        (State.ACTIVE, State.INTERFERED),
        (State.OVERLOADED, State.ACTIVE),
        (State.INTERFERED, State.ACTIVE),
        (State.INTERFERED, State.OVERLOADED),
    } | {(s, s) for s in LOADED_STATES},
    "mitigated": {(State.INTERFERED, State.ACTIVE)},
}
LEGAL_EDGES = frozenset().union(*EDGES.values())


def is_legal(src: State, dst: State) -> bool:
    return (State(src), State(dst)) in LEGAL_EDGES


@dataclass
class _Index:
    keys: np.ndarray
    acc: np.ndarray
    ids: list[str]


class MetadataStore:
    """Single-writer registry. Mutations go through the methods below; readers
    get consistent results because each mutation updates all indexes before
    returning."""

    def __init__(self):
        self.archs: dict[str, ModelArchitecture] = {}
        self.variants: dict[str, VariantProfile] = {}
        self._app_variants: dict[str, list[str]] = {}
        self._app_archs: dict[str, set[str]] = {}
        self._variant_apps: dict[str, set[str]] = {}
        self.instances: dict[tuple[str, str, int], InstanceRecord] = {}
        self._by_state: dict[State, set[tuple[str, str, int]]] = {s: set() for s in State}
        # variant_id -> state -> number of instances
        self._variant_state_count: dict[str, dict[State, int]] = {}
        self._variant_instances: dict[str, set[tuple[str, str, int]]] = {}
        self.workers: dict[str, WorkerState] = {}
        self._index_cache: dict[tuple[str, frozenset], _Index] = {}
        self._app_version: dict[str, int] = {}

    # -- registration -------------------------------------------------------

    def register_model(self, arch: ModelArchitecture, variants: Iterable[VariantProfile], app_id: str) -> dict:
        variants = list(variants)
        if arch.arch_id in self._app_archs.get(app_id, set()):
            raise StoreError(f"model {arch.arch_id!r} already registered for app {app_id!r}")
        for v in variants:
            if v.arch_id != arch.arch_id:
                raise StoreError(f"variant {v.variant_id!r} references unknown arch {v.arch_id!r}")
            known = self.variants.get(v.variant_id)
            if known is not None and known != v:
                raise StoreError(f"variant {v.variant_id!r} already registered with a different profile")
        self.archs.setdefault(arch.arch_id, arch)
        self._app_archs.setdefault(app_id, set()).add(arch.arch_id)
        ids = self._app_variants.setdefault(app_id, [])
        for v in variants:
            self.variants[v.variant_id] = v
            self._variant_apps.setdefault(v.variant_id, set()).add(app_id)
            self._variant_state_count.setdefault(v.variant_id, {s: 0 for s in State})
            ids.append(v.variant_id)
        self._bump(app_id)
        return {"app_id": app_id, "arch_id": arch.arch_id, "variants": [v.variant_id for v in variants]}

    def apps(self) -> list[str]:
        return sorted(self._app_variants)

    def app_variants(self, app_id: str) -> list[VariantProfile]:
        if app_id not in self._app_variants:
            raise StoreError(f"unknown app {app_id!r}")
        return [self.variants[v] for v in self._app_variants[app_id]]

    def app_of_variant(self, variant_id: str) -> str:
        return sorted(self._variant_apps[variant_id])[0]

    def model_variants(self, arch_id: str) -> list[VariantProfile]:
        if arch_id not in self.archs:
            raise StoreError(f"unknown model {arch_id!r}")
        return [v for v in self.variants.values() if v.arch_id == arch_id]

    # -- workers ------------------------------------------------------------

    def add_worker(self, worker: WorkerState) -> None:
        if worker.worker_id in self.workers:
            raise StoreError(f"duplicate worker {worker.worker_id!r}")
        self.workers[worker.worker_id] = worker

    def remove_worker(self, worker_id: str) -> None:
        w = self.workers[worker_id]
        if any(self.instances[k].state != State.INACTIVE for k in w.running):
            raise StoreError(f"worker {worker_id!r} still has loaded instances")
        del self.workers[worker_id]

    def reserve(self, worker_id: str, demand: dict[str, float]) -> None:
        w = self.workers[worker_id]
        if not w.fits(demand):
            raise StoreError(f"worker {worker_id!r} over-commit")
        for t, amt in demand.items():
            w.used[t] += amt

    def release(self, worker_id: str, demand: dict[str, float]) -> None:
        w = self.workers.get(worker_id)
        if w is None:
            return
        for t, amt in demand.items():
            w.used[t] = max(0.0, w.used[t] - amt)

    def least_loaded_worker(self, candidates: Iterable[str], hardware: str) -> str:
        best = None
        for wid in candidates:
            key = (self.workers[wid].hw_util(hardware), wid)
            if best is None or key < best:
                best = key
        if best is None:
            raise NoWorker()
        return best[1]

    # -- instances ----------------------------------------------------------

    def add_instance(self, record: InstanceRecord) -> None:
        """Create an instance slot (always Inactive) on a worker."""
        if record.key in self.instances:
            raise StoreError(f"duplicate instance {record.key}")
        if record.state != State.INACTIVE:
            raise StoreError("new instances start Inactive")
        self.instances[record.key] = record
        self._by_state[State.INACTIVE].add(record.key)
        self._variant_state_count[record.variant_id][State.INACTIVE] += 1
        self._variant_instances.setdefault(record.variant_id, set()).add(record.key)
        self.workers[record.worker_id].running.append(record.key)

    def drop_instance(self, key: tuple[str, str, int]) -> None:
        rec = self.instances[key]
        if rec.state != State.INACTIVE:
            raise StoreError("only Inactive instances can be dropped")
        del self.instances[key]
        self._by_state[State.INACTIVE].discard(key)
        self._variant_state_count[rec.variant_id][State.INACTIVE] -= 1
        self._variant_instances[rec.variant_id].discard(key)
        w = self.workers.get(rec.worker_id)
        if w is not None and key in w.running:
            w.running.remove(key)

    def update_instance(self, record: InstanceRecord) -> dict:
        old = self.instances.get(record.key)
        if old is None:
            raise StoreError(f"unknown instance {record.key}")
        if old.state != record.state:
            if not is_legal(old.state, record.state):
                raise IllegalTransition(old.state, record.state)
            self._by_state[old.state].discard(record.key)
            self._by_state[record.state].add(record.key)
            counts = self._variant_state_count[record.variant_id]
            counts[old.state] -= 1
            counts[record.state] += 1
            if (counts[old.state] == 0) or (counts[record.state] == 1):
                for app in self._variant_apps[record.variant_id]:
                    self._bump(app)
        self.instances[record.key] = record
        return {"key": record.key, "state": record.state.value}

    def set_load(self, key: tuple[str, str, int], qps: float) -> None:
        rec = self.instances[key]
        if rec.state == State.INACTIVE:
            return
        self.instances[key] = replace(rec, current_qps=qps)

    def instances_in(self, state: State) -> list[InstanceRecord]:
        return [self.instances[k] for k in sorted(self._by_state[state])]

    def state_partition(self) -> dict[State, set]:
        return {s: set(v) for s, v in self._by_state.items()}

    def instances_of(self, variant_id: str, states: Iterable[State] = LOADED_STATES) -> list[InstanceRecord]:
        states = set(states)
        keys = sorted(self._variant_instances.get(variant_id, ()))
        return [self.instances[k] for k in keys if self.instances[k].state in states]

    def variant_has_state(self, variant_id: str, states: Iterable[State]) -> bool:
        counts = self._variant_state_count.get(variant_id, {})
        return any(counts.get(s, 0) > 0 for s in states)

    # -- candidate lookup ---------------------------------------------------

    def _bump(self, app_id: str) -> None:
        self._app_version[app_id] = self._app_version.get(app_id, 0) + 1
        for k in [k for k in self._index_cache if k[0] == app_id]:
            del self._index_cache[k]

    def _key_latency(self, v: VariantProfile, states: frozenset) -> float:
        if State.INACTIVE in states:
            return v.latency_ms + v.load_latency_ms
        return v.latency_ms

    def _members(self, app_id: str, states: frozenset) -> list[VariantProfile]:
        ids = self._app_variants[app_id]
        if State.INACTIVE in states:
            # Any registered variant can be loaded as a fresh instance.
            return [self.variants[v] for v in ids]
        return [self.variants[v] for v in ids if self.variant_has_state(v, states)]

    def _index(self, app_id: str, states: frozenset) -> _Index:
        cached = self._index_cache.get((app_id, states))
        if cached is not None:
            return cached
        rows = sorted((self._key_latency(v, states), v.variant_id, v.accuracy)
                      for v in self._members(app_id, states))
        idx = _Index(
            keys=np.array([r[0] for r in rows], dtype=float),
            acc=np.array([r[2] for r in rows], dtype=float),
            ids=[r[1] for r in rows],
        )
        self._index_cache[(app_id, states)] = idx
        return idx

    def candidates_by_requirements(
        self,
        app_id: str,
        min_accuracy: float,
        latency_budget_ms: float,
        state_filter: Iterable[State] = (State.INACTIVE,),
    ) -> list[tuple[str, float]]:
        """Variants of ``app_id`` with accuracy >= min_accuracy and key latency
        within budget, ascending by (key latency, variant_id).

        The key latency is inference latency at batch 1, plus load latency
        when the Inactive state is in the filter.
        """
        if app_id not in self._app_variants:
            raise StoreError(f"unknown app {app_id!r}")
        states = frozenset(State(s) for s in state_filter)
        idx = self._index(app_id, states)
        hi = int(np.searchsorted(idx.keys, latency_budget_ms, side="right"))
        if hi == 0:
            return []
        hits = np.flatnonzero(idx.acc[:hi] >= min_accuracy)
        keys = idx.keys
        ids = idx.ids
        return [(ids[i], float(keys[i])) for i in hits.tolist()]

    def candidates_scan(
        self,
        app_id: str,
        min_accuracy: float,
        latency_budget_ms: float,
        state_filter: Iterable[State] = (State.INACTIVE,),
    ) -> list[tuple[str, float]]:
        """Linear scan-and-sort equivalent of candidates_by_requirements."""
        if app_id not in self._app_variants:
            raise StoreError(f"unknown app {app_id!r}")
        states = frozenset(State(s) for s in state_filter)
        out = []
        for v in self._members(app_id, states):
            key = self._key_latency(v, states)
            if v.accuracy >= min_accuracy and key <= latency_budget_ms:
                out.append((key, v.variant_id))
        out.sort()
        return [(vid, key) for key, vid in out]

    # -- debugging ----------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "apps": {a: list(ids) for a, ids in sorted(self._app_variants.items())},
            "variants": sorted(self.variants),
            "instances": [
                {
                    "variant_id": r.variant_id,
                    "worker_id": r.worker_id,
                    "replica": r.replica,
                    "app_id": r.app_id,
                    "state": r.state.value,
                    "current_qps": r.current_qps,
                    "observed_latency_ms": r.observed_latency_ms,
                    "since": r.since,
                }
                for _, r in sorted(self.instances.items())
            ],
            "workers": [
                {
                    "worker_id": w.worker_id,
                    "kind": w.kind,
                    "total": {t: w.total[t] for t in RESOURCE_TYPES},
                    "used": {t: w.used[t] for t in RESOURCE_TYPES},
                    "util": {t: w.util[t] for t in RESOURCE_TYPES},
                    "running": [list(k) for k in w.running],
                    "start_time": w.start_time,
                }
                for _, w in sorted(self.workers.items())
            ],
        }

    def dump(self) -> str:
        return json.dumps(self.snapshot(), indent=2, sort_keys=False)
