"""Worker-level scaling rules and best-fit dispatch of instances to workers."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

from .catalog import DOMINANT_RESOURCE, HARDWARE, RESOURCE_TYPES
from .store import LOADED_STATES, MetadataStore, State, WorkerState

UTIL_THRESHOLD = 0.8
OVERLOAD_FRACTION = 0.8
STARTUP_S = 30.0
IDLE_WINDOW_S = 60.0
VM_PERIOD_S = 2.0

# Resources of a fresh worker per hardware class. A worker only exposes its
# own hardware class.
WORKER_TEMPLATES = {
    "CPU": {"cpu_cores": 16.0, "cpu_mem_gb": 64.0},
    "GPU": {"gpu_mem_gb": 16.0},
    "ACCEL": {"accel_cores": 4.0},
}


class NoCapacity(Exception):
    """No candidate worker can take the demand."""


def make_worker(worker_id: str, hardware: str, start_time: float = 0.0,
                total: dict[str, float] | None = None) -> WorkerState:
    if hardware not in HARDWARE:
        raise ValueError(f"unknown hardware {hardware!r}")
    return WorkerState(worker_id, dict(total or WORKER_TEMPLATES[hardware]), start_time=start_time, kind=hardware)


@dataclass(frozen=True)
class PendingWorker:
    worker_id: str
    hardware: str
    ready_at: float


@dataclass
class ClusterView:
    workers: list[WorkerState]
    # worker_id -> (hardware, state) of each loaded instance on it
    hosted: dict[str, list[tuple[str, State]]] = field(default_factory=dict)
    pending: list[PendingWorker] = field(default_factory=list)
    idle_since: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_store(cls, store: MetadataStore, pending=(), idle_since=None) -> "ClusterView":
        workers = [store.workers[w] for w in sorted(store.workers)]
        hosted = {}
        for w in workers:
            hosted[w.worker_id] = [(store.variants[store.instances[k].variant_id].hardware, store.instances[k].state)
                                   for k in w.running if store.instances[k].state in LOADED_STATES]
        return cls(workers, hosted, list(pending), dict(idle_since or {}))

    def workers_with(self, hardware: str) -> list[WorkerState]:
        return [w for w in self.workers if w.has_hardware(hardware)]

    def pending_with(self, hardware: str) -> list[PendingWorker]:
        return [p for p in self.pending if p.hardware == hardware]

    def utilizations(self, hardware: str) -> list[float]:
        """Per-worker utilization of ``hardware``; pending workers count as idle."""
        return [w.hw_util(hardware) for w in self.workers_with(hardware)] + [0.0] * len(self.pending_with(hardware))

    def has_state(self, worker_id: str, state: State, hardware: str | None = None) -> bool:
        return any(s == state and (hardware is None or h == hardware) for h, s in self.hosted.get(worker_id, ()))

    def overloaded_by_hardware(self) -> Counter:
        c = Counter()
        for items in self.hosted.values():
            for h, s in items:
                if s == State.OVERLOADED:
                    c[h] += 1
        return c

    def aggregates(self) -> dict:
        out = {}
        for h in HARDWARE:
            utils = self.utilizations(h)
            out[h] = {
                "workers": len(utils),
                "mean_util": sum(utils) / len(utils) if utils else 0.0,
                "with_overloaded": sum(self.has_state(w.worker_id, State.OVERLOADED, h) for w in self.workers_with(h)),
                "with_interfered": sum(self.has_state(w.worker_id, State.INTERFERED, h) for w in self.workers_with(h)),
            }
        return out

    def is_idle(self, w: WorkerState) -> bool:
        return not w.running and all(w.used[t] <= 1e-12 for t in RESOURCE_TYPES)


@dataclass(frozen=True)
class ScaleAction:
    kind: str  # "add" or "remove"
    hardware: str
    rule: str
    worker_id: str | None = None
    ready_at: float | None = None


@dataclass(frozen=True)
class ScalingEvent:
    time: float
    rule: str
    action: str
    hardware: str
    worker_id: str

    def to_log(self) -> str:
        return json.dumps({"time_s": round(self.time, 6), "rule": self.rule, "action": self.action,
                           "hardware": self.hardware, "worker": self.worker_id}, sort_keys=True)


def rule_r1(view: ClusterView, hardware: str, threshold: float = UTIL_THRESHOLD) -> bool:
    utils = view.utilizations(hardware)
    return bool(utils) and all(u > threshold for u in utils)


def rule_r2(view: ClusterView, hardware: str) -> bool:
    ws = view.workers_with(hardware)
    if not ws or view.pending_with(hardware):
        return False
    return all(view.has_state(w.worker_id, State.INTERFERED, hardware) for w in ws)


def rule_r3(view: ClusterView, fraction: float = OVERLOAD_FRACTION) -> str | None:
    """Hardware for a new worker when more than ``fraction`` of all workers
    host an Overloaded instance, else None."""
    total = len(view.workers) + len(view.pending)
    if total == 0:
        return None
    hot = sum(view.has_state(w.worker_id, State.OVERLOADED) for w in view.workers)
    if hot <= fraction * total:
        return None
    counts = view.overloaded_by_hardware()
    return max(sorted(counts), key=lambda h: counts[h])


def vm_scale_decision(
    view: ClusterView,
    now: float,
    util_threshold: float = UTIL_THRESHOLD,
    overload_fraction: float = OVERLOAD_FRACTION,
    startup_s: float = STARTUP_S,
    idle_window_s: float = IDLE_WINDOW_S,
    min_workers: dict[str, int] | None = None,
) -> list[ScaleAction]:
    """At most one add per hardware class per evaluation, plus removals of
    workers idle for a full window."""
    actions: list[ScaleAction] = []
    added: set[str] = set()

    def add(h: str, rule: str):
        if h not in added:
            added.add(h)
            actions.append(ScaleAction("add", h, rule, ready_at=now + startup_s))

    for h in HARDWARE:
        if rule_r1(view, h, util_threshold):
            add(h, "R1")
    for h in HARDWARE:
        if rule_r2(view, h):
            add(h, "R2")
    h3 = rule_r3(view, overload_fraction)
    if h3 is not None:
        add(h3, "R3")

    min_workers = min_workers or {}
    remaining = Counter(w.kind for w in view.workers)
    for w in view.workers:
        if not view.is_idle(w):
            continue
        since = view.idle_since.get(w.worker_id)
        if since is None or now - since < idle_window_s:
            continue
        if now < w.start_time + startup_s + idle_window_s:
            continue
        if remaining[w.kind] - 1 < min_workers.get(w.kind, 0):
            continue
        remaining[w.kind] -= 1
        actions.append(ScaleAction("remove", w.kind, "idle", worker_id=w.worker_id))
    return actions


def dominant_of(demand: dict[str, float], hardware: str | None = None) -> str:
    if hardware is not None:
        return DOMINANT_RESOURCE[hardware]
    for h in HARDWARE:
        if demand.get(DOMINANT_RESOURCE[h], 0.0) > 0:
            return DOMINANT_RESOURCE[h]
    return max(sorted(demand), key=lambda t: demand[t])


def dispatch_bin_pack(
    candidates: list[tuple[str, dict[str, float]]],
    demand: dict[str, float],
    hardware: str | None = None,
) -> str:
    """Best fit on the dominant resource: the worker left with the least free
    dominant resource after placement. Ties go to the lowest worker_id."""
    if not candidates:
        raise NoCapacity("no candidate workers")
    dom = dominant_of(demand, hardware)
    best = None
    for wid, free in candidates:
        if any(free.get(t, 0.0) + 1e-9 < amt for t, amt in demand.items() if amt > 0):
            continue
        key = (free.get(dom, 0.0) - demand.get(dom, 0.0), wid)
        if best is None or key < best:
            best = key
    if best is None:
        raise NoCapacity(f"demand {demand} fits no worker")
    return best[1]


def place_instance(store: MetadataStore, hardware: str, demand: dict[str, float]) -> str:
    candidates = [(wid, w.free()) for wid, w in sorted(store.workers.items()) if w.has_hardware(hardware)]
    return dispatch_bin_pack(candidates, demand, hardware)
