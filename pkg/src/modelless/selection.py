"""Query-time variant selection, by-model dispatch, and interference mitigation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .catalog import VariantProfile
from .store import InstanceRecord, MetadataStore, NoWorker, State, StoreError


class SelectionError(Exception):
    pass


class NoFeasibleVariant(SelectionError):
    def __init__(self, suggestion: str | None, reason: str = ""):
        self.suggestion = suggestion
        super().__init__(f"no feasible variant ({reason}); closest: {suggestion}")


class Unplaceable(SelectionError):
    """A variant was chosen but no worker has the free resources to load it."""

    def __init__(self, variant_id: str, hardware: str):
        self.variant_id = variant_id
        self.hardware = hardware
        super().__init__(f"no worker with free {hardware} resources for {variant_id}")


class Escalate(SelectionError):
    """No capable worker anywhere; the VM autoscaler must add one."""


@dataclass(frozen=True)
class QueryRequest:
    app_id: str
    mode: str = "by_requirements"
    model_name: str | None = None
    latency_slo_ms: float | None = None
    min_accuracy: float | None = None
    kind: str = "online"
    batch: int = 1
    arrival: float = 0.0

    def __post_init__(self):
        if self.mode not in ("by_model", "by_requirements"):
            raise SelectionError(f"unknown mode {self.mode!r}")
        if self.kind not in ("online", "offline"):
            raise SelectionError(f"unknown kind {self.kind!r}")
        if self.mode == "by_model" and not self.model_name:
            raise SelectionError("by_model query needs model_name")
        if self.mode == "by_requirements" and (self.latency_slo_ms is None or self.min_accuracy is None):
            raise SelectionError("by_requirements query needs latency_slo_ms and min_accuracy")
        if self.batch < 1:
            raise SelectionError("batch must be >= 1")


@dataclass(frozen=True)
class Placement:
    variant_id: str
    worker_id: str
    needs_load: bool
    estimated_latency_ms: float


@dataclass(frozen=True)
class MigrationPlan:
    instance: tuple[str, str, int]
    kind: str  # "intra" or "remote"
    target_worker: str


def has_headroom(rec: InstanceRecord, profile: VariantProfile) -> bool:
    return rec.current_qps < profile.saturation_qps


def _serves_batch(v: VariantProfile, batch: int) -> bool:
    return batch <= v.max_batch and batch in v.inf_latency_ms


def _active_placement(
    store: MetadataStore,
    variants: list[VariantProfile],
    ok: Callable[[VariantProfile], bool],
    batch: int,
) -> Placement | None:
    """Cheapest Active variant (cost_rate, variant_id) that passes ``ok`` and
    has an instance with headroom; placed on the least-loaded worker running it."""
    best = None
    for v in variants:
        if not store.variant_has_state(v.variant_id, (State.ACTIVE,)):
            continue
        if not _serves_batch(v, batch) or not ok(v):
            continue
        workers = sorted({r.worker_id for r in store.instances_of(v.variant_id, (State.ACTIVE,))
                          if has_headroom(r, v)})
        if not workers:
            continue
        key = (v.cost_rate, v.variant_id)
        if best is None or key < best[0]:
            best = (key, v, workers)
    if best is None:
        return None
    _, v, workers = best
    wid = store.least_loaded_worker(workers, v.hardware)
    return Placement(v.variant_id, wid, False, v.latency_at(batch))


def capable_workers(store: MetadataStore, v: VariantProfile) -> list[str]:
    return sorted(wid for wid, w in store.workers.items() if w.has_hardware(v.hardware))


def _inactive_placement(store: MetadataStore, v: VariantProfile, batch: int) -> Placement:
    capable = capable_workers(store, v)
    fits = [wid for wid in capable if store.workers[wid].fits(v.resources)]
    if not fits:
        raise Unplaceable(v.variant_id, v.hardware)
    wid = store.least_loaded_worker(fits, v.hardware)
    return Placement(v.variant_id, wid, True, v.latency_at(batch) + v.load_latency_ms)


def closest_suggestion(variants: list[VariantProfile], min_accuracy: float) -> str | None:
    """Min-latency variant among those meeting accuracy, else the most
    accurate one."""
    if not variants:
        return None
    meeting = [v for v in variants if v.accuracy >= min_accuracy]
    if meeting:
        return min(meeting, key=lambda v: (v.latency_ms, v.variant_id)).variant_id
    return min(variants, key=lambda v: (-v.accuracy, v.latency_ms, v.variant_id)).variant_id


def get_variant_for_query(q: QueryRequest, store: MetadataStore) -> Placement:
    if q.mode == "by_model":
        return by_model_dispatch(q, store)
    try:
        variants = store.app_variants(q.app_id)
    except StoreError as e:
        raise SelectionError(str(e)) from None
    slo, acc, b = q.latency_slo_ms, q.min_accuracy, q.batch

    if q.kind == "offline":
        # Latency tolerant: cheapest variant meeting accuracy.
        feasible = sorted((v for v in variants if v.accuracy >= acc and _serves_batch(v, b)),
                          key=lambda v: (v.cost_rate, v.variant_id))
        if not feasible:
            raise NoFeasibleVariant(closest_suggestion(variants, acc), "accuracy")
        return _first_placeable(store, feasible, b)

    active = _active_placement(store, variants, lambda v: v.accuracy >= acc and v.latency_at(b) <= slo, b)
    if active is not None:
        return active

    cands = store.candidates_by_requirements(q.app_id, acc, slo, {State.INACTIVE})
    feasible = []
    for vid, _ in cands:
        v = store.variants[vid]
        if _serves_batch(v, b) and v.latency_at(b) + v.load_latency_ms <= slo:
            feasible.append(v)
    feasible.sort(key=lambda v: (v.latency_at(b) + v.load_latency_ms, v.variant_id))
    if not feasible:
        raise NoFeasibleVariant(closest_suggestion(variants, acc), "latency/accuracy")
    return _first_placeable(store, feasible, b)


def _first_placeable(store: MetadataStore, ordered: list[VariantProfile], batch: int) -> Placement:
    """Place the first variant in order; Unplaceable refers to the first choice
    when none of them fits anywhere."""
    first_err = None
    for v in ordered:
        try:
            return _inactive_placement(store, v, batch)
        except Unplaceable as e:
            first_err = first_err or e
    raise first_err


def by_model_dispatch(q: QueryRequest, store: MetadataStore) -> Placement:
    try:
        variants = store.model_variants(q.model_name)
    except StoreError as e:
        raise SelectionError(str(e)) from None
    b = q.batch
    active = _active_placement(store, variants, lambda v: True, b)
    if active is not None:
        return active
    ordered = sorted((v for v in variants if _serves_batch(v, b)),
                     key=lambda v: (v.latency_at(b) + v.load_latency_ms, v.variant_id))
    if not ordered:
        raise NoFeasibleVariant(None, f"no variant of {q.model_name} serves batch {b}")
    return _first_placeable(store, ordered, b)


def mitigate(record: InstanceRecord, store: MetadataStore) -> MigrationPlan:
    """Move an Interfered instance to free resources, preferring its own worker."""
    if record.state != State.INTERFERED:
        raise SelectionError("mitigation applies to Interfered instances only")
    v = store.variants[record.variant_id]
    local = store.workers[record.worker_id]
    if local.fits(v.resources):
        return MigrationPlan(record.key, "intra", record.worker_id)
    others = [wid for wid in capable_workers(store, v)
              if wid != record.worker_id and store.workers[wid].fits(v.resources)]
    try:
        target = store.least_loaded_worker(others, v.hardware)
    except NoWorker:
        raise Escalate(f"no capable worker for {v.variant_id} ({v.hardware})") from None
    return MigrationPlan(record.key, "remote", target)


__all__ = [
    "QueryRequest",
    "Placement",
    "MigrationPlan",
    "NoFeasibleVariant",
    "Unplaceable",
    "Escalate",
    "SelectionError",
    "get_variant_for_query",
    "by_model_dispatch",
    "mitigate",
    "closest_suggestion",
    "has_headroom",
]
