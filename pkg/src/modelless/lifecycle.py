"""Variant-instance lifecycle and the monitoring daemon's classification."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .catalog import VariantProfile
from .store import (
    EDGES,
    LOADED_STATES,
    IllegalTransition,
    InstanceRecord,
    MetadataStore,
    State,
    WorkerState,
)

INTERFERENCE_FACTOR = 1.2
MONITOR_PERIOD_S = 2.0

EVENTS = ("load_complete", "unload", "monitor", "mitigated")


class LifecycleError(Exception):
    pass


@dataclass(frozen=True)
class MonitorSample:
    key: tuple[str, str, int]
    window_qps: float
    window_avg_latency_ms: float
    util: dict[str, float] = field(default_factory=dict)
    batch: int = 1

    def __post_init__(self):
        if self.window_qps < 0 or self.window_avg_latency_ms < 0:
            raise LifecycleError("window_qps and latency must be >= 0")


def classify(
    sample: MonitorSample,
    profile: VariantProfile,
    interference_factor: float = INTERFERENCE_FACTOR,
    state: State = State.ACTIVE,
) -> State:
    """Overloaded at or above saturation, else Interfered when the observed
    inference latency exceeds the profiled latency by the factor, else Active."""
    if state == State.INACTIVE:
        raise LifecycleError("cannot classify an Inactive instance")
    if sample.window_qps >= profile.saturation_qps:
        return State.OVERLOADED
    if sample.window_avg_latency_ms > interference_factor * profile.latency_at(sample.batch):
        return State.INTERFERED
    return State.ACTIVE


def transition(
    record: InstanceRecord,
    event: str,
    target: State | None = None,
    now: float = 0.0,
) -> InstanceRecord:
    if event not in EVENTS:
        raise LifecycleError(f"unknown event {event!r}")
    src = record.state
    if event == "load_complete":
        dst = State.ACTIVE
    elif event == "unload":
        dst = State.INACTIVE
    elif event == "mitigated":
        dst = State.ACTIVE
    else:
        if target is None:
            raise LifecycleError("monitor event needs a target state")
        dst = State(target)
    if (src, dst) not in EDGES[event]:
        raise IllegalTransition(src, dst, event)
    if src == dst:
        return record
    if dst == State.INACTIVE:
        return replace(record, state=dst, current_qps=0.0, since=now)
    return replace(record, state=dst, since=now)


@dataclass
class MonitorReport:
    worker_id: str
    time: float
    util: dict[str, float]
    updates: list[tuple[tuple[str, str, int], State, State]]


def monitor_tick(
    worker: WorkerState,
    store: MetadataStore,
    samples: dict[tuple[str, str, int], MonitorSample],
    now: float,
    interference_factor: float = INTERFERENCE_FACTOR,
    window_s: float = MONITOR_PERIOD_S,
    util: dict[str, float] | None = None,
) -> MonitorReport:
    """Classify every loaded instance on ``worker`` and push state changes.

    An instance leaves Overloaded or Interfered only after it has spent at
    least one full window in that state and the latest window is healthy.
    """
    if util is not None:
        worker.util.update(util)
    updates = []
    for key in list(worker.running):
        rec = store.instances[key]
        if rec.state not in LOADED_STATES:
            continue
        sample = samples.get(key) or MonitorSample(key, 0.0, 0.0)
        profile = store.variants[rec.variant_id]
        new = classify(sample, profile, interference_factor, rec.state)
        if new == State.OVERLOADED and rec.state == State.INTERFERED:
            pass
        elif new == State.INTERFERED and rec.state == State.OVERLOADED:
            # No direct edge; recover to Active first.
            new = State.ACTIVE if now - rec.since >= window_s else rec.state
        elif new == State.ACTIVE and rec.state != State.ACTIVE and now - rec.since < window_s:
            new = rec.state
        rec = replace(rec, current_qps=sample.window_qps)
        if sample.window_avg_latency_ms > 0:
            rec = rec.observe_latency(sample.window_avg_latency_ms)
        if new != rec.state:
            updates.append((key, rec.state, new))
            rec = transition(rec, "monitor", new, now)
        store.update_instance(rec)
    return MonitorReport(worker.worker_id, now, dict(worker.util), updates)
