"""Deterministic discrete-event simulation of a model-less serving cluster.

Times are simulated seconds. Each instance is a single FIFO server: a query
occupies it for ``multiplier / saturation_qps`` seconds and completes
``latency_at(batch) * multiplier`` after it starts, so pipelined variants
overlap consecutive queries.
"""

from __future__ import annotations

import heapq
import io
import json
import math
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable

from . import lifecycle
from .autoscale_model import (
    NeedsVMScaling,
    ScaleDownGate,
    ScalingError,
    ScalingProblem,
    greedy_scale_down,
    greedy_scale_up,
    solve_ilp,
)
from .autoscale_vm import (
    ClusterView,
    NoCapacity,
    PendingWorker,
    ScalingEvent,
    make_worker,
    place_instance,
    vm_scale_decision,
)
from .catalog import DOMINANT_RESOURCE, HARDWARE, RESOURCE_TYPES, Catalog, VariantProfile
from .config import ScenarioConfig, build_catalog, build_trace
from .selection import (
    Escalate,
    NoFeasibleVariant,
    QueryRequest,
    Unplaceable,
    get_variant_for_query,
    mitigate,
)
from .store import LOADED_STATES, InstanceRecord, MetadataStore, State
from .workload import ArrivalTrace

EVENT_KINDS = (
    "query_arrival",
    "query_complete",
    "load_complete",
    "monitor_tick",
    "model_autoscale_tick",
    "vm_autoscale_tick",
    "worker_ready",
    "offline_chunk",
    "plan_execute",
    "metrics_tick",
)
METRICS_COLUMNS = (
    "time_s", "arrived", "served", "violations", "violation_ratio", "cost_cumulative",
    "util_cpu", "util_gpu", "util_accel", "active_workers",
    "rejected", "in_flight", "served_cpu", "served_gpu", "served_accel", "offline_processed",
)
BIN_S = 1.0
EPS = 1e-9


class SimulationError(Exception):
    pass


@dataclass(order=True)
class Event:
    time: float
    seq: int
    kind: str = field(compare=False)
    payload: dict = field(compare=False, default_factory=dict)


@dataclass
class Scenario:
    config: ScenarioConfig
    catalog: Catalog
    trace: ArrivalTrace

    @classmethod
    def from_config(cls, cfg: ScenarioConfig) -> "Scenario":
        cfg.validate()
        return cls(cfg, build_catalog(cfg), build_trace(cfg))

    def validate(self) -> None:
        self.config.validate()
        if len(self.catalog) == 0:
            raise SimulationError("catalog is empty")
        archs = self.catalog.archs
        for a in self.config.apps:
            if a.arch_id not in archs:
                raise SimulationError(f"app {a.app_id!r} uses unknown arch {a.arch_id!r}")
        apps = {a.app_id for a in self.config.apps}
        for t, q in self.trace.arrivals:
            if t > self.config.horizon_s * 1000.0 + EPS:
                raise SimulationError("workload extends past the horizon")
            if q.app_id not in apps:
                raise SimulationError(f"arrival references unknown app {q.app_id!r}")


@dataclass
class OfflineJob:
    job_id: str
    app_id: str
    total_inputs: int
    chunk_size: int = 10
    processed: int = 0
    state: str = "running"  # running | paused | done
    submit_s: float = 0.0
    inst: "_Inst | None" = None
    chunk_active: bool = False

    def __post_init__(self):
        if self.processed > self.total_inputs:
            raise SimulationError("processed exceeds total_inputs")


@dataclass
class _Query:
    qid: int
    req: QueryRequest
    arrival: float


@dataclass
class _Inst:
    key: tuple[str, str, int]
    variant: VariantProfile
    app_id: str
    worker_id: str
    created: float
    ready_at: float
    loaded: bool = False
    draining: bool = False
    offline: bool = False
    free_at: float = 0.0
    multiplier: float = 1.0
    isolated: bool = False
    waiting: list = field(default_factory=list)
    dispatches: deque = field(default_factory=deque)
    win_count: int = 0
    win_lat_sum: float = 0.0
    win_lat_n: int = 0
    last_window_lat: float = 0.0
    on_ready: list = field(default_factory=list)


@dataclass
class SimResult:
    rows: list[dict]
    plan_log: list[dict]
    scaling_log: list[ScalingEvent]
    throttle_log: list[dict]
    summary: dict
    offline: list[OfflineJob]

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.rows)

    def plan_log_text(self) -> str:
        return "".join(json.dumps(p, sort_keys=True) + "\n" for p in self.plan_log)

    def scaling_log_text(self) -> str:
        return "".join(e.to_log() + "\n" for e in self.scaling_log)

    def throttle_log_text(self) -> str:
        return "".join(json.dumps(t, sort_keys=True) + "\n" for t in self.throttle_log)


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def metrics_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(METRICS_COLUMNS) + "\n")
    for r in rows:
        buf.write(",".join(_fmt(r[c]) for c in METRICS_COLUMNS) + "\n")
    return buf.getvalue()


def pinned_variant(mode: str, variants: list[VariantProfile]) -> tuple[VariantProfile, int]:
    """Variant and instance count a baseline policy pins at build time."""
    def pick(pool, what):
        if not pool:
            raise SimulationError(f"{mode}: catalog has no {what} variant")
        return min(pool, key=lambda v: (v.cost_rate, v.latency_ms, v.variant_id))

    if mode == "static_cpu":
        return pick([v for v in variants if v.hardware == "CPU" and v.max_batch == 1], "CPU batch-1"), 2
    if mode == "static_gpu":
        pool = [v for v in variants if v.hardware == "GPU" and v.max_batch == 8]
        opt = [v for v in pool if v.optimizer == "graph_optimized"]
        return pick(opt or pool, "GPU batch-8"), 1
    if mode == "horizontal_only":
        return pick([v for v in variants if v.hardware == "GPU" and v.max_batch == 1], "GPU batch-1"), 1
    raise SimulationError(f"no pinned variant for policy {mode!r}")


def throttle_decision(util: float, online: list[tuple[float, float]],
                      threshold: float = 0.4) -> tuple[bool, bool]:
    """Pause offline work when util exceeds ``threshold`` or any online
    instance's observed latency exceeds its profiled latency.

    ``online`` holds (observed_ms, profiled_ms) pairs; 0 observed means no
    sample. Returns (pause, latency_high).
    """
    slow = any(obs > prof * (1 + 1e-9) for obs, prof in online)
    return util > threshold or slow, slow


class Simulator:
    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.sc = scenario
        self.cfg = cfg = scenario.config
        self.th = cfg.thresholds
        self.now = 0.0
        self._heap: list[Event] = []
        self._seq = 0
        self.store = MetadataStore()
        self.apps = {a.app_id: a for a in cfg.apps}
        self.arch_apps: dict[str, list[str]] = defaultdict(list)
        for a in cfg.apps:
            self.arch_apps[a.arch_id].append(a.app_id)
        for app in cfg.apps:
            arch = scenario.catalog.arch(app.arch_id)
            self.store.register_model(arch, scenario.catalog.variants_of(app.arch_id), app.app_id)

        self.insts: dict[tuple, _Inst] = {}
        self._replica = Counter()
        self._worker_seq = Counter()
        self.pending_workers: list[PendingWorker] = []
        self.idle_since: dict[str, float] = {}
        self.min_workers = dict(cfg.fleet)
        self.gate = ScaleDownGate()
        self.pinned: dict[str, str] = {}

        # busy resource-seconds per worker, per 1 s bin: [online, offline]
        self._busy: dict[str, list[dict[int, dict[str, float]]]] = {}
        self.arch_dispatch: dict[str, deque] = defaultdict(deque)
        self.var_dispatch: dict[str, deque] = defaultdict(deque)

        self.closed_cost = 0.0
        self.tot = Counter()
        self.win = Counter()
        self.in_flight = 0
        self.plan_log: list[dict] = []
        self.scaling_log: list[ScalingEvent] = []
        self.throttle_log: list[dict] = []
        self.rows: list[dict] = []
        self.offline_jobs: list[OfflineJob] = []
        self._qid = 0

        for hw in HARDWARE:
            for _ in range(cfg.fleet.get(hw, 0)):
                self._add_worker(hw, 0.0)

    # -- plumbing --------------------------------------------------------

    def push(self, t: float, kind: str, **payload) -> None:
        if kind not in EVENT_KINDS:
            raise SimulationError(f"unknown event kind {kind!r}")
        if t < self.now - EPS:
            raise SimulationError("event scheduled in the past")
        self._seq += 1
        heapq.heappush(self._heap, Event(t, self._seq, kind, payload))

    def _new_worker_id(self, hw: str) -> str:
        self._worker_seq[hw] += 1
        return f"{hw.lower()}-{self._worker_seq[hw]}"

    def _add_worker(self, hw: str, t: float, wid: str | None = None) -> str:
        wid = wid or self._new_worker_id(hw)
        total = self.cfg.worker_templates.get(hw)
        self.store.add_worker(make_worker(wid, hw, t, dict(total) if total else None))
        self._busy[wid] = [defaultdict(lambda: defaultdict(float)), defaultdict(lambda: defaultdict(float))]
        return wid

    def _add_busy(self, wid: str, a: float, b: float, demand: dict[str, float], offline: bool) -> None:
        bins = self._busy[wid][1 if offline else 0]
        i = int(math.floor(a / BIN_S))
        while i * BIN_S < b - EPS:
            lo, hi = max(a, i * BIN_S), min(b, (i + 1) * BIN_S)
            if hi > lo:
                for t, amt in demand.items():
                    bins[i][t] += amt * (hi - lo)
            i += 1

    def _util(self, wid: str, t0: float, t1: float, which: str = "all") -> dict[str, float]:
        w = self.store.workers[wid]
        parts = {"online": [0], "offline": [1], "all": [0, 1]}[which]
        out = {t: 0.0 for t in RESOURCE_TYPES}
        if t1 <= t0:
            return out
        i0, i1 = int(math.floor(t0 / BIN_S)), int(math.ceil(t1 / BIN_S))
        for p in parts:
            bins = self._busy[wid][p]
            for i in range(i0, i1):
                if i not in bins:
                    continue
                lo, hi = max(t0, i * BIN_S), min(t1, (i + 1) * BIN_S)
                frac = (hi - lo) / BIN_S
                for t, v in bins[i].items():
                    out[t] += v * frac
        span = t1 - t0
        return {t: (out[t] / (w.total[t] * span) if w.total[t] > 0 else 0.0) for t in RESOURCE_TYPES}

    def cost_at(self, t: float) -> float:
        open_cost = sum(i.variant.cost_rate * (t - i.created) for i in self.insts.values())
        open_cost += sum(j.inst.variant.cost_rate * (t - j.inst.created)
                         for j in self.offline_jobs if j.inst is not None)
        return self.closed_cost + open_cost

    def _prune(self, dq: deque, window: float) -> int:
        while dq and dq[0] <= self.now - window + EPS:
            dq.popleft()
        return len(dq)

    # -- instances -------------------------------------------------------

    def _start_load(self, v: VariantProfile, wid: str, app_id: str, ready: bool = False,
                    offline: bool = False) -> _Inst:
        self._replica[(v.variant_id, wid)] += 1
        key = (v.variant_id, wid, self._replica[(v.variant_id, wid)])
        self.store.reserve(wid, v.resources)
        ready_at = self.now if ready else self.now + v.load_latency_ms / 1000.0
        inst = _Inst(key, v, app_id, wid, self.now, ready_at, offline=offline)
        if offline:
            # Held outside the store's selection view.
            self.push(ready_at, "load_complete", key=key, offline=True)
            return inst
        self.store.add_instance(InstanceRecord(v.variant_id, wid, app_id, since=self.now, replica=key[2]))
        self.insts[key] = inst
        if ready:
            self._loaded(inst)
        else:
            self.push(ready_at, "load_complete", key=key)
        return inst

    def _loaded(self, inst: _Inst) -> None:
        rec = lifecycle.transition(self.store.instances[inst.key], "load_complete", now=self.now)
        self.store.update_instance(rec)
        inst.loaded = True
        inst.free_at = max(inst.free_at, self.now)
        waiting, inst.waiting = inst.waiting, []
        for q in waiting:
            self._serve(inst, q)
        callbacks, inst.on_ready = inst.on_ready, []
        for cb in callbacks:
            cb()

    def _unload(self, inst: _Inst) -> None:
        if inst.draining:
            return
        if not inst.loaded:
            raise SimulationError("cannot unload an instance that is still loading")
        rec = lifecycle.transition(self.store.instances[inst.key], "unload", now=self.now)
        self.store.update_instance(rec)
        inst.draining = True
        self.push(max(self.now, inst.free_at), "plan_execute", op="release", key=inst.key)

    def _release(self, key) -> None:
        inst = self.insts.pop(key)
        self.store.release(inst.worker_id, inst.variant.resources)
        self.store.drop_instance(key)
        self.closed_cost += inst.variant.cost_rate * (self.now - inst.created)

    def _live(self, arch: str | None = None, app: str | None = None) -> list[_Inst]:
        out = []
        for k in sorted(self.insts):
            i = self.insts[k]
            if i.draining:
                continue
            if arch is not None and i.variant.arch_id != arch:
                continue
            if app is not None and i.app_id != app:
                continue
            out.append(i)
        return out

    # -- queries ---------------------------------------------------------

    def _contention(self, wid: str) -> float:
        if self.cfg.offline_contention <= 1.0:
            return 1.0
        for j in self.offline_jobs:
            if j.inst is not None and j.chunk_active and j.inst.worker_id == wid:
                return self.cfg.offline_contention
        return 1.0

    def _note_dispatch(self, inst: _Inst) -> None:
        for dq in (inst.dispatches, self.arch_dispatch[inst.variant.arch_id], self.var_dispatch[inst.variant.variant_id]):
            dq.append(self.now)
        n = self._prune(inst.dispatches, 1.0)
        self.store.set_load(inst.key, float(n))
        inst.win_count += 1

    def _serve(self, inst: _Inst, q: _Query) -> None:
        if not inst.loaded or inst.draining:
            raise SimulationError("dispatch to an instance that is not loaded")
        v = inst.variant
        mult = inst.multiplier * self._contention(inst.worker_id)
        start = max(self.now, inst.free_at)
        occ = mult / v.saturation_qps
        inst.free_at = start + occ
        inf_ms = v.latency_at(q.req.batch) * mult
        self._add_busy(inst.worker_id, start, start + occ, v.resources, False)
        self.push(start + inf_ms / 1000.0, "query_complete", qid=q.qid, key=inst.key, arrival=q.arrival,
                  slo=q.req.latency_slo_ms, inf_ms=inf_ms, hw=v.hardware)

    def _assign(self, inst: _Inst, q: _Query) -> None:
        self._note_dispatch(inst)
        if inst.loaded:
            self._serve(inst, q)
        else:
            inst.waiting.append(q)

    def _pick_replica(self, vid: str, wid: str) -> _Inst | None:
        best = None
        for i in self._live():
            if i.variant.variant_id != vid or i.worker_id != wid or not i.loaded:
                continue
            rec = self.store.instances[i.key]
            if rec.state != State.ACTIVE or rec.current_qps >= i.variant.saturation_qps:
                continue
            k = (i.free_at, i.key)
            if best is None or k < best[0]:
                best = (k, i)
        return best[1] if best else None

    def _backlog(self, i: _Inst) -> float:
        return max(i.free_at, i.ready_at, self.now) - self.now

    def _fallback(self, q: _Query) -> _Inst | None:
        acc = q.req.min_accuracy or 0.0
        pool = [i for i in self._live(app=q.req.app_id) if i.variant.accuracy >= acc]
        if not pool:
            return None
        return min(pool, key=lambda i: (self._backlog(i), i.key))

    def _arrival(self, req: QueryRequest) -> None:
        self._qid += 1
        q = _Query(self._qid, req, self.now)
        self.tot["arrived"] += 1
        self.win["arrived"] += 1
        inst = self._route(q)
        if inst is None:
            self.tot["rejected"] += 1
            self.win["rejected"] += 1
            return
        self.in_flight += 1
        self._assign(inst, q)

    def _route(self, q: _Query) -> _Inst | None:
        if self.cfg.policy != "modelless":
            vid = self.pinned[q.req.app_id]
            pool = [i for i in self._live(app=q.req.app_id) if i.variant.variant_id == vid]
            if not pool:
                return None
            return min(pool, key=lambda i: (self._backlog(i), i.key))
        try:
            p = get_variant_for_query(q.req, self.store)
        except (NoFeasibleVariant, Unplaceable) as e:
            inst = self._fallback(q)
            if inst is not None:
                return inst
            if isinstance(e, NoFeasibleVariant) and e.suggestion:
                v = self.store.variants[e.suggestion]
                try:
                    wid = place_instance(self.store, v.hardware, v.resources)
                except NoCapacity:
                    return None
                return self._start_load(v, wid, q.req.app_id)
            return None
        if not p.needs_load:
            inst = self._pick_replica(p.variant_id, p.worker_id)
            if inst is not None:
                return inst
            return self._fallback(q)
        loading = [i for i in self._live(app=q.req.app_id)
                   if i.variant.variant_id == p.variant_id and not i.loaded]
        if loading:
            return min(loading, key=lambda i: (len(i.waiting), i.key))
        return self._start_load(self.store.variants[p.variant_id], p.worker_id, q.req.app_id)

    def _complete(self, ev: Event) -> None:
        pl = ev.payload
        self.in_flight -= 1
        lat_ms = (self.now - pl["arrival"]) * 1000.0
        late = pl["slo"] is not None and lat_ms > pl["slo"] + 1e-6
        for c in (self.tot, self.win):
            c["served"] += 1
            c["served_" + pl["hw"].lower()] += 1
            if late:
                c["violations"] += 1
        inst = self.insts.get(pl["key"])
        if inst is not None:
            inst.win_lat_sum += pl["inf_ms"]
            inst.win_lat_n += 1

    # -- periodic ticks ----------------------------------------------------

    def _monitor(self) -> None:
        period = self.th.monitor_period_s
        t0 = self.now - period
        for wid in sorted(self.store.workers):
            w = self.store.workers[wid]
            samples = {}
            for key in w.running:
                inst = self.insts.get(key)
                rec = self.store.instances[key]
                if inst is None or rec.state not in LOADED_STATES:
                    continue
                avg = inst.win_lat_sum / inst.win_lat_n if inst.win_lat_n else 0.0
                samples[key] = lifecycle.MonitorSample(key, inst.win_count / period, avg)
                inst.last_window_lat = avg
                inst.win_count, inst.win_lat_sum, inst.win_lat_n = 0, 0.0, 0
            report = lifecycle.monitor_tick(w, self.store, samples, self.now, self.th.interference_factor,
                                            period, util=self._util(wid, t0, self.now))
            for key, _, new in report.updates:
                if new == State.INTERFERED and self.cfg.policy == "modelless":
                    self._mitigate(key)
        self._throttle()

    def _mitigate(self, key) -> None:
        inst = self.insts[key]
        rec = self.store.instances[key]
        try:
            plan = mitigate(rec, self.store)
        except Escalate as e:
            self.plan_log.append({"time_s": round(self.now, 6), "trigger": "mitigate", "result": "escalate",
                                  "instance": list(key), "detail": str(e)})
            return
        if plan.kind == "intra":
            inst.isolated = True
            inst.multiplier = 1.0
            self.store.update_instance(lifecycle.transition(rec, "mitigated", now=self.now))
        else:
            new = self._start_load(inst.variant, plan.target_worker, inst.app_id)
            new.on_ready.append(lambda: self._unload(inst) if not inst.draining else None)
        self.plan_log.append({"time_s": round(self.now, 6), "trigger": "mitigate", "result": plan.kind,
                              "instance": list(key), "target": plan.target_worker})

    def _refresh_loads(self) -> None:
        for i in self._live():
            if i.loaded:
                self.store.set_load(i.key, float(self._prune(i.dispatches, 1.0)))

    def _inject_interference(self) -> None:
        ic = self.cfg.interference
        if not ic.enabled:
            return
        for wid in sorted(self.store.workers):
            gpu = [i for i in self._live() if i.worker_id == wid and i.loaded and i.variant.hardware == "GPU"]
            for i in gpu:
                i.multiplier = 1.0
            exposed = [i for i in gpu if not i.isolated]
            if len(gpu) < 2 or not exposed:
                continue
            qps = sum(self.store.instances[i.key].current_qps for i in gpu)
            sat = sum(i.variant.saturation_qps for i in gpu)
            if qps <= ic.qps_fraction * sat:
                continue
            biggest = max(i.variant.resources.get("gpu_mem_gb", 0.0) for i in gpu)
            for i in exposed:
                if i.variant.resources.get("gpu_mem_gb", 0.0) < biggest:
                    i.multiplier = ic.multiplier

    def _arch_problem(self, arch: str, vertical: bool) -> tuple[ScalingProblem, list[_Inst]] | None:
        apps = [self.apps[a] for a in self.arch_apps[arch]]
        slo = min(a.slo_ms for a in apps)
        acc = max(a.min_accuracy for a in apps)
        live = self._live(arch=arch)
        if vertical:
            vs = [v for v in self.sc.catalog.variants_of(arch) if v.accuracy >= acc and 1 in v.inf_latency_ms]
        else:
            pins = {self.pinned[a.app_id] for a in apps}
            vs = [self.store.variants[p] for p in sorted(pins)]
        ids = {v.variant_id for v in vs}
        live = [i for i in live if i.variant.variant_id in ids]
        running = Counter(i.variant.variant_id for i in live)
        period = self.th.model_period_s
        load = self._prune(self.arch_dispatch[arch], period) / period
        served = {vid: self._prune(self.var_dispatch[vid], period) / period for vid in sorted(running)}
        cap = {t: 0.0 for t in RESOURCE_TYPES}
        for w in self.store.workers.values():
            for t in RESOURCE_TYPES:
                cap[t] += w.total[t] - w.used[t]
        for i in live:
            for t, amt in i.variant.resources.items():
                cap[t] += amt
        problem = ScalingProblem(vs, dict(running), load, slo, cap, self.th.lam, served=served)
        return problem, live

    def _model_autoscale(self) -> None:
        self._refresh_loads()
        self._inject_interference()
        if not self.cfg.model_autoscale or self.cfg.policy not in ("modelless", "horizontal_only"):
            return
        vertical = self.cfg.policy == "modelless"
        for arch in sorted(self.arch_apps):
            problem, live = self._arch_problem(arch, vertical)
            pivot = problem.pivot()
            home_free = self.store.workers[next(i.worker_id for i in live if i.variant == pivot)].free() \
                if pivot is not None else None
            try:
                up = greedy_scale_up(problem, self.th.slack_threshold, worker_free=home_free, vertical=vertical)
            except NeedsVMScaling as e:
                self._log_plan(arch, None, "needs_vm", str(e))
                continue
            if not up.empty:
                self.gate.cancel(arch)
                self._execute(arch, up, problem, live)
                continue
            if any(not i.loaded for i in live):
                continue
            down = greedy_scale_down(problem, self.th.slack_threshold, self.now, min_instances=1,
                                     vertical=vertical, period_s=self.th.model_period_s)
            due = self.gate.offer(arch, down, problem.load_qps, self.now)
            if due is not None:
                self._execute(arch, due, problem, live)

    def _log_plan(self, arch, plan, trigger, detail="", placed=None) -> None:
        entry = {"time_s": round(self.now, 6), "arch": arch, "trigger": trigger}
        if plan is not None:
            entry.update(plan.to_log())
            entry["trigger"] = trigger
        if detail:
            entry["detail"] = detail
        if placed is not None:
            entry["placed"] = placed
        self.plan_log.append(entry)

    def _execute(self, arch: str, plan, problem: ScalingProblem, live: list[_Inst]) -> None:
        app_id = self.arch_apps[arch][0]
        new: list[_Inst] = []
        placed = 0
        for vid in sorted(plan.actions):
            d = plan.actions[vid]
            v = problem.by_id(vid)
            for _ in range(max(d, 0)):
                try:
                    wid = place_instance(self.store, v.hardware, v.resources)
                except NoCapacity:
                    break
                new.append(self._start_load(v, wid, app_id))
                placed += 1
        removals = []
        for vid in sorted(plan.actions):
            d = plan.actions[vid]
            if d < 0:
                pool = sorted((i for i in live if i.variant.variant_id == vid and i.loaded and not i.draining),
                              key=lambda i: (-i.created, i.key))
                removals.extend(pool[:-d])
        self._log_plan(arch, plan, plan.trigger, placed=placed)
        if not removals:
            return
        loading = [i for i in new if not i.loaded]
        if not loading:
            for i in removals:
                self._unload(i)
            return
        # Swap: drop the old instances once every new one is ready.
        remaining = {"n": len(loading)}

        def done():
            remaining["n"] -= 1
            if remaining["n"] == 0:
                for i in removals:
                    if not i.draining:
                        self._unload(i)

        for i in loading:
            i.on_ready.append(done)

    def _vm_autoscale(self) -> None:
        if not self.cfg.vm_autoscale or self.cfg.policy not in ("modelless", "horizontal_only"):
            return
        view = ClusterView.from_store(self.store, self.pending_workers, self.idle_since)
        for w in view.workers:
            if view.is_idle(w):
                self.idle_since.setdefault(w.worker_id, self.now)
            else:
                self.idle_since.pop(w.worker_id, None)
        view.idle_since = dict(self.idle_since)
        th = self.th
        for a in vm_scale_decision(view, self.now, th.vm_util_threshold, th.overload_fraction,
                                   th.startup_s, th.idle_window_s, self.min_workers):
            if a.kind == "add":
                wid = self._new_worker_id(a.hardware)
                self.pending_workers.append(PendingWorker(wid, a.hardware, a.ready_at))
                self.push(a.ready_at, "worker_ready", worker_id=wid, hardware=a.hardware)
                self.scaling_log.append(ScalingEvent(self.now, a.rule, "add", a.hardware, wid))
            else:
                self.store.remove_worker(a.worker_id)
                self.idle_since.pop(a.worker_id, None)
                self.scaling_log.append(ScalingEvent(self.now, a.rule, "remove", a.hardware, a.worker_id))

    # -- offline -----------------------------------------------------------

    def _offline_submit(self, job: OfflineJob) -> None:
        app = self.apps[job.app_id]
        req = QueryRequest(job.app_id, latency_slo_ms=app.slo_ms, min_accuracy=app.min_accuracy, kind="offline")
        try:
            p = get_variant_for_query(req, self.store)
        except (NoFeasibleVariant, Unplaceable):
            return
        job.inst = self._start_load(self.store.variants[p.variant_id], p.worker_id, job.app_id, offline=True)

    def _offline_next_chunk(self, job: OfflineJob) -> None:
        inst = job.inst
        if job.state != "running" or job.chunk_active or inst is None or not inst.loaded:
            return
        n = min(job.chunk_size, job.total_inputs - job.processed)
        dur = n / inst.variant.saturation_qps
        job.chunk_active = True
        self._add_busy(inst.worker_id, self.now, self.now + dur, inst.variant.resources, True)
        self.push(self.now + dur, "offline_chunk", job=job.job_id, n=n)

    def _offline_chunk_done(self, job: OfflineJob, n: int) -> None:
        job.chunk_active = False
        job.processed += n
        self.tot["offline_processed"] += n
        if job.processed >= job.total_inputs:
            job.state = "done"
            inst = job.inst
            self.store.release(inst.worker_id, inst.variant.resources)
            self.closed_cost += inst.variant.cost_rate * (self.now - inst.created)
            job.inst = None
            return
        self._offline_next_chunk(job)

    def _throttle(self) -> None:
        period = self.th.monitor_period_s
        for job in self.offline_jobs:
            if job.state == "done":
                continue
            if job.inst is None:
                if self.now >= job.submit_s:
                    self._offline_submit(job)
                continue
            wid = job.inst.worker_id
            dom = DOMINANT_RESOURCE[job.inst.variant.hardware]
            util = self._util(wid, self.now - period, self.now, "online")[dom]
            online = [(i.last_window_lat, i.variant.latency_ms)
                      for i in self._live() if i.worker_id == wid and i.loaded]
            pause, slow = throttle_decision(util, online, self.th.offline_util_threshold)
            job.state = "paused" if pause else "running"
            self.throttle_log.append({"time_s": round(self.now, 6), "worker": wid, "job": job.job_id,
                                      "util": round(util, 6), "latency_high": slow,
                                      "decision": job.state})
            if not pause:
                self._offline_next_chunk(job)

    # -- metrics -----------------------------------------------------------

    def _metrics(self) -> None:
        iv = self.th.metrics_interval_s
        t0 = self.now - iv
        utils = {}
        for hw in HARDWARE:
            ws = [wid for wid in sorted(self.store.workers) if self.store.workers[wid].kind == hw]
            dom = DOMINANT_RESOURCE[hw]
            vals = [self._util(wid, max(t0, self.store.workers[wid].start_time), self.now)[dom] for wid in ws]
            utils[hw] = sum(vals) / len(vals) if vals else 0.0
        w = self.win
        denom = w["served"] + w["rejected"]
        viol = w["violations"] + w["rejected"]
        self.rows.append({
            "time_s": round(self.now, 6),
            "arrived": w["arrived"],
            "served": w["served"],
            "violations": viol,
            "violation_ratio": viol / denom if denom else 0.0,
            "cost_cumulative": self.cost_at(self.now),
            "util_cpu": utils["CPU"],
            "util_gpu": utils["GPU"],
            "util_accel": utils["ACCEL"],
            "active_workers": len(self.store.workers),
            "rejected": w["rejected"],
            "in_flight": self.in_flight,
            "served_cpu": w["served_cpu"],
            "served_gpu": w["served_gpu"],
            "served_accel": w["served_accel"],
            "offline_processed": self.tot["offline_processed"],
        })
        self.win = Counter()

    # -- main loop -----------------------------------------------------------

    def _preload(self) -> None:
        cfg = self.cfg
        for app in cfg.apps:
            variants = [v for v in self.sc.catalog.variants_of(app.arch_id) if v.accuracy >= app.min_accuracy]
            if cfg.policy != "modelless":
                v, n = pinned_variant(cfg.policy, variants)
                self.pinned[app.app_id] = v.variant_id
                plan = {v.variant_id: n}
            elif cfg.preload:
                plan = {vid: n for vid, n in cfg.preload.items() if vid in {x.variant_id for x in variants}}
            else:
                plan = self._cold_start_plan(app, variants)
            for vid in sorted(plan):
                v = self.store.variants[vid]
                for _ in range(plan[vid]):
                    try:
                        wid = place_instance(self.store, v.hardware, v.resources)
                    except NoCapacity:
                        raise SimulationError(f"cannot preload {vid}: no capacity") from None
                    self._start_load(v, wid, app.app_id, ready=True)

    def _cold_start_plan(self, app, variants) -> dict[str, int]:
        load = self.cfg.initial_qps.get(app.app_id)
        if load is None:
            if not any(q.app_id == app.app_id for _, q in self.sc.trace.arrivals):
                return {}
            first = [t for t, q in self.sc.trace.arrivals if t < 1000.0 and q.app_id == app.app_id]
            load = float(len(first))
        load = max(load, 1.0)
        cap = {t: sum(w.total[t] - w.used[t] for w in self.store.workers.values()) for t in RESOURCE_TYPES}
        problem = ScalingProblem(variants, {}, load, app.slo_ms, cap, self.th.lam,
                                 slack=(self.th.slack_threshold - 1.0) * load)
        try:
            plan = solve_ilp(problem)
        except ScalingError:
            try:
                plan = greedy_scale_up(problem, self.th.slack_threshold)
            except ScalingError:
                # Nothing fits the SLO; queries will take the fallback path.
                return {}
        return dict(plan.actions)

    def run(self) -> SimResult:
        cfg, th = self.cfg, self.th
        horizon = cfg.horizon_s
        self._preload()
        for t_ms, req in self.sc.trace.arrivals:
            self.push(t_ms / 1000.0, "query_arrival", req=req)
        if cfg.offline_enabled:
            for n, j in enumerate(cfg.offline):
                job = OfflineJob(f"job-{n}", j.app_id, j.total_inputs, j.chunk_size, submit_s=j.submit_s)
                self.offline_jobs.append(job)
                self.push(j.submit_s, "offline_chunk", job=job.job_id, submit=True)
        for kind, period in (("model_autoscale_tick", th.model_period_s), ("monitor_tick", th.monitor_period_s),
                             ("vm_autoscale_tick", th.vm_period_s), ("metrics_tick", th.metrics_interval_s)):
            self.push(period, kind, period=period)

        handlers: dict[str, Callable[[Event], None]] = {
            "query_arrival": lambda e: self._arrival(e.payload["req"]),
            "query_complete": self._complete,
            "load_complete": self._on_load_complete,
            "monitor_tick": lambda e: self._monitor(),
            "model_autoscale_tick": lambda e: self._model_autoscale(),
            "vm_autoscale_tick": lambda e: self._vm_autoscale(),
            "worker_ready": self._on_worker_ready,
            "offline_chunk": self._on_offline,
            "plan_execute": self._on_plan_execute,
            "metrics_tick": lambda e: self._metrics(),
        }
        while self._heap:
            ev = self._heap[0]
            if ev.time > horizon + EPS:
                break
            heapq.heappop(self._heap)
            if ev.time < self.now - EPS:
                raise SimulationError("time went backwards")
            self.now = ev.time
            handlers[ev.kind](ev)
            if "period" in ev.payload:
                self.push(self.now + ev.payload["period"], ev.kind, period=ev.payload["period"])
        self.now = horizon
        return SimResult(self.rows, self.plan_log, self.scaling_log, self.throttle_log, self._summary(),
                         self.offline_jobs)

    def _on_load_complete(self, ev: Event) -> None:
        key = ev.payload["key"]
        if ev.payload.get("offline"):
            for job in self.offline_jobs:
                if job.inst is not None and job.inst.key == key:
                    job.inst.loaded = True
                    self._offline_next_chunk(job)
            return
        inst = self.insts.get(key)
        if inst is not None and not inst.loaded:
            self._loaded(inst)

    def _on_worker_ready(self, ev: Event) -> None:
        wid = ev.payload["worker_id"]
        self.pending_workers = [p for p in self.pending_workers if p.worker_id != wid]
        self._add_worker(ev.payload["hardware"], self.now, wid)

    def _on_offline(self, ev: Event) -> None:
        job = next(j for j in self.offline_jobs if j.job_id == ev.payload["job"])
        if ev.payload.get("submit"):
            self._offline_submit(job)
        else:
            self._offline_chunk_done(job, ev.payload["n"])

    def _on_plan_execute(self, ev: Event) -> None:
        if ev.payload.get("op") == "release":
            self._release(ev.payload["key"])

    def _summary(self) -> dict:
        rows = self.rows
        ratios = [r["violation_ratio"] for r in rows]
        labels = Counter()
        for p in self.plan_log:
            for lab in p.get("labels", {}).values():
                labels[lab] += 1
        util = {hw: (sum(r[f"util_{hw.lower()}"] for r in rows) / len(rows) if rows else 0.0) for hw in HARDWARE}
        return {
            "name": self.cfg.name,
            "policy": self.cfg.policy,
            "seed": self.cfg.seed,
            "horizon_s": self.cfg.horizon_s,
            "total_cost": round(self.cost_at(self.cfg.horizon_s), 9),
            "arrived": self.tot["arrived"],
            "served": self.tot["served"],
            "rejected": self.tot["rejected"],
            "violations": self.tot["violations"] + self.tot["rejected"],
            "mean_violation_ratio": round(sum(ratios) / len(ratios), 9) if ratios else 0.0,
            "max_violation_ratio": round(max(ratios), 9) if ratios else 0.0,
            "mean_util": {k: round(v, 9) for k, v in util.items()},
            "served_by_hardware": {hw: self.tot["served_" + hw.lower()] for hw in HARDWARE},
            "actions": dict(sorted(labels.items())),
            "workers_added": sum(e.action == "add" for e in self.scaling_log),
            "offline_processed": self.tot["offline_processed"],
        }


def run(scenario: Scenario | ScenarioConfig) -> SimResult:
    if isinstance(scenario, ScenarioConfig):
        scenario = Scenario.from_config(scenario)
    return Simulator(scenario).run()
