"""Model-level autoscaling: the exact scaling ILP for small instances and the
greedy replicate/upgrade/downgrade heuristic used online.

All plans are expressed as per-variant integer deltas over the currently
running instance counts.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .catalog import RESOURCE_TYPES, VariantProfile

SLACK_THRESHOLD = 1.05
LAMBDA = 0.1
ILP_MAX_VARIANTS = 8
EPS = 1e-9


class ScalingError(Exception):
    pass


class Infeasible(ScalingError):
    def __init__(self, constraint: str, detail: str = ""):
        self.constraint = constraint
        super().__init__(f"infeasible: {constraint} constraint violated" + (f" ({detail})" if detail else ""))


class NeedsVMScaling(ScalingError):
    """No model-level action satisfies the SLO and capacity constraints."""


def action_cost(delta: int, profile: VariantProfile, lam: float = LAMBDA) -> float:
    """Hardware cost of the action plus a load-latency penalty on loads."""
    if lam < 0:
        raise ScalingError("lambda must be >= 0")
    t_load_s = profile.load_latency_ms / 1000.0
    return profile.cost_rate * (delta + lam * t_load_s * max(delta, 0))


@dataclass(frozen=True)
class ScalingProblem:
    """One scaling decision.

    ``load`` and ``slack`` are QPS, either a single number for a
    one-architecture problem or a mapping arch_id -> QPS. Each architecture
    must be served by its own variants; resources are shared.
    """

    variants: tuple[VariantProfile, ...]
    running: Mapping[str, int]
    load: float | Mapping[str, float]
    slo_ms: float
    capacity: Mapping[str, float] | None = None
    lam: float = LAMBDA
    slack: float | Mapping[str, float] = 0.0
    served: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        ids = [v.variant_id for v in self.variants]
        if len(set(ids)) != len(ids):
            raise ScalingError("duplicate variant in problem")
        for vid, n in self.running.items():
            if n < 0:
                raise ScalingError("running counts must be >= 0")
            if vid not in ids:
                raise ScalingError(f"running variant {vid!r} not in problem")
        if self.lam < 0:
            raise ScalingError("lambda must be >= 0")
        object.__setattr__(self, "loads", self._per_arch(self.load, "load"))
        object.__setattr__(self, "slacks", self._per_arch(self.slack, "slack"))

    def _per_arch(self, value, name: str) -> dict[str, float]:
        archs = self.archs
        if isinstance(value, Mapping):
            unknown = set(value) - set(archs)
            if unknown:
                raise ScalingError(f"{name} given for unknown architecture {sorted(unknown)[0]!r}")
            out = {a: float(value.get(a, 0.0)) for a in archs}
        elif len(archs) > 1 and value:
            raise ScalingError(f"{name} must be given per architecture")
        else:
            out = {a: float(value) for a in archs}
        if any(x < 0 for x in out.values()):
            raise ScalingError(f"{name} must be >= 0")
        return out

    @property
    def archs(self) -> list[str]:
        return sorted({v.arch_id for v in self.variants})

    @property
    def load_qps(self) -> float:
        return sum(self.loads.values())

    @property
    def target_qps(self) -> float:
        return sum(self.target_of(a) for a in self.archs)

    def target_of(self, arch: str) -> float:
        return self.loads.get(arch, 0.0) + self.slacks.get(arch, 0.0)

    def n(self, vid: str) -> int:
        return int(self.running.get(vid, 0))

    def by_id(self, vid: str) -> VariantProfile:
        for v in self.variants:
            if v.variant_id == vid:
                return v
        raise KeyError(vid)

    def capacity_of(self, counts: Mapping[str, int], arch: str | None = None) -> float:
        return sum(v.saturation_qps * counts.get(v.variant_id, 0) for v in self.variants
                   if arch is None or v.arch_id == arch)

    def usage_of(self, counts: Mapping[str, int]) -> dict[str, float]:
        use = {t: 0.0 for t in RESOURCE_TYPES}
        for v in self.variants:
            c = counts.get(v.variant_id, 0)
            for t, amt in v.resources.items():
                use[t] += amt * c
        return use

    def pivot(self, arch: str | None = None) -> VariantProfile | None:
        """Running variant with the highest served load."""
        running = [v for v in self.variants if self.n(v.variant_id) > 0 and (arch is None or v.arch_id == arch)]
        if not running:
            return None
        return max(running, key=lambda v: (self.served.get(v.variant_id, 0.0), self.n(v.variant_id),
                                           _neg(v.variant_id)))

    def restrict(self, arch: str, running: Mapping[str, int] | None = None) -> "ScalingProblem":
        """Single-architecture view; resources held by other architectures'
        instances are taken off the capacity."""
        running = dict(self.running if running is None else running)
        mine = [v for v in self.variants if v.arch_id == arch]
        ids = {v.variant_id for v in mine}
        cap = None
        if self.capacity is not None:
            others = self.usage_of({k: n for k, n in running.items() if k not in ids})
            cap = {t: self.capacity.get(t, 0.0) - others[t] for t in RESOURCE_TYPES}
        served = {k: x for k, x in self.served.items() if k in ids}
        return ScalingProblem(mine, {k: n for k, n in running.items() if k in ids and n},
                              self.loads[arch], self.slo_ms, cap, self.lam, self.slacks[arch], served)


def _neg(s: str) -> tuple:
    return tuple(-ord(c) for c in s)


@dataclass
class ScalingPlan:
    actions: dict[str, int]
    labels: dict[str, str]
    total_cost: float
    trigger: str = ""
    needs_placement: bool = False
    execute_at: float | None = None

    @property
    def empty(self) -> bool:
        return not any(self.actions.values())

    def to_log(self) -> dict:
        return {
            "actions": {k: v for k, v in sorted(self.actions.items()) if v},
            "labels": {k: v for k, v in sorted(self.labels.items())},
            "cost": round(self.total_cost, 9),
            "trigger": self.trigger,
            "needs_placement": self.needs_placement,
        }


def label_actions(actions: Mapping[str, int], problem: ScalingProblem) -> dict[str, str]:
    """replicate for loaded variants; otherwise upgrade or downgrade by
    cost_rate against the architecture's serving variant."""
    labels = {}
    for vid, d in actions.items():
        if d > 0:
            v = problem.by_id(vid)
            pivot = problem.pivot(v.arch_id)
            if problem.n(vid) > 0:
                labels[vid] = "replicate"
            elif pivot is None or v.cost_rate > pivot.cost_rate:
                labels[vid] = "upgrade"
            else:
                labels[vid] = "downgrade"
        elif d < 0:
            labels[vid] = "unload"
    return labels


def plan_cost(actions: Mapping[str, int], problem: ScalingProblem) -> float:
    return sum(action_cost(d, problem.by_id(vid), problem.lam) for vid, d in actions.items() if d)


def make_plan(actions: Mapping[str, int], problem: ScalingProblem, trigger: str = "") -> ScalingPlan:
    acts = {k: int(v) for k, v in actions.items() if v}
    return ScalingPlan(acts, label_actions(acts, problem), plan_cost(acts, problem), trigger)


def violated_constraints(actions: Mapping[str, int], problem: ScalingProblem) -> list[str]:
    """Constraint classes the plan breaks, checked literally."""
    unknown = set(actions) - {v.variant_id for v in problem.variants}
    if unknown:
        raise ScalingError(f"action on unknown variant {sorted(unknown)[0]!r}")
    after = {v.variant_id: problem.n(v.variant_id) + actions.get(v.variant_id, 0) for v in problem.variants}
    bad = []
    if any(problem.capacity_of(after, a) < problem.target_of(a) - EPS for a in problem.archs):
        bad.append("load")
    for v in problem.variants:
        if actions.get(v.variant_id, 0) > 0 and v.latency_ms > problem.slo_ms + EPS:
            bad.append("slo")
            break
    if problem.capacity is not None:
        use = problem.usage_of(after)
        if any(use[t] > problem.capacity.get(t, 0.0) + EPS for t in RESOURCE_TYPES if use[t] > 0):
            bad.append("resources")
    if any(c < 0 for c in after.values()):
        bad.append("nonnegative")
    return bad


def is_feasible(actions: Mapping[str, int], problem: ScalingProblem) -> bool:
    return not violated_constraints(actions, problem)


def post_plan_cost(actions: Mapping[str, int], problem: ScalingProblem) -> float:
    """Running cost rate after the plan plus the plan's load penalty; always
    nonnegative, so ratios between plans are meaningful."""
    base = sum(v.cost_rate * problem.n(v.variant_id) for v in problem.variants)
    return base + plan_cost(actions, problem)


# -- exact solver -------------------------------------------------------------


def delta_bounds(problem: ScalingProblem, v: VariantProfile) -> tuple[int, int]:
    """Search box [-N, delta_max] for one variant.

    delta_max is the resource-implied cap ceil(R_total / R) minus the running
    count; without resource limits it is the count that alone covers the
    architecture's target load. Variants that miss the SLO cannot grow.
    """
    n = problem.n(v.variant_id)
    if v.latency_ms > problem.slo_ms + EPS:
        return -n, 0
    caps = []
    if problem.capacity is not None:
        for t, amt in v.resources.items():
            if amt > 0:
                caps.append(math.ceil(problem.capacity.get(t, 0.0) / amt - EPS))
    if not caps:
        caps.append(max(0, math.ceil(problem.target_of(v.arch_id) / v.saturation_qps - EPS)))
    return -n, max(0, min(caps) - n)


def solve_ilp(problem: ScalingProblem, max_variants: int = ILP_MAX_VARIANTS) -> ScalingPlan:
    """Minimum-cost plan by depth-first branch and bound.

    Each variable's cost is strictly increasing in its count, so no variant
    needs more instances than would cover its architecture's target alone.
    That cap, the resource limits, and a fractional cover bound prune the
    search without losing optimality. Ties go to the first plan found in a
    fixed variable order.
    """
    vs = list(problem.variants)
    if len(vs) > max_variants:
        raise ScalingError(f"{len(vs)} variants exceeds exhaustive cap {max_variants}")
    cap = problem.capacity

    dom = []
    for v in vs:
        n = problem.n(v.variant_id)
        _, hi = delta_bounds(problem, v)
        cover = math.ceil(problem.target_of(v.arch_id) / v.saturation_qps - EPS)
        dom.append((v, n, max(0, min(n + hi, cover))))
    # Grouped by architecture, most cost-efficient first within a group.
    dom.sort(key=lambda d: (d[0].arch_id, d[0].cost_rate / d[0].saturation_qps, d[0].variant_id))
    k = len(dom)
    archs = [d[0].arch_id for d in dom]
    last_of = {a: max(i for i in range(k) if archs[i] == a) for a in set(archs)}
    targets = {a: problem.target_of(a) for a in set(archs)}
    unit = [v.cost_rate for v, _, _ in dom]
    pen = [v.cost_rate * problem.lam * v.load_latency_ms / 1000.0 for v, _, _ in dom]

    def arch_bound(i0: int, i1: int, need: float) -> float:
        """Fractional lower bound for variables i0..i1 covering ``need``.

        Costs are convex piecewise linear in the count (slope C up to N, then
        C plus the load penalty), so filling cheapest QPS first is exact for
        the relaxation."""
        base = sum(-unit[i] * dom[i][1] for i in range(i0, i1 + 1))
        if need <= EPS:
            return base
        segs = []
        for i in range(i0, i1 + 1):
            v, n, xh = dom[i]
            q = v.saturation_qps
            if min(n, xh) > 0:
                segs.append((unit[i] / q, min(n, xh) * q))
            if xh > n:
                segs.append(((unit[i] + pen[i]) / q, (xh - n) * q))
        segs.sort()
        extra = 0.0
        for price, amount in segs:
            take = min(amount, need)
            extra += price * take
            need -= take
            if need <= EPS:
                return base + extra
        return math.inf

    def bound(i: int, capq: float) -> float:
        total = 0.0
        j = i
        while j < k:
            a = archs[j]
            have = capq if j == i else 0.0
            total += arch_bound(j, last_of[a], targets[a] - have)
            j = last_of[a] + 1
        return total

    best_cost = math.inf
    best_x: list[int] | None = None
    x = [0] * k

    def dfs(i: int, cost: float, capq: float, use: dict[str, float]):
        # capq: capacity accumulated so far for archs[i]'s group.
        nonlocal best_cost, best_x
        if i == k:
            if cost < best_cost - EPS:
                best_cost, best_x = cost, list(x)
            return
        if cost + bound(i, capq) >= best_cost - EPS:
            return
        v, n, xh = dom[i]
        closes = last_of[archs[i]] == i
        for xi in range(0, xh + 1):
            nu = use
            if cap is not None and xi > 0:
                nu = dict(use)
                over = False
                for t, amt in v.resources.items():
                    nu[t] += amt * xi
                    if amt > 0 and nu[t] > cap.get(t, 0.0) + EPS:
                        over = True
                if over:
                    break
            q = capq + xi * v.saturation_qps
            if closes and q < targets[archs[i]] - EPS:
                continue
            x[i] = xi
            d = xi - n
            dfs(i + 1, cost + unit[i] * d + pen[i] * max(d, 0), 0.0 if closes else q, nu)
        x[i] = 0

    dfs(0, 0.0, 0.0, {t: 0.0 for t in RESOURCE_TYPES})
    if best_x is None:
        raise Infeasible(_infeasible_reason(problem))
    actions = {dom[i][0].variant_id: best_x[i] - dom[i][1] for i in range(k)}
    return make_plan(actions, problem, trigger="ilp")


def _infeasible_reason(problem: ScalingProblem) -> str:
    """First constraint class that cannot be met even in isolation."""
    for a in problem.archs:
        mine = [v for v in problem.variants if v.arch_id == a]
        if not mine and problem.target_of(a) > 0:
            return "load"
        existing = problem.capacity_of(problem.running, a)
        eligible = [v for v in mine if v.latency_ms <= problem.slo_ms + EPS]
        if not eligible and existing < problem.target_of(a) - EPS:
            return "slo"
    return "resources"


def enumerate_plans(problem: ScalingProblem):
    """Every delta vector in the full box; independent of solve_ilp's pruning.
    Yields (actions, cost, feasible)."""
    vs = list(problem.variants)
    ranges = [range(lo, hi + 1) for lo, hi in (delta_bounds(problem, v) for v in vs)]
    for combo in itertools.product(*ranges):
        acts = {v.variant_id: d for v, d in zip(vs, combo)}
        yield acts, plan_cost(acts, problem), is_feasible(acts, problem)


# -- greedy heuristic ---------------------------------------------------------


def headroom(saturations: Sequence[float], served: Sequence[float]) -> float:
    """Combined saturation throughput over combined served load."""
    if not saturations:
        raise ScalingError("headroom needs at least one running instance")
    load = sum(served)
    if load <= 0:
        return math.inf
    return sum(saturations) / load


def problem_headroom(problem: ScalingProblem) -> float:
    counts = {v.variant_id: problem.n(v.variant_id) for v in problem.variants}
    if not any(counts.values()):
        return 0.0 if problem.load_qps > 0 else math.inf
    cap = problem.capacity_of(counts)
    return math.inf if problem.load_qps <= 0 else cap / problem.load_qps


def _fits_capacity(problem: ScalingProblem, actions: Mapping[str, int]) -> bool:
    if problem.capacity is None:
        return True
    after = {v.variant_id: problem.n(v.variant_id) + actions.get(v.variant_id, 0) for v in problem.variants}
    use = problem.usage_of(after)
    return all(use[t] <= problem.capacity.get(t, 0.0) + EPS for t in RESOURCE_TYPES if use[t] > 0)


def _single_arch(problem: ScalingProblem) -> None:
    if len(problem.archs) > 1:
        raise ScalingError("greedy scaling works on one architecture at a time; use restrict()")


def _count_for(need: float, q: float) -> int:
    return max(1, math.ceil(need / q - EPS))


def _fits(demand: Mapping[str, float], free: Mapping[str, float]) -> bool:
    return all(amt <= free.get(t, 0.0) + EPS for t, amt in demand.items() if amt > 0)


def greedy_scale_up(
    problem: ScalingProblem,
    slack_threshold: float = SLACK_THRESHOLD,
    worker_free: Mapping[str, float] | None = None,
    vertical: bool = True,
) -> ScalingPlan:
    """Cheapest of replicating the pivot variant or adding a faster variant of
    the same architecture, sized to restore ``slack_threshold`` headroom.

    With ``vertical=False`` only replication is considered.
    """
    _single_arch(problem)
    if problem_headroom(problem) >= slack_threshold:
        return make_plan({}, problem, trigger="none")
    target = slack_threshold * problem.load_qps
    counts = {v.variant_id: problem.n(v.variant_id) for v in problem.variants}
    need = target - problem.capacity_of(counts)
    pivot = problem.pivot()

    options: list[tuple[float, int, str, dict[str, int]]] = []
    if pivot is not None and pivot.latency_ms <= problem.slo_ms + EPS:
        acts = {pivot.variant_id: _count_for(need, pivot.saturation_qps)}
        if _fits_capacity(problem, acts):
            options.append((plan_cost(acts, problem), 0, pivot.variant_id, acts))
    if vertical:
        for v in problem.variants:
            if pivot is not None:
                if v.variant_id == pivot.variant_id or v.arch_id != pivot.arch_id:
                    continue
                if v.saturation_qps <= pivot.saturation_qps:
                    continue
            if v.latency_ms > problem.slo_ms + EPS:
                continue
            acts = {v.variant_id: _count_for(need, v.saturation_qps)}
            if _fits_capacity(problem, acts):
                options.append((plan_cost(acts, problem), 1, v.variant_id, acts))
    if not options:
        raise NeedsVMScaling("no variant can absorb the load within SLO and resources")
    options.sort(key=lambda o: (round(o[0], 12), o[1], o[2]))
    plan = make_plan(options[0][3], problem, trigger="scale_up")
    if worker_free is not None:
        demand = {t: 0.0 for t in RESOURCE_TYPES}
        for vid, d in plan.actions.items():
            for t, amt in problem.by_id(vid).resources.items():
                demand[t] += amt * d
        plan.needs_placement = not _fits(demand, worker_free)
    return plan


def greedy_scale_down(
    problem: ScalingProblem,
    slack_threshold: float = SLACK_THRESHOLD,
    now: float = 0.0,
    min_instances: int = 1,
    vertical: bool = True,
    period_s: float = 1.0,
) -> ScalingPlan:
    """Cheapest single removal, or a downgrade of the pivot to a cheaper
    same-architecture variant, that still carries the load with headroom.

    The returned plan carries ``execute_at``: it is only due after the load
    latency of the variant being scaled down has elapsed.
    """
    _single_arch(problem)
    target = slack_threshold * problem.load_qps
    counts = {v.variant_id: problem.n(v.variant_id) for v in problem.variants}
    cap = problem.capacity_of(counts)
    total = sum(counts.values())
    options: list[tuple[float, int, str, dict[str, int], VariantProfile]] = []

    for v in problem.variants:
        n = counts[v.variant_id]
        if n == 0 or total - 1 < min_instances:
            continue
        if cap - v.saturation_qps >= target - EPS:
            acts = {v.variant_id: -1}
            options.append((plan_cost(acts, problem), 0, v.variant_id, acts, v))

    pivot = problem.pivot()
    if vertical and pivot is not None:
        rest = cap - counts[pivot.variant_id] * pivot.saturation_qps
        for v in problem.variants:
            if v.arch_id != pivot.arch_id or v.variant_id == pivot.variant_id:
                continue
            if v.cost_rate >= pivot.cost_rate or v.latency_ms > problem.slo_ms + EPS:
                continue
            k = _count_for(target - rest, v.saturation_qps)
            acts = {v.variant_id: k, pivot.variant_id: -counts[pivot.variant_id]}
            if not _fits_capacity(problem, acts):
                continue
            options.append((plan_cost(acts, problem), 1, v.variant_id, acts, pivot))

    options = [o for o in options if o[0] < -EPS]
    if not options:
        return make_plan({}, problem, trigger="none")
    options.sort(key=lambda o: (round(o[0], 12), o[1], o[2]))
    cost, _, _, acts, affected = options[0]
    plan = make_plan(acts, problem, trigger="scale_down")
    wait_s = max(period_s, affected.load_latency_ms / 1000.0)
    # Whole autoscaler periods.
    plan.execute_at = now + math.ceil(wait_s / period_s - EPS) * period_s
    return plan


@dataclass
class _Pending:
    plan: ScalingPlan
    load_at_creation: float
    created: float


class ScaleDownGate:
    """Holds delayed scale-down plans per scope until they come due.

    A pending plan is dropped as soon as the load rises above its level at
    creation or a fresh evaluation no longer proposes the same actions.
    """

    def __init__(self):
        self.pending: dict[str, _Pending] = {}

    def offer(self, scope: str, plan: ScalingPlan, load: float, now: float) -> ScalingPlan | None:
        cur = self.pending.get(scope)
        if cur is not None and load > cur.load_at_creation + EPS:
            del self.pending[scope]
            cur = None
        if plan.empty:
            self.pending.pop(scope, None)
            return None
        if cur is None or cur.plan.actions != plan.actions:
            self.pending[scope] = _Pending(plan, load, now)
            cur = self.pending[scope]
        if cur.plan.execute_at is not None and now >= cur.plan.execute_at - EPS:
            del self.pending[scope]
            return cur.plan
        return None

    def cancel(self, scope: str) -> None:
        self.pending.pop(scope, None)


def greedy_plan(problem: ScalingProblem, slack_threshold: float = SLACK_THRESHOLD,
                max_steps: int = 1000) -> tuple[dict[str, int], list[ScalingPlan]]:
    """Per architecture (in id order, sharing resources): scale up if needed,
    then apply scale-down steps, ignoring their delay, until none applies.
    Returns the net actions and the emitted plans."""
    running = {k: n for k, n in problem.running.items() if n}
    plans = []

    def apply(plan: ScalingPlan):
        plans.append(plan)
        for vid, d in plan.actions.items():
            running[vid] = running.get(vid, 0) + d

    for arch in problem.archs:
        sub = problem.restrict(arch, running)
        up = greedy_scale_up(_with_served(sub), slack_threshold)
        if not up.empty:
            apply(up)
        for _ in range(max_steps):
            sub = _with_served(problem.restrict(arch, running))
            down = greedy_scale_down(sub, slack_threshold, min_instances=1 if sub.load_qps > 0 else 0)
            if down.empty:
                break
            apply(down)
    net = {v.variant_id: running.get(v.variant_id, 0) - problem.n(v.variant_id) for v in problem.variants}
    return {k: d for k, d in net.items() if d}, plans


def _with_served(problem: ScalingProblem) -> ScalingProblem:
    """Keep measured served loads where given; otherwise spread the load over
    running variants in proportion to capacity."""
    counts = {k: n for k, n in problem.running.items() if n > 0}
    if all(k in problem.served for k in counts):
        return problem
    cap = sum(problem.by_id(vid).saturation_qps * n for vid, n in counts.items())
    served = {}
    if cap > 0:
        served = {vid: problem.load_qps * problem.by_id(vid).saturation_qps * n / cap
                  for vid, n in counts.items()}
    return replace(problem, served=served)
