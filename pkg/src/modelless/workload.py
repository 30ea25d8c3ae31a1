"""Arrival traces: load patterns, trace replay, and Zipfian model popularity.

All generators draw from ``numpy.random.default_rng(seed)``. Arrivals within
each one-second bucket are a Poisson count placed uniformly, which is an exact
sample of a Poisson process with a piecewise-constant rate.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .catalog import VariantProfile
from .selection import QueryRequest

PATTERNS = ("flat_low", "steady_high", "fluctuating")
ARRIVAL_HEADER = ("timestamp_ms", "app_id", "mode", "slo_ms", "min_accuracy", "batch", "model_name")
ZIPF_S = 1.0


class WorkloadError(ValueError):
    pass


@dataclass
class ArrivalTrace:
    arrivals: list[tuple[float, QueryRequest]]
    seed: int | None = None
    description: str = ""

    def __post_init__(self):
        ts = [t for t, _ in self.arrivals]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise WorkloadError("arrival timestamps must be nondecreasing")

    def __len__(self) -> int:
        return len(self.arrivals)

    def times_s(self) -> np.ndarray:
        return np.array([t for t, _ in self.arrivals], dtype=float) / 1000.0

    def bucket_counts(self, bucket_s: float = 1.0, duration_s: float | None = None) -> list[int]:
        ts = self.times_s()
        if duration_s is None:
            duration_s = float(ts[-1]) if len(ts) else 0.0
        n = max(1, int(np.ceil(duration_s / bucket_s - 1e-9)))
        idx = np.minimum((ts // bucket_s).astype(int), n - 1)
        return np.bincount(idx, minlength=n).tolist()


@dataclass(frozen=True)
class QueryTemplate:
    app_id: str = "default"
    slo_ms: float = 300.0
    min_accuracy: float = 0.0
    batch: int = 1

    def make(self, t_ms: float) -> QueryRequest:
        return QueryRequest(self.app_id, "by_requirements", latency_slo_ms=self.slo_ms,
                            min_accuracy=self.min_accuracy, batch=self.batch, arrival=t_ms / 1000.0)


def poisson_arrivals(rates: Sequence[float], bucket_s: float, rng: np.random.Generator) -> list[float]:
    """Arrival times in ms for a piecewise-constant rate (QPS per bucket)."""
    out = []
    for i, r in enumerate(rates):
        if r < 0:
            raise WorkloadError("rates must be >= 0")
        k = int(rng.poisson(r * bucket_s))
        if k:
            ts = np.sort(rng.uniform(i * bucket_s, (i + 1) * bucket_s, size=k))
            out.extend(round(float(t) * 1000.0, 3) for t in ts)
    return out


def pattern_rates(kind: str, duration_s: float, params: dict | None = None) -> list[float]:
    """Per-second target rate for one of the named patterns."""
    p = dict(params or {})
    n = int(np.ceil(duration_s - 1e-9))
    mid = np.arange(n) + 0.5
    if kind == "flat_low":
        rate = p.get("rate", 4.0)
        _positive(rate=rate)
        return [float(rate)] * n
    if kind == "steady_high":
        start, end = p.get("start", 650.0), p.get("end", 700.0)
        _positive(start=start, end=end)
        if n == 0:
            return []
        return (start + (end - start) * mid / duration_s).tolist()
    if kind == "fluctuating":
        low, high = p.get("low", 4.0), p.get("high", 80.0)
        spikes = p.get("spikes", [(60.0, 90.0), (150.0, 180.0)])
        _positive(low=low, high=high)
        rates = np.full(n, float(low))
        for a, b in spikes:
            if b <= a:
                raise WorkloadError(f"bad spike window ({a}, {b})")
            rates[(mid >= a) & (mid < b)] = high
        return rates.tolist()
    raise WorkloadError(f"unknown pattern {kind!r}")


def _positive(**kw) -> None:
    for k, v in kw.items():
        if v <= 0:
            raise WorkloadError(f"{k} must be positive")


def gen_pattern(kind: str, duration_s: float, seed: int, params: dict | None = None,
                template: QueryTemplate | None = None) -> ArrivalTrace:
    template = template or QueryTemplate()
    if duration_s < 0:
        raise WorkloadError("duration must be >= 0")
    rates = pattern_rates(kind, duration_s, params)
    rng = np.random.default_rng(seed)
    times = [t for t in poisson_arrivals(rates, 1.0, rng) if t < duration_s * 1000.0]
    return ArrivalTrace([(t, template.make(t)) for t in times], seed, f"{kind} {duration_s:g}s")


def read_bucket_file(source: str | Path) -> tuple[float, list[int]]:
    """Bucketed trace: a ``# bucket_s=<width>`` header, then one count per line."""
    text = Path(source).read_text()
    return parse_buckets(text)


def parse_buckets(text: str) -> tuple[float, list[int]]:
    bucket_s = None
    counts = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("bucket_s="):
                bucket_s = float(body.split("=", 1)[1])
            continue
        try:
            c = int(line)
        except ValueError:
            raise WorkloadError(f"line {lineno}: expected an integer count, got {line!r}") from None
        if c < 0:
            raise WorkloadError(f"line {lineno}: negative count")
        counts.append(c)
    if bucket_s is None or bucket_s <= 0:
        raise WorkloadError("missing or invalid '# bucket_s=' header")
    return bucket_s, counts


def format_buckets(counts: Iterable[int], bucket_s: float) -> str:
    return f"# bucket_s={bucket_s:g}\n" + "".join(f"{int(c)}\n" for c in counts)


def map_rates(counts: Sequence[float], qps_min: float, qps_max: float) -> list[float]:
    """Affine map of bucket counts so min -> qps_min and max -> qps_max."""
    if len(counts) < 2:
        raise WorkloadError("trace needs at least 2 buckets")
    if qps_min < 0 or qps_max < qps_min:
        raise WorkloadError("need 0 <= qps_min <= qps_max")
    lo, hi = min(counts), max(counts)
    if hi == lo:
        raise WorkloadError("degenerate trace")
    scale = (qps_max - qps_min) / (hi - lo)
    return [qps_min + (c - lo) * scale for c in counts]


def replay_trace(source: str | Path | tuple[float, Sequence[int]], qps_min: float, qps_max: float,
                 duration_s: float | None, seed: int, template: QueryTemplate | None = None) -> ArrivalTrace:
    """Poisson arrivals at each bucket's mapped rate, truncated to ``duration_s``."""
    template = template or QueryTemplate()
    if isinstance(source, tuple):
        bucket_s, counts = source
    else:
        bucket_s, counts = read_bucket_file(source)
    rates = map_rates(counts, qps_min, qps_max)
    rng = np.random.default_rng(seed)
    horizon = len(rates) * bucket_s if duration_s is None else min(duration_s, len(rates) * bucket_s)
    times = [t for t in poisson_arrivals(rates, bucket_s, rng) if t < horizon * 1000.0]
    return ArrivalTrace([(t, template.make(t)) for t in times], seed, f"replay [{qps_min:g},{qps_max:g}]")


def zipf_weights(n: int, s: float = ZIPF_S) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


@dataclass
class PopularitySampler:
    popular: list[str]
    rest: list[str]
    popular_share: float
    seed: int
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def sample(self, n: int) -> list[str]:
        hot = self._rng.random(n) < self.popular_share
        out = []
        pw = zipf_weights(len(self.popular)) if self.popular else None
        rw = zipf_weights(len(self.rest)) if self.rest else None
        hot_idx = self._rng.choice(len(self.popular), size=n, p=pw) if self.popular else None
        rest_idx = self._rng.choice(len(self.rest), size=n, p=rw) if self.rest else None
        for i in range(n):
            if (hot[i] and self.popular) or not self.rest:
                out.append(self.popular[hot_idx[i]])
            else:
                out.append(self.rest[rest_idx[i]])
        return out

    def __call__(self) -> str:
        return self.sample(1)[0]


def assign_popularity(models: Sequence[str], popular_set: Sequence[str], popular_share: float,
                      seed: int) -> PopularitySampler:
    """``popular_share`` of draws go Zipf over ``popular_set`` (in the given
    rank order), the rest Zipf over the remaining models."""
    if not 0.0 < popular_share < 1.0:
        raise WorkloadError("popular_share must be in (0, 1)")
    if not popular_set:
        raise WorkloadError("empty popular set")
    missing = [m for m in popular_set if m not in models]
    if missing:
        raise WorkloadError(f"popular model {missing[0]!r} not in models")
    rest = [m for m in models if m not in set(popular_set)]
    if not rest:
        raise WorkloadError("no non-popular models to take the remaining share")
    return PopularitySampler(list(popular_set), rest, popular_share, seed)


def cpu_slo_ms(variants: Iterable[VariantProfile], factor: float = 1.5) -> float:
    """``factor`` times the batch-1 latency of the fastest CPU variant."""
    lats = [v.latency_ms for v in variants if v.hardware == "CPU"]
    if not lats:
        raise WorkloadError("no CPU variant to derive an SLO from")
    return factor * min(lats)


# -- serialization -----------------------------------------------------------


def dump_arrivals(trace: ArrivalTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ARRIVAL_HEADER)
    for t, q in trace.arrivals:
        w.writerow([f"{t:.3f}", q.app_id, q.mode,
                    "" if q.latency_slo_ms is None else repr(float(q.latency_slo_ms)),
                    "" if q.min_accuracy is None else repr(float(q.min_accuracy)),
                    q.batch, q.model_name or ""])
    return buf.getvalue()


def parse_arrivals(text: str, seed: int | None = None) -> ArrivalTrace:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != ARRIVAL_HEADER:
        raise WorkloadError("bad arrival header")
    out = []
    for lineno, r in enumerate(rows[1:], 2):
        if len(r) != len(ARRIVAL_HEADER):
            raise WorkloadError(f"line {lineno}: expected {len(ARRIVAL_HEADER)} fields")
        t = float(r[0])
        q = QueryRequest(r[1], r[2], model_name=r[6] or None,
                         latency_slo_ms=float(r[3]) if r[3] else None,
                         min_accuracy=float(r[4]) if r[4] else None,
                         batch=int(r[5]), arrival=t / 1000.0)
        out.append((t, q))
    return ArrivalTrace(out, seed, "loaded")


def save_arrivals(path: str | Path, trace: ArrivalTrace) -> None:
    Path(path).write_text(dump_arrivals(trace))


def load_arrivals(path: str | Path) -> ArrivalTrace:
    return parse_arrivals(Path(path).read_text())


def map_models(trace: ArrivalTrace, pick: Callable[[], str], apps: dict[str, QueryTemplate]) -> ArrivalTrace:
    """Re-target each arrival to the app drawn from ``pick``."""
    out = [(t, apps[pick()].make(t)) for t, _ in trace.arrivals]
    return ArrivalTrace(out, trace.seed, trace.description + " +popularity")
