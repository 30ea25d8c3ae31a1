"""Model architectures, their variants, and the synthetic variant profiler.

Variants are either generated from a parametric latency/cost model or ingested
from a profile file. Profiles are never measured on real hardware here.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

HARDWARE = ("CPU", "GPU", "ACCEL")
OPTIMIZERS = ("none", "graph_optimized")
TASKS = ("classification", "translation", "other")
RESOURCE_TYPES = ("cpu_cores", "cpu_mem_gb", "gpu_mem_gb", "accel_cores")

# Resource types a variant of each hardware class may request.
HARDWARE_RESOURCES = {
    "CPU": ("cpu_cores", "cpu_mem_gb"),
    "GPU": ("gpu_mem_gb",),
    "ACCEL": ("accel_cores",),
}
# The resource whose utilization stands for "utilization of this hardware".
DOMINANT_RESOURCE = {"CPU": "cpu_cores", "GPU": "gpu_mem_gb", "ACCEL": "accel_cores"}

# $/GB-second, normalized from on-demand pricing.
DEFAULT_COST_PER_GB_S = {"CPU": 0.031, "ACCEL": 0.190, "GPU": 0.498}

MAX_BATCH = 64
PROFILE_HEADER = (
    "variant_id",
    "arch_id",
    "hardware",
    "optimizer",
    "max_batch",
    "accuracy",
    "load_latency_ms",
    "cost_rate",
    "saturation_qps",
    "resources",
    "latencies",
)


class CatalogError(ValueError):
    pass


def is_valid_batch(b: int) -> bool:
    return isinstance(b, int) and 1 <= b <= MAX_BATCH and (b & (b - 1)) == 0


@dataclass(frozen=True)
class ModelArchitecture:
    arch_id: str
    task: str = "classification"
    app_ids: frozenset[str] = frozenset()
    declared_accuracy: float = 1.0
    # Parametric profile inputs. Only generate_variants reads these.
    base_latency_ms: float = 100.0
    mem_gb: float = 1.0
    cpu_cores: float = 4.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise CatalogError(f"unknown task {self.task!r}")
        if not 0.0 <= self.declared_accuracy <= 1.0:
            raise CatalogError("declared_accuracy must be in [0, 1]")
        if self.base_latency_ms <= 0 or self.mem_gb <= 0:
            raise CatalogError("base_latency_ms and mem_gb must be positive")


@dataclass(frozen=True)
class VariantProfile:
    variant_id: str
    arch_id: str
    hardware: str
    optimizer: str
    max_batch: int
    accuracy: float
    inf_latency_ms: dict[int, float]
    load_latency_ms: float
    saturation_qps: float
    cost_rate: float
    resources: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.hardware not in HARDWARE:
            raise CatalogError(f"hardware: unknown {self.hardware!r}")
        if self.optimizer not in OPTIMIZERS:
            raise CatalogError(f"optimizer: unknown {self.optimizer!r}")
        if not is_valid_batch(self.max_batch):
            raise CatalogError(f"max_batch: invalid batch {self.max_batch}")
        if not 0.0 <= self.accuracy <= 1.0:
            raise CatalogError("accuracy: must be in [0, 1]")
        if 1 not in self.inf_latency_ms:
            raise CatalogError("inf_latency_ms: batch 1 latency missing")
        prev = -math.inf
        for b in sorted(self.inf_latency_ms):
            lat = self.inf_latency_ms[b]
            if not is_valid_batch(b) or b > self.max_batch:
                raise CatalogError(f"inf_latency_ms: invalid batch {b}")
            if lat <= 0 or lat < prev:
                raise CatalogError("inf_latency_ms: must be positive and non-decreasing in batch")
            prev = lat
        if self.saturation_qps <= 0:
            raise CatalogError("saturation_qps: must be > 0")
        if self.cost_rate <= 0:
            raise CatalogError("cost_rate: must be > 0")
        if self.load_latency_ms < 0:
            raise CatalogError("load_latency_ms: must be >= 0")
        allowed = HARDWARE_RESOURCES[self.hardware]
        for rtype, amount in self.resources.items():
            if rtype not in RESOURCE_TYPES:
                raise CatalogError(f"resources: unknown type {rtype!r}")
            if amount < 0:
                raise CatalogError(f"resources: negative {rtype}")
            if amount > 0 and rtype not in allowed:
                raise CatalogError(f"resources: {rtype} not valid for {self.hardware} variant")

    @property
    def latency_ms(self) -> float:
        """Batch-1 inference latency, the key used for SLO checks."""
        return self.inf_latency_ms[1]

    def latency_at(self, batch: int) -> float:
        try:
            return self.inf_latency_ms[batch]
        except KeyError:
            raise CatalogError(f"{self.variant_id}: batch {batch} not profiled") from None

    @property
    def combined_latency_ms(self) -> float:
        return self.inf_latency_ms[1] + self.load_latency_ms

    @property
    def mem_gb(self) -> float:
        return sum(self.resources.get(t, 0.0) for t in ("cpu_mem_gb", "gpu_mem_gb"))


@dataclass(frozen=True)
class HardwareSpec:
    """Knobs of the parametric profiler for one hardware class."""

    name: str
    speedup: float = 1.0
    optimizers: tuple[str, ...] = ("none",)
    pipeline_factor: float = 1.0
    mem_factor: float = 1.0
    load_ms_per_gb: float = 1000.0
    cost_per_gb_s: float | None = None
    accel_cores: float = 1.0

    def __post_init__(self):
        if self.name not in HARDWARE:
            raise CatalogError(f"unknown hardware {self.name!r}")
        for opt in self.optimizers:
            if opt not in OPTIMIZERS:
                raise CatalogError(f"unknown optimizer {opt!r}")

    @property
    def cost_rate_per_gb(self) -> float:
        if self.cost_per_gb_s is not None:
            return self.cost_per_gb_s
        return DEFAULT_COST_PER_GB_S[self.name]


def default_hardware() -> list[HardwareSpec]:
    """CPU baseline, a GPU with an optional graph compiler, and an accelerator
    that only runs compiled graphs."""
    return [
        HardwareSpec("CPU", speedup=1.0, optimizers=("none",), pipeline_factor=2.0,
                     mem_factor=2.0, load_ms_per_gb=750.0),
        HardwareSpec("GPU", speedup=10.0, optimizers=("none", "graph_optimized"),
                     pipeline_factor=2.0, mem_factor=1.0, load_ms_per_gb=4000.0),
        HardwareSpec("ACCEL", speedup=5.0, optimizers=("graph_optimized",),
                     pipeline_factor=2.0, mem_factor=0.8, load_ms_per_gb=2500.0),
    ]


@dataclass(frozen=True)
class ProfileModel:
    """Parametric latency model shared by all hardware classes.

    latency(b) = L0 * (fixed_fraction + (1 - fixed_fraction) * b), where L0 is
    the architecture's CPU batch-1 latency divided by the hardware speedup and
    multiplied by ``graph_opt_factor`` for compiled graphs.
    """

    fixed_fraction: float = 0.6
    graph_opt_factor: float = 0.75
    mem_per_batch: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.fixed_fraction <= 1.0:
            raise CatalogError("fixed_fraction must be in [0, 1]")

    def base_latency(self, arch: ModelArchitecture, hw: HardwareSpec, optimizer: str) -> float:
        l0 = arch.base_latency_ms / hw.speedup
        if optimizer == "graph_optimized":
            l0 *= self.graph_opt_factor
        return l0

    def latency(self, l0: float, batch: int) -> float:
        a = self.fixed_fraction
        return l0 * (a + (1.0 - a) * batch)

    def saturation(self, l0: float, batch: int, hw: HardwareSpec) -> float:
        return batch / (self.latency(l0, batch) / 1000.0) * hw.pipeline_factor

    def memory(self, arch: ModelArchitecture, hw: HardwareSpec, batch: int) -> float:
        return arch.mem_gb * hw.mem_factor * (1.0 + self.mem_per_batch * (batch - 1))


def _variant_id(arch_id: str, hw: str, optimizer: str, batch: int) -> str:
    opt = "opt" if optimizer == "graph_optimized" else "base"
    return f"{arch_id}-{hw.lower()}-{opt}-b{batch}"


def generate_variants(
    arch: ModelArchitecture,
    hw_catalog: list[HardwareSpec],
    batch_sizes: Iterable[int],
    model: ProfileModel | None = None,
) -> list[VariantProfile]:
    """One variant per (hardware, optimizer, batch) combination."""
    model = model or ProfileModel()
    batches = list(batch_sizes)
    if not hw_catalog:
        raise CatalogError("no hardware")
    if not batches:
        raise CatalogError("invalid batch: empty batch list")
    for b in batches:
        if not is_valid_batch(b):
            raise CatalogError(f"invalid batch {b!r}")
    batches = sorted(set(batches))

    out = []
    for hw in hw_catalog:
        for optimizer in hw.optimizers:
            l0 = model.base_latency(arch, hw, optimizer)
            for b in batches:
                # Profile every power of two up to the optimized batch.
                lats = {}
                p = 1
                while p <= b:
                    lats[p] = round(model.latency(l0, p), 6)
                    p *= 2
                mem = model.memory(arch, hw, b)
                if hw.name == "CPU":
                    resources = {"cpu_cores": arch.cpu_cores, "cpu_mem_gb": round(mem, 6)}
                elif hw.name == "GPU":
                    resources = {"gpu_mem_gb": round(mem, 6)}
                else:
                    resources = {"accel_cores": hw.accel_cores}
                out.append(VariantProfile(
                    variant_id=_variant_id(arch.arch_id, hw.name, optimizer, b),
                    arch_id=arch.arch_id,
                    hardware=hw.name,
                    optimizer=optimizer,
                    max_batch=b,
                    accuracy=arch.declared_accuracy,
                    inf_latency_ms=lats,
                    load_latency_ms=round(hw.load_ms_per_gb * mem, 6),
                    saturation_qps=round(model.saturation(l0, b, hw), 6),
                    cost_rate=round(hw.cost_rate_per_gb * mem, 9),
                    resources=resources,
                ))
    return out


class Catalog:
    """Immutable collection of architectures and variant profiles."""

    def __init__(self, archs: Iterable[ModelArchitecture] = (), variants: Iterable[VariantProfile] = ()):
        self._archs: dict[str, ModelArchitecture] = {}
        self._variants: dict[str, VariantProfile] = {}
        for a in archs:
            if a.arch_id in self._archs:
                raise CatalogError(f"duplicate arch_id {a.arch_id!r}")
            self._archs[a.arch_id] = a
        for v in variants:
            if v.variant_id in self._variants:
                raise CatalogError(f"duplicate variant_id {v.variant_id!r}")
            if v.arch_id not in self._archs:
                raise CatalogError(f"variant {v.variant_id!r} references unknown arch {v.arch_id!r}")
            self._variants[v.variant_id] = v

    def __len__(self) -> int:
        return len(self._variants)

    def __iter__(self):
        return iter(self._variants.values())

    def __contains__(self, variant_id: str) -> bool:
        return variant_id in self._variants

    def __getitem__(self, variant_id: str) -> VariantProfile:
        return self._variants[variant_id]

    @property
    def archs(self) -> dict[str, ModelArchitecture]:
        return dict(self._archs)

    def arch(self, arch_id: str) -> ModelArchitecture:
        return self._archs[arch_id]

    def variants_of(self, arch_id: str) -> list[VariantProfile]:
        return [v for v in self._variants.values() if v.arch_id == arch_id]

    def merged(self, other: "Catalog") -> "Catalog":
        return Catalog([*self._archs.values(), *other._archs.values()],
                       [*self._variants.values(), *other._variants.values()])


def _fmt(x: float) -> str:
    return repr(float(x)) if not float(x).is_integer() else str(int(x))


def dump_profiles(variants: Iterable[VariantProfile]) -> str:
    """Serialize to the comma-separated profile format.

    The trailing fields are variable length: ``type=amount`` resource pairs
    followed by ``batch:latency_ms`` pairs.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROFILE_HEADER)
    for v in variants:
        row = [v.variant_id, v.arch_id, v.hardware, v.optimizer, v.max_batch,
               _fmt(v.accuracy), _fmt(v.load_latency_ms), _fmt(v.cost_rate), _fmt(v.saturation_qps)]
        row += [f"{t}={_fmt(v.resources[t])}" for t in RESOURCE_TYPES if t in v.resources]
        row += [f"{b}:{_fmt(v.inf_latency_ms[b])}" for b in sorted(v.inf_latency_ms)]
        w.writerow(row)
    return buf.getvalue()


def write_profiles(path: str | Path, variants: Iterable[VariantProfile]) -> None:
    Path(path).write_text(dump_profiles(variants))


def parse_profiles(text: str) -> Catalog:
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        return Catalog()
    reader = csv.reader(lines)
    header = next(reader)
    if tuple(h.strip() for h in header[: len(PROFILE_HEADER) - 2]) != PROFILE_HEADER[:-2]:
        raise CatalogError("line 1: missing or malformed header")

    variants: list[VariantProfile] = []
    seen: set[str] = set()
    for lineno, row in enumerate(reader, start=2):
        if not row or not any(c.strip() for c in row):
            continue
        try:
            v = _parse_row(row)
        except CatalogError as e:
            raise CatalogError(f"line {lineno}: {e}") from None
        except (ValueError, IndexError) as e:
            raise CatalogError(f"line {lineno}: malformed row ({e})") from None
        if v.variant_id in seen:
            raise CatalogError(f"line {lineno}: duplicate variant_id {v.variant_id!r}")
        seen.add(v.variant_id)
        variants.append(v)

    archs = {}
    for v in variants:
        prev = archs.get(v.arch_id, 0.0)
        archs[v.arch_id] = max(prev, v.accuracy)
    return Catalog(
        [ModelArchitecture(a, task="other", declared_accuracy=acc) for a, acc in archs.items()],
        variants,
    )


def _parse_row(row: list[str]) -> VariantProfile:
    fixed = [c.strip() for c in row[:9]]
    if len(fixed) < 9:
        raise CatalogError(f"expected at least 9 fields, got {len(fixed)}")
    vid, arch_id, hw, opt, max_batch, acc, load, cost, sat = fixed
    resources: dict[str, float] = {}
    lats: dict[int, float] = {}
    for cell in row[9:]:
        cell = cell.strip()
        if not cell:
            continue
        if "=" in cell:
            k, val = cell.split("=", 1)
            resources[k.strip()] = float(val)
        elif ":" in cell:
            k, val = cell.split(":", 1)
            lats[int(k)] = float(val)
        else:
            raise CatalogError(f"unrecognized field {cell!r}")
    return VariantProfile(
        variant_id=vid,
        arch_id=arch_id,
        hardware=hw,
        optimizer=opt,
        max_batch=int(max_batch),
        accuracy=float(acc),
        inf_latency_ms=lats,
        load_latency_ms=float(load),
        saturation_qps=float(sat),
        cost_rate=float(cost),
        resources=resources,
    )


def load_profiles(source: str | Path) -> Catalog:
    return parse_profiles(Path(source).read_text())


def resnet50_like(app_ids: Iterable[str] = ("default",), accuracy: float = 0.76) -> ModelArchitecture:
    return ModelArchitecture("resnet50", task="classification", app_ids=frozenset(app_ids),
                             declared_accuracy=accuracy, base_latency_ms=100.0, mem_gb=1.0,
                             cpu_cores=4.0)


def example_variants() -> Catalog:
    """The three ResNet50 variants used in the cost-vs-load example table."""
    arch = ModelArchitecture("resnet50", declared_accuracy=0.76)
    vs = [
        VariantProfile("A", "resnet50", "CPU", "none", 1, 0.76, {1: 200.0}, 0.0, 5.0, 1.0,
                       {"cpu_cores": 4.0, "cpu_mem_gb": 2.0}),
        VariantProfile("B", "resnet50", "ACCEL", "graph_optimized", 1, 0.76, {1: 20.0}, 0.0, 100.0, 3.0,
                       {"accel_cores": 1.0}),
        VariantProfile("C", "resnet50", "GPU", "graph_optimized", 1, 0.76, {1: 15.0}, 0.0, 800.0, 16.0,
                       {"gpu_mem_gb": 2.0}),
    ]
    return Catalog([arch], vs)
