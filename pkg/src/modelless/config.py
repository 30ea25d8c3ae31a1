"""Scenario configuration: YAML in, validated dataclasses out."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .catalog import HARDWARE, Catalog, default_hardware, generate_variants, load_profiles, resnet50_like
from .workload import (
    PATTERNS,
    ArrivalTrace,
    QueryTemplate,
    gen_pattern,
    load_arrivals,
    replay_trace,
)

POLICIES = ("modelless", "static_cpu", "static_gpu", "horizontal_only")


class ConfigError(ValueError):
    pass


@dataclass
class Thresholds:
    lam: float = 0.1
    slack_threshold: float = 1.05
    interference_factor: float = 1.2
    offline_util_threshold: float = 0.4
    vm_util_threshold: float = 0.8
    overload_fraction: float = 0.8
    monitor_period_s: float = 2.0
    model_period_s: float = 1.0
    vm_period_s: float = 2.0
    metrics_interval_s: float = 4.0
    startup_s: float = 30.0
    idle_window_s: float = 60.0

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError("thresholds.lam must be >= 0")
        if self.slack_threshold < 1.0:
            raise ConfigError("thresholds.slack_threshold must be >= 1")
        if self.interference_factor <= 1.0:
            raise ConfigError("thresholds.interference_factor must be > 1")
        for name in ("offline_util_threshold", "vm_util_threshold", "overload_fraction"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError(f"thresholds.{name} must be in (0, 1]")
        for name in ("monitor_period_s", "model_period_s", "vm_period_s", "metrics_interval_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"thresholds.{name} must be > 0")
        if self.startup_s < 0 or self.idle_window_s < 0:
            raise ConfigError("thresholds.startup_s and idle_window_s must be >= 0")


@dataclass
class AppConfig:
    app_id: str
    arch_id: str
    slo_ms: float
    min_accuracy: float = 0.0

    def template(self) -> QueryTemplate:
        return QueryTemplate(self.app_id, self.slo_ms, self.min_accuracy)


@dataclass
class WorkloadConfig:
    kind: str = "pattern"  # pattern | replay | file
    pattern: str = "flat_low"
    params: dict = field(default_factory=dict)
    trace_path: str | None = None
    qps_min: float = 10.0
    qps_max: float = 1000.0
    app_id: str | None = None


@dataclass
class InterferenceConfig:
    enabled: bool = False
    qps_fraction: float = 0.8
    multiplier: float = 1.5


@dataclass
class OfflineJobConfig:
    app_id: str
    total_inputs: int
    chunk_size: int = 10
    submit_s: float = 0.0


@dataclass
class CatalogConfig:
    builtin: str | None = "resnet50"
    batches: list[int] = field(default_factory=lambda: [1, 8])
    profiles: str | None = None


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    horizon_s: float = 60.0
    policy: str = "modelless"
    catalog: CatalogConfig = field(default_factory=CatalogConfig)
    apps: list[AppConfig] = field(default_factory=list)
    fleet: dict[str, int] = field(default_factory=lambda: {"CPU": 1})
    worker_templates: dict[str, dict[str, float]] = field(default_factory=dict)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    model_autoscale: bool = True
    vm_autoscale: bool = True
    interference: InterferenceConfig = field(default_factory=InterferenceConfig)
    offline: list[OfflineJobConfig] = field(default_factory=list)
    offline_contention: float = 1.0
    offline_enabled: bool = True
    preload: dict[str, int] = field(default_factory=dict)
    initial_qps: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {', '.join(POLICIES)}")
        if self.horizon_s <= 0:
            raise ConfigError("horizon_s must be > 0")
        if not self.apps:
            raise ConfigError("at least one app is required")
        ids = [a.app_id for a in self.apps]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate app_id")
        for a in self.apps:
            if a.slo_ms <= 0:
                raise ConfigError(f"app {a.app_id!r}: slo_ms must be > 0")
        for h, n in self.fleet.items():
            if h not in HARDWARE:
                raise ConfigError(f"fleet: unknown hardware {h!r}")
            if n < 0:
                raise ConfigError("fleet counts must be >= 0")
        if sum(self.fleet.values()) == 0:
            raise ConfigError("fleet is empty")
        if self.workload.kind not in ("pattern", "replay", "file"):
            raise ConfigError(f"unknown workload kind {self.workload.kind!r}")
        if self.workload.kind == "pattern" and self.workload.pattern not in PATTERNS:
            raise ConfigError(f"unknown pattern {self.workload.pattern!r}")
        if self.workload.kind in ("replay", "file") and not self.workload.trace_path:
            raise ConfigError("workload.trace_path is required")
        if self.offline_contention < 1.0:
            raise ConfigError("offline_contention must be >= 1")
        for j in self.offline:
            if j.total_inputs <= 0 or j.chunk_size <= 0:
                raise ConfigError("offline jobs need positive total_inputs and chunk_size")
            if j.app_id not in ids:
                raise ConfigError(f"offline job targets unknown app {j.app_id!r}")
        self.thresholds.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _build(cls, data, where: str):
    if data is None:
        return cls() if not any(f.default is f.default_factory for f in fields(cls)) else cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key {unknown[0]!r}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    nested = {
        "catalog": lambda d: _build(CatalogConfig, d, "catalog"),
        "workload": lambda d: _build(WorkloadConfig, d, "workload"),
        "thresholds": lambda d: _build(Thresholds, d, "thresholds"),
        "interference": lambda d: _build(InterferenceConfig, d, "interference"),
        "apps": lambda d: [_build(AppConfig, a, f"apps[{i}]") for i, a in enumerate(d or [])],
        "offline": lambda d: [_build(OfflineJobConfig, j, f"offline[{i}]") for i, j in enumerate(d or [])],
    }
    for key, fn in nested.items():
        if key in data:
            data[key] = fn(data[key])
    cfg = _build(ScenarioConfig, data, "config")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed YAML: {e}") from None
    cfg = config_from_dict(data)
    cfg._base_dir = Path(path).resolve().parent
    return cfg


def _resolve(cfg: ScenarioConfig, p: str) -> Path:
    path = Path(p)
    if not path.is_absolute():
        path = getattr(cfg, "_base_dir", Path.cwd()) / path
    return path


def build_catalog(cfg: ScenarioConfig) -> Catalog:
    cc = cfg.catalog
    if cc.profiles:
        path = _resolve(cfg, cc.profiles)
        if not path.exists():
            raise ConfigError(f"profile file not found: {path}")
        return load_profiles(path)
    if cc.builtin == "resnet50":
        arch = resnet50_like(app_ids=[a.app_id for a in cfg.apps])
        return Catalog([arch], generate_variants(arch, default_hardware(), cc.batches))
    if cc.builtin == "offline_cpu":
        return offline_cpu_catalog([a.app_id for a in cfg.apps])
    raise ConfigError(f"unknown builtin catalog {cc.builtin!r}")


def offline_cpu_catalog(app_ids=("default",)) -> Catalog:
    """A single CPU ResNet50-like variant: 200 ms, 5 QPS, 4 cores."""
    from .catalog import HardwareSpec, ModelArchitecture, ProfileModel

    arch = ModelArchitecture("resnet50", task="classification", app_ids=frozenset(app_ids),
                             declared_accuracy=0.76, base_latency_ms=200.0, mem_gb=1.0, cpu_cores=4.0)
    hw = HardwareSpec("CPU", speedup=1.0, pipeline_factor=1.0, mem_factor=2.0, load_ms_per_gb=750.0)
    return Catalog([arch], generate_variants(arch, [hw], [1], ProfileModel()))


def build_trace(cfg: ScenarioConfig) -> ArrivalTrace:
    wl = cfg.workload
    app = next((a for a in cfg.apps if a.app_id == wl.app_id), cfg.apps[0])
    tmpl = app.template()
    if wl.kind == "pattern":
        return gen_pattern(wl.pattern, cfg.horizon_s, cfg.seed, wl.params, tmpl)
    path = _resolve(cfg, wl.trace_path)
    if not path.exists():
        raise ConfigError(f"trace file not found: {path}")
    if wl.kind == "replay":
        return replay_trace(path, wl.qps_min, wl.qps_max, cfg.horizon_s, cfg.seed, tmpl)
    return load_arrivals(path)
