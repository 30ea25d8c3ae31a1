"""Ready-made scenario configs for the reference experiments."""

from __future__ import annotations

from .config import (
    AppConfig,
    CatalogConfig,
    OfflineJobConfig,
    ScenarioConfig,
    WorkloadConfig,
)

RESNET_SLO_MS = 300.0


def _resnet_base(name: str, policy: str, seed: int, horizon_s: float, workload: WorkloadConfig) -> ScenarioConfig:
    return ScenarioConfig(
        name=name,
        seed=seed,
        horizon_s=horizon_s,
        policy=policy,
        catalog=CatalogConfig(builtin="resnet50", batches=[1, 8]),
        apps=[AppConfig("classify", "resnet50", RESNET_SLO_MS, 0.7)],
        fleet={"CPU": 1, "ACCEL": 1, "GPU": 1},
        workload=workload,
    )


def flat_low(policy: str = "modelless", seed: int = 1, horizon_s: float = 240.0) -> ScenarioConfig:
    return _resnet_base("flat_low", policy, seed, horizon_s,
                        WorkloadConfig(kind="pattern", pattern="flat_low", params={"rate": 4.0}))


def fluctuating(policy: str = "modelless", seed: int = 1, horizon_s: float = 240.0) -> ScenarioConfig:
    params = {"low": 4.0, "high": 80.0, "spikes": [[60.0, 90.0], [150.0, 180.0]]}
    return _resnet_base("fluctuating", policy, seed, horizon_s,
                        WorkloadConfig(kind="pattern", pattern="fluctuating", params=params))


def offline_colocation(offline: bool = True, seed: int = 1, horizon_s: float = 100.0) -> ScenarioConfig:
    """One 12-core CPU worker with two preloaded online instances and one
    500-input offline job submitted at t=0."""
    params = {"low": 3.0, "high": 8.0, "spikes": [[20.0, 40.0], [60.0, 80.0]]}
    return ScenarioConfig(
        name="offline_colocation" + ("" if offline else "_online_only"),
        seed=seed,
        horizon_s=horizon_s,
        policy="modelless",
        catalog=CatalogConfig(builtin="offline_cpu", batches=[1]),
        apps=[AppConfig("classify", "resnet50", 500.0, 0.7)],
        fleet={"CPU": 1},
        worker_templates={"CPU": {"cpu_cores": 12.0, "cpu_mem_gb": 64.0}},
        workload=WorkloadConfig(kind="pattern", pattern="fluctuating", params=params),
        model_autoscale=False,
        vm_autoscale=False,
        offline=[OfflineJobConfig("classify", 500, 10, 0.0)],
        offline_enabled=offline,
        preload={"resnet50-cpu-base-b1": 2},
    )


BUILDERS = {
    "flat_low": flat_low,
    "fluctuating": fluctuating,
    "offline_colocation": offline_colocation,
}
