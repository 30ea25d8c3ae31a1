from __future__ import annotations

import itertools

import pytest
from hypothesis import given, strategies as st

from modelless.catalog import (
    DEFAULT_COST_PER_GB_S,
    Catalog,
    CatalogError,
    HardwareSpec,
    ModelArchitecture,
    ProfileModel,
    VariantProfile,
    default_hardware,
    dump_profiles,
    generate_variants,
    load_profiles,
    parse_profiles,
    resnet50_like,
    example_variants,
)

POW2 = [1, 2, 4, 8, 16, 32, 64]

EXAMPLE_FILE = """variant_id,arch_id,hardware,optimizer,max_batch,accuracy,load_latency_ms,cost_rate,saturation_qps,resources,latencies
A,resnet50,CPU,none,1,0.76,0,1,5,cpu_cores=4,cpu_mem_gb=2,1:200
B,resnet50,ACCEL,graph_optimized,1,0.76,0,3,100,accel_cores=1,1:20
C,resnet50,GPU,graph_optimized,1,0.76,0,16,800,gpu_mem_gb=2,1:15
"""


def test_single_combination():
    arch = resnet50_like()
    vs = generate_variants(arch, [HardwareSpec("CPU")], [1])
    assert len(vs) == 1
    assert vs[0].hardware == "CPU" and vs[0].max_batch == 1


def test_full_grid_count_matches_enumeration():
    hw = default_hardware()
    vs = generate_variants(resnet50_like(), hw, POW2)
    grid = [(h.name, o, b) for h in hw for o, b in itertools.product(h.optimizers, POW2)]
    assert len(vs) == len(grid)
    assert sorted((v.hardware, v.optimizer, v.max_batch) for v in vs) == sorted(grid)
    # Tens of variants for one architecture.
    assert 10 <= len(vs) < 100


def test_errors():
    with pytest.raises(CatalogError, match="no hardware"):
        generate_variants(resnet50_like(), [], [1])
    with pytest.raises(CatalogError, match="invalid batch"):
        generate_variants(resnet50_like(), default_hardware(), [1, 3])
    with pytest.raises(CatalogError, match="invalid batch"):
        generate_variants(resnet50_like(), default_hardware(), [128])


def test_generation_is_deterministic():
    a = dump_profiles(generate_variants(resnet50_like(), default_hardware(), POW2))
    b = dump_profiles(generate_variants(resnet50_like(), default_hardware(), POW2))
    assert a == b


def test_profiles_follow_parametric_formulas():
    arch = resnet50_like()
    model = ProfileModel()
    for hw in default_hardware():
        for v in generate_variants(arch, [hw], POW2, model):
            l0 = arch.base_latency_ms / hw.speedup * (model.graph_opt_factor if v.optimizer == "graph_optimized" else 1)
            for b, lat in v.inf_latency_ms.items():
                assert lat == pytest.approx(l0 * (model.fixed_fraction + (1 - model.fixed_fraction) * b), abs=1e-6)
            lb = l0 * (model.fixed_fraction + (1 - model.fixed_fraction) * v.max_batch)
            assert v.saturation_qps == pytest.approx(v.max_batch / (lb / 1000) * hw.pipeline_factor, abs=1e-5)
            mem = arch.mem_gb * hw.mem_factor * (1 + model.mem_per_batch * (v.max_batch - 1))
            assert v.cost_rate == pytest.approx(DEFAULT_COST_PER_GB_S[hw.name] * mem, abs=1e-8)
            assert v.accuracy == arch.declared_accuracy


def test_monotone_in_batch():
    for hw in default_hardware():
        for opt in hw.optimizers:
            spec = HardwareSpec(hw.name, hw.speedup, (opt,), hw.pipeline_factor, hw.mem_factor, hw.load_ms_per_gb)
            vs = sorted(generate_variants(resnet50_like(), [spec], POW2), key=lambda v: v.max_batch)
            sats = [v.saturation_qps for v in vs]
            assert sats == sorted(sats)
            assert len({v.latency_ms for v in vs}) == 1


def test_resources_only_for_own_hardware():
    for v in generate_variants(resnet50_like(), default_hardware(), [1, 8]):
        if v.hardware == "CPU":
            assert v.resources.get("gpu_mem_gb", 0) == 0
        else:
            assert v.resources.get("cpu_cores", 0) == 0
    with pytest.raises(CatalogError, match="resources"):
        VariantProfile("x", "m", "CPU", "none", 1, 0.5, {1: 10.0}, 0.0, 10.0, 1.0, {"gpu_mem_gb": 1.0})


@pytest.mark.parametrize("kw,field", [
    ({"saturation_qps": 0.0}, "saturation_qps"),
    ({"cost_rate": 0.0}, "cost_rate"),
    ({"load_latency_ms": -1.0}, "load_latency_ms"),
    ({"inf_latency_ms": {1: 10.0, 2: 5.0}, "max_batch": 2}, "inf_latency_ms"),
    ({"inf_latency_ms": {2: 5.0}, "max_batch": 2}, "inf_latency_ms"),
    ({"accuracy": 1.5}, "accuracy"),
])
def test_variant_invariants(kw, field):
    base = dict(variant_id="x", arch_id="m", hardware="CPU", optimizer="none", max_batch=1, accuracy=0.5,
                inf_latency_ms={1: 10.0}, load_latency_ms=0.0, saturation_qps=10.0, cost_rate=1.0)
    base.update(kw)
    with pytest.raises(CatalogError, match=field):
        VariantProfile(**base)


def test_arch_invariants():
    with pytest.raises(CatalogError):
        ModelArchitecture("m", declared_accuracy=1.2)
    with pytest.raises(CatalogError, match="duplicate arch_id"):
        Catalog([ModelArchitecture("m"), ModelArchitecture("m")])


def test_load_example_file(tmp_path):
    p = tmp_path / "t2.csv"
    p.write_text(EXAMPLE_FILE)
    cat = load_profiles(p)
    assert len(cat) == 3
    got = {v.variant_id: (v.latency_ms, v.saturation_qps, v.cost_rate) for v in cat}
    assert got == {"A": (200.0, 5.0, 1.0), "B": (20.0, 100.0, 3.0), "C": (15.0, 800.0, 16.0)}
    assert {v.variant_id: v for v in cat} == {v.variant_id: v for v in example_variants()}


def test_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    assert len(load_profiles(p)) == 0


def test_duplicate_and_malformed_rows():
    lines = EXAMPLE_FILE.splitlines()
    with pytest.raises(CatalogError, match="line 5: duplicate"):
        parse_profiles("\n".join(lines + [lines[1]]))
    with pytest.raises(CatalogError, match="line 3"):
        parse_profiles("\n".join([lines[0], lines[1], "B,resnet50,ACCEL"]))
    with pytest.raises(CatalogError, match="line 2: .*saturation_qps"):
        parse_profiles("\n".join([lines[0], lines[1].replace(",5,", ",0,")]))
    with pytest.raises(CatalogError, match="header"):
        parse_profiles("\n".join(lines[1:]))


@given(st.lists(st.sampled_from(POW2), min_size=1, max_size=4, unique=True),
       st.floats(10, 500), st.floats(0.1, 8))
def test_profile_round_trip(batches, base, mem):
    arch = ModelArchitecture("m", base_latency_ms=base, mem_gb=mem, declared_accuracy=0.7)
    vs = generate_variants(arch, default_hardware(), batches)
    back = parse_profiles(dump_profiles(vs))
    assert {v.variant_id: v for v in back} == {v.variant_id: v for v in vs}
