from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from paretodistill import env, search
from paretodistill.plan import Plan, PlanEntry
from paretodistill.profiler import (
    TEACHER_FLOPS_REF,
    count_params,
    estimate_flops,
    estimate_peak_memory,
    measure_latency,
    model_energy,
    profile,
    read_breakdown_csv,
)
from paretodistill.student import DesignPoint, build_student, minimal_design, student_plan
from paretodistill.teacher import teacher_plan

MB = 2.0**20


def designs():
    return st.integers(0, 2**32 - 1).map(lambda s: search.random_design(np.random.default_rng(s)))


# -- FLOPs / params ----------------------------------------------------------------

def test_dense_flops_and_params():
    p = Plan()
    p.add("fc", "dense", {"in": 1024, "out": 1024}, block="B")
    assert estimate_flops(p).flops == 1_049_600
    q = Plan()
    q.add("fc", "dense", {"in": 2, "out": 3}, block="B")
    assert count_params(q) == 9


def test_teacher_lstm_row():
    bd = estimate_flops(teacher_plan(env.make_schema(1.0)))
    lstm = [s for s in teacher_plan(env.make_schema(1.0)).specs() if s.kind == "lstm-cell"]
    assert len(lstm) == 1
    assert bd.rows["LSTM"][1] == 8_392_704
    assert bd.rows["LSTM"][0] == 8_392_704 * lstm[0].uses


def test_teacher_total_params():
    assert 14.8e6 <= count_params(teacher_plan(env.make_schema(1.0))) <= 18.1e6


def test_profiles_nets_and_designs(desk_schema):
    net = build_student(minimal_design(), desk_schema, 0)
    assert estimate_flops(net).flops == estimate_flops(minimal_design(), desk_schema).flops
    with pytest.raises(ValueError):
        estimate_flops(minimal_design())
    with pytest.raises(TypeError):
        estimate_flops(object())


@settings(max_examples=25, deadline=None)
@given(designs())
def test_shares_sum_to_100(design):
    shares = estimate_flops(design, env.make_schema(1.0)).shares()
    assert abs(sum(f for f, _ in shares.values()) - 100.0) <= 0.01
    assert abs(sum(p for _, p in shares.values()) - 100.0) <= 0.01


def _widen(design: DesignPoint, field: str, i: int | None) -> DesignPoint:
    value = getattr(design, field)
    if i is None:
        return dataclasses.replace(design, **{field: value + 1})
    widened = list(value)
    widened[i] += 1
    return dataclasses.replace(design, **{field: tuple(widened)})


@settings(max_examples=25, deadline=None)
@given(designs(), st.data())
def test_flops_strictly_monotone_in_widths(design, data):
    sch = env.make_schema(1.0)
    base = student_plan(design, sch).total_flops()
    slots = [(f, None) for f in ("token_dim", "attention_dim", "action_fc")]
    for f in ("role_feat_trans", "img_feat_trans", "concat_feat_trans", "communicate_feat_trans"):
        slots += [(f, i) for i in range(len(getattr(design, f)))]
    field, i = data.draw(st.sampled_from(slots))
    top = {"token_dim": 224, "attention_dim": 128, "action_fc": 256, "img_feat_trans": 1024}
    current = getattr(design, field) if i is None else getattr(design, field)[i]
    assume(current < top.get(field, 512))
    assert student_plan(_widen(design, field, i), sch).total_flops() > base


def test_breakdown_csv_roundtrip(tmp_path):
    bd = estimate_flops(teacher_plan(env.make_schema(1.0)))
    bd.to_csv(tmp_path / "b.csv")
    back = read_breakdown_csv(tmp_path / "b.csv")
    assert back.rows == bd.rows


# -- memory ------------------------------------------------------------------------

def test_memory_single_dense():
    p = Plan(inputs={"x": 10})
    p.add("fc", "dense", {"in": 10, "out": 10}, inputs=("x",), out_size=10)
    assert estimate_peak_memory(p) == (110 * 4 + (10 + 10) * 4) / MB


def _without_block(plan: Plan, block: str) -> Plan:
    """The plan with every layer of ``block`` deleted, references to them dropped, and
    layers that only fed the deleted block removed as dead code."""
    was_read = {i for e in plan.entries for i in e.inputs}
    gone = {e.spec.name for e in plan.entries if e.spec.block == block}
    while True:
        kept = [e for e in plan.entries if e.spec.name not in gone]
        read = {i for e in kept for i in e.inputs if i not in gone}
        dead = {e.spec.name for e in kept if e.spec.name in was_read and e.spec.name not in read}
        if not dead:
            break
        gone |= dead
    sub = Plan()
    for e in kept:
        sub.entries.append(PlanEntry(e.spec, tuple(i for i in e.inputs if i not in gone), e.out_size))
    sub.inputs = {k: v for k, v in plan.inputs.items() if k in read}
    return sub


@settings(max_examples=25, deadline=None)
@given(designs())
def test_memory_monotone_under_block_removal(design):
    plan = student_plan(design, env.make_schema(1.0))
    full = estimate_peak_memory(plan)
    for block in {s.block for s in plan.specs()}:
        assert full >= estimate_peak_memory(_without_block(plan, block))


def test_width_space_layer_removal_is_not_monotone():
    # dropping a narrow last communicate layer widens the heads' fan-in
    design = DesignPoint(196, 93, (92, 101), (106,), (744,), (676, 938, 274), 168)
    shorter = dataclasses.replace(design, communicate_feat_trans=(676, 938))
    sch = env.make_schema(1.0)
    assert estimate_peak_memory(shorter, sch) > estimate_peak_memory(design, sch)


def test_fa_student_memory_below_teacher():
    # FA-scale: sampled designs whose FLOPs land within 3% of 45.74M
    sch = env.make_schema(1.0)
    teacher = estimate_peak_memory(teacher_plan(sch))
    found = 0
    for seed in range(12):
        design = search.sample_design_in_interval(6, TEACHER_FLOPS_REF, seed, sch)
        if abs(student_plan(design, sch).total_flops() / 45.74e6 - 1) <= 0.03:
            found += 1
            assert estimate_peak_memory(design, sch) < teacher
    assert found >= 3


# -- energy ------------------------------------------------------------------------

def test_energy_examples():
    assert model_energy(681.84e6) == 7.62
    fa = model_energy(45.74e6)
    assert abs(fa - 0.511) < 0.001
    assert abs(fa - 0.49) / 0.49 <= 0.15
    assert model_energy(0) == 0
    epf = 7.62 / (5000 * 681.84e6)
    assert model_energy(681.84e6, epf) == pytest.approx(7.62, rel=1e-12)
    with pytest.raises(ValueError):
        model_energy(-1)


# -- latency -----------------------------------------------------------------------

def test_latency_positive_with_iqr(desk_schema):
    net = build_student(minimal_design(), desk_schema, 0)
    res = measure_latency(net, env.generate_frames(desk_schema, 0, 4), 100)
    assert res.median_ms > 0 and res.iqr_ms >= 0
    assert len(res.samples_ms) == 90
    with pytest.raises(ValueError):
        measure_latency(net, env.generate_frames(desk_schema, 0, 4), 50)


def test_latency_repeatable(desk_schema):
    design = search.sample_design_in_interval(8, TEACHER_FLOPS_REF, 3, env.make_schema(1.0))
    net = build_student(design, desk_schema, 0)
    frames = env.generate_frames(desk_schema, 0, 4)
    a = measure_latency(net, frames, 200).median_ms
    b = measure_latency(net, frames, 200).median_ms
    assert abs(a - b) / min(a, b) <= 0.25


def test_latency_tracks_flops(desk_schema):
    full = env.make_schema(1.0)
    frames = env.generate_frames(desk_schema, 0, 4)
    lat, flops = [], []
    for k, index in enumerate((0, 3, 6, 9, 12, 15, 17, 19)):
        design = search.sample_design_in_interval(index, TEACHER_FLOPS_REF, 100 + k, full)
        net = build_student(design, desk_schema, 0)
        lat.append(measure_latency(net, frames, 100).median_ms)
        flops.append(student_plan(design, desk_schema).total_flops())
    assert spearmanr(lat, flops).statistic > 0.8


def test_profile_fields(desk_schema):
    net = build_student(minimal_design(), desk_schema, 0)
    m = profile(net, env.generate_frames(desk_schema, 0, 4))
    assert m.flops == student_plan(minimal_design(), desk_schema).total_flops()
    assert m.params == net.param_count()
    assert m.latency_ms > 0 and m.energy_mAh > 0 and m.memory_MB > 0 and m.size_MB > 0

