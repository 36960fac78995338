"""Efficiency metrics: analytic FLOPs, parameters and peak memory, host latency,
modeled energy."""
from __future__ import annotations

import csv
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env
from .plan import Plan, layer_flops, layer_params

TEACHER_FLOPS_REF = 681.84e6
TEACHER_ENERGY_REF = 7.62  # mAh per 5000 inferences
ENERGY_INFERENCES = 5000
MB = float(1 << 20)


@dataclass
class CostBreakdown:
    rows: dict[str, tuple[int, int]]  # block -> (flops, params)
    modules: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def flops(self) -> int:
        return sum(f for f, _ in self.rows.values())

    @property
    def params(self) -> int:
        return sum(p for _, p in self.rows.values())

    def shares(self) -> dict[str, tuple[float, float]]:
        tf, tp = self.flops, self.params
        return {
            block: (100.0 * f / tf if tf else 0.0, 100.0 * p / tp if tp else 0.0)
            for block, (f, p) in self.rows.items()
        }

    def to_csv(self, path) -> None:
        shares = self.shares()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["block", "flops", "params", "flops_pct", "params_pct"])
            for block, (f, p) in self.rows.items():
                fs, ps = shares[block]
                w.writerow([block, f, p, f"{fs:.4f}", f"{ps:.4f}"])
            w.writerow(["total", self.flops, self.params, "100.0000", "100.0000"])


@dataclass
class EfficiencyMetrics:
    flops: int
    params: int
    latency_ms: float
    latency_iqr_ms: float
    energy_mAh: float
    memory_MB: float
    size_MB: float


def breakdown(plan: Plan) -> CostBreakdown:
    rows: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    modules: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    for spec in plan.specs():
        f, p = layer_flops(spec) * spec.uses, layer_params(spec)
        for table, key in ((rows, spec.block), (modules, spec.module)):
            table[key][0] += f
            table[key][1] += p
    return CostBreakdown({k: tuple(v) for k, v in rows.items()},
                         {k: tuple(v) for k, v in modules.items()})


def _plan_of(obj, schema=None) -> Plan:
    if isinstance(obj, Plan):
        return obj
    from . import student, teacher

    if isinstance(obj, student.DesignPoint):
        if schema is None:
            raise ValueError("a schema is needed to profile a design point")
        return student.student_plan(obj, schema)
    if isinstance(obj, student.StudentNet):
        return student.student_plan(obj.design, obj.schema)
    if isinstance(obj, teacher.TeacherNet):
        return teacher.teacher_plan(obj.schema)
    raise TypeError(f"cannot profile {type(obj).__name__}")


def estimate_flops(obj, schema=None) -> CostBreakdown:
    """Per-block FLOPs/params for a plan, net, or design point (+ schema)."""
    return breakdown(_plan_of(obj, schema))


def count_params(obj, schema=None) -> int:
    return _plan_of(obj, schema).total_params()


def estimate_peak_memory(obj, schema=None) -> float:
    """4 bytes per parameter plus 4 bytes per simultaneously live activation, in MB."""
    plan = _plan_of(obj, schema)
    return 4.0 * (plan.total_params() + plan.peak_live_elements()) / MB


def model_energy(flops: float, energy_per_flop: float | None = None) -> float:
    """mAh for 5000 inferences, calibrated so the teacher reference costs 7.62 mAh."""
    if flops < 0:
        raise ValueError("flops must be non-negative")
    if energy_per_flop is None:
        return TEACHER_ENERGY_REF * (flops / TEACHER_FLOPS_REF)
    return ENERGY_INFERENCES * flops * energy_per_flop


HOST_FLOPS_PER_MS = 5.0e6  # nominal batch-1 throughput for the analytic latency mode


def analytic_latency_ms(flops: float) -> float:
    """Deterministic latency stand-in proportional to FLOPs."""
    return flops / HOST_FLOPS_PER_MS


@dataclass
class LatencyResult:
    median_ms: float
    iqr_ms: float
    samples_ms: np.ndarray


def measure_latency(net, frames: env.Frames, n_runs: int = 100, warmup_frac: float = 0.1) -> LatencyResult:
    """Batch-1 forward latency; the first 10% of runs are discarded as warmup."""
    if n_runs < 100:
        raise ValueError("n_runs must be >= 100")
    warm = max(1, int(n_runs * warmup_frac))
    one = frames[0:1]
    forward = getattr(net, "forward", None)
    if forward is None:
        raise TypeError("net has no forward method")
    times = np.empty(n_runs)
    for i in range(n_runs):
        start = time.perf_counter()
        forward(one)
        times[i] = time.perf_counter() - start
    if hasattr(net, "release"):
        net.release()
    kept = times[warm:] * 1e3
    q1, med, q3 = np.percentile(kept, [25, 50, 75])
    return LatencyResult(float(med), float(q3 - q1), kept)


def profile(net, frames: env.Frames, n_runs: int = 100, size_bytes: int | None = None) -> EfficiencyMetrics:
    plan = _plan_of(net)
    flops = plan.total_flops()
    lat = measure_latency(net, frames, n_runs)
    if size_bytes is None:
        from .student import StudentNet, checkpoint_size

        size_bytes = (checkpoint_size(net.design, net.schema, net.seed, plan.total_params())
                      if isinstance(net, StudentNet) else 4 * plan.total_params())
    return EfficiencyMetrics(
        flops=flops, params=plan.total_params(), latency_ms=lat.median_ms,
        latency_iqr_ms=lat.iqr_ms, energy_mAh=model_energy(flops),
        memory_MB=estimate_peak_memory(plan), size_MB=size_bytes / MB,
    )


def read_breakdown_csv(path) -> CostBreakdown:
    rows = {}
    with open(Path(path), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["block"] != "total":
                rows[row["block"]] = (int(row["flops"]), int(row["params"]))
    return CostBreakdown(rows)
