"""Pareto dominance, frontier maintenance, stratified design sampling and the
frontier-discrepancy search loop."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env
from .student import RANGES, LOWER, DesignPoint, student_plan

log = logging.getLogger(__name__)

OBJECTIVES = ("P", "L", "B", "M", "S")
# +1 maximise, -1 minimise
DIRECTIONS = np.array([1, -1, -1, -1, -1])
BUDGET_RANGE = (0.01, 0.20)
N_INTERVALS = 20
FRONTIER_COLUMNS = ("candidate_id", "round", "design", "flops", "params", "P_agreement",
                    "latency_ms", "energy_mAh", "memory_MB", "size_MB", "on_frontier")


class IntervalUnreachableError(RuntimeError):
    pass


class ConstraintInfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsVector:
    P: float
    L: float
    B: float
    M: float
    S: float
    flops: int = 0
    design: str = ""

    def values(self) -> np.ndarray:
        return np.array([self.P, self.L, self.B, self.M, self.S], dtype=float)


def _as_array(u) -> np.ndarray:
    return u.values() if isinstance(u, MetricsVector) else np.asarray(u, dtype=float)


def dominates(u, v, directions=DIRECTIONS) -> bool:
    """u dominates v: no worse on every axis and strictly better on at least one."""
    a = _as_array(u) * directions[: len(_as_array(u))]
    b = _as_array(v) * directions[: len(_as_array(v))]
    return bool(np.all(a >= b) and np.any(a > b))


def pareto_mask(values: np.ndarray, directions=DIRECTIONS) -> np.ndarray:
    """Boolean mask of non-dominated rows of an (n, d) objective array."""
    x = np.asarray(values, dtype=float) * directions[: values.shape[1]]
    n = x.shape[0]
    keep = np.ones(n, dtype=bool)
    for i in range(n):
        ge = np.all(x >= x[i], axis=1)
        gt = np.any(x > x[i], axis=1)
        if np.any(ge & gt):
            keep[i] = False
    return keep


def pareto_filter(points: list, directions=DIRECTIONS) -> list:
    """Non-dominated points in their original order; duplicates are all kept."""
    if not points:
        raise ValueError("pareto_filter needs at least one point")
    values = np.stack([_as_array(p) for p in points])
    keep = pareto_mask(values, directions)
    return [p for p, k in zip(points, keep) if k]


def normalize_objectives(points, reference) -> np.ndarray:
    """Per-axis min-max scaling over ``reference``; constant axes map to 0."""
    ref = np.atleast_2d(np.asarray([_as_array(p) for p in reference], dtype=float))
    if ref.size == 0:
        raise ValueError("reference set is empty")
    pts = np.atleast_2d(np.asarray([_as_array(p) for p in points], dtype=float))
    lo, hi = ref.min(axis=0), ref.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (pts - lo) / safe, 0.0)
    return np.clip(out, 0.0, 1.0)


def chamfer_distance(A, B) -> float:
    """Symmetric Chamfer distance after joint min-max normalisation over A and B."""
    if len(A) == 0 or len(B) == 0:
        raise ValueError("chamfer distance needs two non-empty sets")
    ref = list(A) + list(B)
    a = normalize_objectives(A, ref)
    b = normalize_objectives(B, ref)
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


# -- sampling -------------------------------------------------------------------

def interval_bounds(index: int, teacher_flops: float, n_intervals: int = N_INTERVALS,
                    budget=BUDGET_RANGE) -> tuple[float, float]:
    if not 0 <= index < n_intervals:
        raise ValueError(f"interval index must be in [0, {n_intervals}), got {index}")
    lo_f, hi_f = budget
    step = (hi_f - lo_f) / n_intervals
    lo = teacher_flops * (lo_f + index * step)
    hi = teacher_flops * (hi_f if index == n_intervals - 1 else lo_f + (index + 1) * step)
    return lo, hi


def random_design(rng: np.random.Generator) -> DesignPoint:
    """Uniform draw: layer count first, then each width over its range."""
    kw = {}
    for name, spec in RANGES.items():
        if len(spec) == 1:
            kw[name] = int(rng.integers(LOWER, spec[0] + 1))
        else:
            lo, hi, caps = spec
            n = int(rng.integers(lo, hi + 1))
            kw[name] = tuple(int(rng.integers(LOWER, caps[i] + 1)) for i in range(n))
    return DesignPoint(**kw)


def sample_design_in_interval(index: int, teacher_flops: float, seed: int,
                              schema: env.ObservationSchema | None = None,
                              max_attempts: int = 10_000, n_intervals: int = N_INTERVALS,
                              budget=BUDGET_RANGE) -> DesignPoint:
    """Rejection-sample a design whose FLOPs fall in interval ``index``.

    The top interval is closed on the right; all others are half-open.
    """
    schema = schema if schema is not None else env.make_schema(1.0)
    lo, hi = interval_bounds(index, teacher_flops, n_intervals, budget)
    closed = index == n_intervals - 1
    rng = np.random.default_rng([seed, index])
    for _ in range(max_attempts):
        design = random_design(rng)
        flops = student_plan(design, schema).total_flops()
        if lo <= flops < hi or (closed and flops == hi):
            return design
    raise IntervalUnreachableError(
        f"interval {index} [{lo:.0f}, {hi:.0f}) not reached in {max_attempts} attempts"
    )


# -- search loop ----------------------------------------------------------------

@dataclass
class Candidate:
    candidate_id: int
    round: int
    design: DesignPoint
    metrics: MetricsVector
    params: int
    seed: int
    net: object = None
    checkpoint: str = ""
    on_frontier: bool = False


@dataclass
class SearchConfig:
    budget: tuple[float, float] = BUDGET_RANGE
    intervals: int = N_INTERVALS
    k: int = 20
    epsilon: float = 0.05
    rounds: int = 10
    seed: int = 56
    max_attempts: int = 10_000
    latency_runs: int = 100
    latency_mode: str = "measured"  # or "analytic" for bit-reproducible runs
    threads: int = 1


@dataclass
class FrontierState:
    evaluated: list[Candidate] = field(default_factory=list)
    frontier: list[Candidate] = field(default_factory=list)
    previous: list[Candidate] = field(default_factory=list)
    deltas: list[float] = field(default_factory=list)
    round: int = 0
    stop_reason: str = ""
    unreachable: list[tuple[int, int]] = field(default_factory=list)


def pareto_filter_candidates(candidates: list[Candidate]) -> list[Candidate]:
    values = np.stack([c.metrics.values() for c in candidates])
    keep = pareto_mask(values)
    return [c for c, k in zip(candidates, keep) if k]


def run_search(config: SearchConfig, train_eval, measure, teacher_flops: float,
               schema: env.ObservationSchema, on_round=None) -> FrontierState:
    """Sample, distill, evaluate and update the frontier until it stabilises.

    ``train_eval(design, seed)`` distills one student and returns ``(P, net)``;
    calls may run on worker threads. ``measure(design, net, P)`` returns
    ``(MetricsVector, params)`` and always runs serially on the calling thread
    (latency timing needs the core to itself).
    """
    state = FrontierState()
    next_id = 0
    for t in range(1, config.rounds + 1):
        state.round = t
        jobs = []
        for j in range(config.k):
            cid = next_id + j
            interval = cid % config.intervals
            try:
                design = sample_design_in_interval(interval, teacher_flops,
                                                   config.seed * 1_000_003 + cid, schema,
                                                   config.max_attempts, config.intervals,
                                                   config.budget)
            except IntervalUnreachableError as exc:
                log.warning("%s", exc)
                state.unreachable.append((t, interval))
                continue
            jobs.append((cid, design, config.seed ^ cid))
        next_id += config.k
        if not jobs:
            raise IntervalUnreachableError(f"round {t}: every sampled interval was unreachable")
        if config.threads > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                trained = list(pool.map(lambda job: train_eval(job[1], job[2]), jobs))
        else:
            trained = [train_eval(design, seed) for _, design, seed in jobs]
        for (cid, design, seed), (perf, net) in zip(jobs, trained):
            metrics, params = measure(design, net, perf)
            state.evaluated.append(Candidate(cid, t, design, metrics, params, seed, net))
        state.previous = state.frontier
        state.frontier = pareto_filter_candidates(state.evaluated)
        ids = {c.candidate_id for c in state.frontier}
        for c in state.evaluated:
            c.on_frontier = c.candidate_id in ids
            if not c.on_frontier:
                c.net = None  # dominated candidates never re-enter the frontier
        if not state.previous:
            delta = math.inf
        else:
            delta = chamfer_distance([c.metrics for c in state.frontier],
                                     [c.metrics for c in state.previous])
        state.deltas.append(delta)
        log.info("round %d: %d evaluated, frontier %d, delta %s", t, len(state.evaluated),
                 len(state.frontier), delta)
        if on_round is not None:
            on_round(state)
        if delta < config.epsilon:
            state.stop_reason = f"delta {delta:.6g} < epsilon {config.epsilon}"
            break
    else:
        state.stop_reason = f"reached R={config.rounds} rounds"
    return state


# -- selection --------------------------------------------------------------------

@dataclass(frozen=True)
class Constraint:
    axis: str
    op: str  # "<", "<=", ">", ">="
    threshold: float

    @classmethod
    def parse(cls, text: str) -> "Constraint":
        for op in ("<=", ">=", "<", ">"):
            if op in text:
                axis, value = text.split(op, 1)
                axis = axis.strip()
                if axis not in OBJECTIVES:
                    raise ValueError(f"unknown constraint axis {axis!r}")
                return cls(axis, op, float(value))
        raise ValueError(f"bad constraint {text!r} (expected e.g. P>0.4 or L<0.5)")

    def ok(self, value: float) -> bool:
        return {"<": value < self.threshold, "<=": value <= self.threshold,
                ">": value > self.threshold, ">=": value >= self.threshold}[self.op]

    def miss(self, value: float) -> float:
        return max(0.0, value - self.threshold) if self.op in ("<", "<=") else max(0.0, self.threshold - value)


def select_agent(frontier: list, constraints: list[Constraint] = ()):
    """Best-P frontier member meeting every constraint.

    Ties break on lower latency, then lower FLOPs, then the design string.
    ``frontier`` holds MetricsVector or objects with a ``metrics`` attribute.
    """
    if not frontier:
        raise ValueError("frontier is empty")

    def mv(item) -> MetricsVector:
        return item.metrics if hasattr(item, "metrics") else item

    survivors = [f for f in frontier
                 if all(c.ok(getattr(mv(f), c.axis)) for c in constraints)]
    if not survivors:
        notes = []
        for c in constraints:
            best = min(frontier, key=lambda f: c.miss(getattr(mv(f), c.axis)))
            notes.append(f"{c.axis}{c.op}{c.threshold}: closest {getattr(mv(best), c.axis):.6g} "
                         f"({mv(best).design})")
        raise ConstraintInfeasibleError("no frontier member satisfies the constraints; " + "; ".join(notes))
    return min(survivors, key=lambda f: (-mv(f).P, mv(f).L, mv(f).flops, mv(f).design))


# -- CSV -------------------------------------------------------------------------

def write_frontier_csv(path, candidates: list[Candidate], frontier_ids: set[int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(FRONTIER_COLUMNS)
        for c in candidates:
            m = c.metrics
            w.writerow([c.candidate_id, c.round, c.design.canonical(), m.flops, c.params,
                        repr(m.P), repr(m.L), repr(m.B), repr(m.M), repr(m.S),
                        int(c.candidate_id in frontier_ids)])


def read_frontier_csv(path) -> list[Candidate]:
    out = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(FRONTIER_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            design = DesignPoint.parse(row["design"])
            metrics = MetricsVector(
                float(row["P_agreement"]), float(row["latency_ms"]), float(row["energy_mAh"]),
                float(row["memory_MB"]), float(row["size_MB"]), int(row["flops"]),
                design.canonical(),
            )
            cand = Candidate(int(row["candidate_id"]), int(row["round"]), design, metrics,
                             int(row["params"]), 0)
            cand.on_frontier = row["on_frontier"].strip() == "1"
            out.append(cand)
    return out
