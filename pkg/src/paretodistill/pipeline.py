"""Glue between the search loop and the trainer/profiler, plus run artifacts."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

from . import env, profiler, search
from .dataset import Dataset
from .student import build_student, checkpoint_size, save_checkpoint, student_plan
from .teacher import teacher_plan
from .trainer import TrainConfig, evaluate_student, train_student

log = logging.getLogger(__name__)


@dataclass
class SearchInputs:
    train: Dataset
    val: Dataset
    train_config: TrainConfig
    search_config: search.SearchConfig

    @property
    def schema(self) -> env.ObservationSchema:
        return self.train.schema


def load_datasets(data_dir) -> tuple[Dataset, Dataset]:
    data_dir = Path(data_dir)
    for name in ("train.pdds", "val.pdds", "manifest.txt"):
        if not (data_dir / name).exists():
            raise FileNotFoundError(f"dataset missing: {data_dir / name}")
    return Dataset(data_dir / "train.pdds"), Dataset(data_dir / "val.pdds")


def distill_design(design, inputs: SearchInputs, seed: int, history_path=None):
    net = build_student(design, inputs.schema, seed)
    result = train_student(net, inputs.train, inputs.val, inputs.train_config, history_path)
    return net, result


def make_callbacks(inputs: SearchInputs):
    frames = latency_frames(inputs.schema, inputs.search_config.seed)

    def train_eval(design, seed):
        net, result = distill_design(design, inputs, seed)
        return result.final["overall_agree"], net

    def measure(design, net, perf):
        plan = student_plan(design, inputs.schema)
        flops, params = plan.total_flops(), plan.total_params()
        if inputs.search_config.latency_mode == "analytic":
            latency = profiler.analytic_latency_ms(flops)
        else:
            latency = profiler.measure_latency(net, frames, inputs.search_config.latency_runs).median_ms
        size = checkpoint_size(design, inputs.schema, net.seed, params)
        metrics = search.MetricsVector(
            P=float(perf), L=latency, B=profiler.model_energy(flops),
            M=profiler.estimate_peak_memory(plan), S=size / profiler.MB, flops=flops,
            design=design.canonical(),
        )
        return metrics, params

    return train_eval, measure


def run_search(inputs: SearchInputs, out_dir) -> search.FrontierState:
    """Full search run writing frontier.csv, frontier.svg, checkpoints and the manifest."""
    from .plotting import frontier_scatter

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    teacher_flops = teacher_plan(inputs.schema).total_flops()
    train_eval, measure = make_callbacks(inputs)

    def on_round(state):
        write_frontier(out, state)

    state = search.run_search(inputs.search_config, train_eval, measure, teacher_flops,
                              inputs.schema, on_round)
    write_frontier(out, state)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for cand in state.frontier:
        if cand.net is not None:
            path = ckpt_dir / f"candidate_{cand.candidate_id:04d}.fadl"
            save_checkpoint(cand.net, path)
            cand.checkpoint = str(path)
    frontier_scatter(state.evaluated, out / "frontier.svg")
    return state


def write_frontier(out: Path, state: search.FrontierState) -> None:
    ids = {c.candidate_id for c in state.frontier}
    search.write_frontier_csv(out / "frontier.csv", state.evaluated, ids)


def search_manifest(state: search.FrontierState, resolved: dict) -> dict:
    items = dict(resolved)
    items["rounds_run"] = state.round
    items["delta_history"] = ",".join("inf" if math.isinf(d) else repr(d) for d in state.deltas)
    items["stop_reason"] = state.stop_reason
    items["frontier_ids"] = ",".join(str(c.candidate_id) for c in state.frontier)
    items["unreachable"] = ",".join(f"{t}:{i}" for t, i in state.unreachable)
    return items


def dominance_violations(state: search.FrontierState) -> list[tuple[int, int]]:
    """Brute force: (dominator, frontier member) pairs over every evaluated candidate."""
    bad = []
    for f in state.frontier:
        for c in state.evaluated:
            if search.dominates(c.metrics, f.metrics):
                bad.append((c.candidate_id, f.candidate_id))
    return bad


def evaluate_checkpoint(net, val: Dataset, max_samples: int = 0):
    return evaluate_student(net, val, 1.0, max_samples)


def latency_frames(schema, seed: int = 0) -> env.Frames:
    return env.generate_frames(schema, seed, 16, stream=7)

