"""Command-line entry point.

Subcommands compose through files: ``gen-data`` writes a dataset directory that
``search``, ``distill`` and ``eval`` read; ``search`` writes a frontier CSV that
``frontier`` and ``select`` read.

Errors are printed as one line on stderr: ``error: <kind>: <message>``.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import __version__, env, profiler, runtime, scoring, search
from .dataset import PRESETS, VERSION as DATASET_VERSION, generate_dataset, write_manifest
from .student import CKPT_VERSION, DesignPoint, load_checkpoint, save_checkpoint
from .teacher import build_teacher, teacher_plan
from .trainer import TrainConfig

log = logging.getLogger("paretodistill")

# flat configuration: key -> (type, default)
CONFIG_KEYS: dict[str, tuple[type, object]] = {
    "scale": (float, 0.25),
    "seed": (int, 56),
    "teacher_seed": (int, 56),
    "data_preset": (str, "desk"),
    "n_train": (int, 0),  # 0 = take from data_preset
    "n_val": (int, 0),
    "train_preset": (str, "desk"),
    "lr": (float, 2e-4),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "batch": (int, 512),
    "t_max": (int, 0),  # 0 = take from train_preset
    "tau": (float, 4.0),
    "eval_every": (int, 0),
    "eval_samples": (int, 0),
    "budget_lo": (float, 0.01),
    "budget_hi": (float, 0.20),
    "intervals": (int, 20),
    "k": (int, 20),
    "epsilon": (float, 0.05),
    "rounds": (int, 10),
    "max_attempts": (int, 10_000),
    "latency_runs": (int, 100),
    "latency_mode": (str, "measured"),
    "constraints": (str, ""),
    "target_win_rate": (float, scoring.TARGET_WIN_RATE),
    "ref_latency": (str, "15,315"),
    "ref_memory": (str, "160,230"),
    "ref_energy": (str, "2,75"),
    "ref_size": (str, "7,80"),
}

TABLE10_ROWS = [
    {"win_rate": "38.67%", "time_s": "2.33", "memory_MB": "156.71", "energy_mAh": "0.56", "size_MB": "11.59"},
    {"win_rate": "36.5%", "time_s": "8.35", "memory_MB": "162.59", "energy_mAh": "1.12", "size_MB": "12.87"},
    {"win_rate": "30.83%", "time_s": "1.84", "memory_MB": "155.77", "energy_mAh": "0.34", "size_MB": "5.32"},
    {"win_rate": "20%", "time_s": "4.7", "memory_MB": "165.25", "energy_mAh": "0.73", "size_MB": "4.59"},
    {"win_rate": "17.83%", "time_s": "4.29", "memory_MB": "165.05", "energy_mAh": "0.46", "size_MB": "1.52"},
]


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# -- configuration ----------------------------------------------------------------

def parse_config_lines(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError("config", f"line {n}: expected key=value, got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(config_file=None, overrides=()) -> dict:
    raw: dict[str, str] = {}
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise CliError("missing-file", f"config file not found: {path}")
        raw.update(parse_config_lines(path.read_text(encoding="utf-8")))
    for item in overrides:
        raw.update(parse_config_lines(item))
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise CliError("config", f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for key, (typ, default) in CONFIG_KEYS.items():
        if key in raw:
            try:
                cfg[key] = typ(raw[key])
            except ValueError:
                raise CliError("config", f"{key}={raw[key]!r} is not a valid {typ.__name__}") from None
        else:
            cfg[key] = default
    if cfg["data_preset"] not in PRESETS:
        raise CliError("config", f"data_preset must be one of {sorted(PRESETS)}")
    n_train, n_val = PRESETS[cfg["data_preset"]]
    cfg["n_train"] = cfg["n_train"] or n_train
    cfg["n_val"] = cfg["n_val"] or n_val
    try:
        base = TrainConfig.from_preset(cfg["train_preset"])
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    cfg["t_max"] = cfg["t_max"] or base.t_max
    cfg["eval_every"] = cfg["eval_every"] or base.eval_every
    if cfg["latency_mode"] not in ("measured", "analytic"):
        raise CliError("config", "latency_mode must be measured or analytic")
    if not 0 < cfg["scale"] <= 1:
        raise CliError("config", f"scale must be in (0, 1], got {cfg['scale']}")
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    kw = {k: cfg[k] for k in ("seed", "lr", "beta1", "beta2", "eps", "batch", "t_max", "tau",
                              "eval_every", "eval_samples") if k in names}
    return TrainConfig(preset=cfg["train_preset"], **kw)


def search_config(cfg: dict, threads: int) -> search.SearchConfig:
    return search.SearchConfig(
        budget=(cfg["budget_lo"], cfg["budget_hi"]), intervals=cfg["intervals"], k=cfg["k"],
        epsilon=cfg["epsilon"], rounds=cfg["rounds"], seed=cfg["seed"],
        max_attempts=cfg["max_attempts"], latency_runs=cfg["latency_runs"],
        latency_mode=cfg["latency_mode"], threads=threads,
    )


def reference_table(cfg: dict) -> scoring.ReferenceTable:
    pairs = {}
    for metric in scoring.METRICS:
        try:
            strong, weak = (float(v) for v in cfg[f"ref_{metric}"].split(","))
        except ValueError:
            raise CliError("config", f"ref_{metric} must be 'strong,weak'") from None
        pairs[metric] = (strong, weak)
    try:
        return scoring.ReferenceTable(pairs)
    except ValueError as exc:
        raise CliError("config", str(exc)) from None


def parse_constraints(items) -> list[search.Constraint]:
    out = []
    for item in items:
        for part in item.split(","):
            if part.strip():
                try:
                    out.append(search.Constraint.parse(part))
                except ValueError as exc:
                    raise CliError("config", str(exc)) from None
    return out


def run_dir(args, cfg: dict, kind: str) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path(args.out) / f"{kind}-{stamp}-s{cfg['seed']}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def manifest_items(cfg: dict, command: str) -> dict:
    items = {"command": command, "package_version": __version__,
             "dataset_format_version": DATASET_VERSION, "checkpoint_format_version": CKPT_VERSION}
    items.update(cfg)
    return items


# -- subcommands ------------------------------------------------------------------

def cmd_profile(args, cfg) -> int:
    from .plotting import breakdown_bars

    schema = env.make_schema(args.scale if args.scale is not None else cfg["scale"])
    if args.design:
        design = DesignPoint.parse(args.design)
        bd = profiler.estimate_flops(design, schema)
        name = "student"
        memory = profiler.estimate_peak_memory(design, schema)
    else:
        plan = teacher_plan(schema)
        bd = profiler.breakdown(plan)
        name = "teacher"
        memory = profiler.estimate_peak_memory(plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}_breakdown.csv"
    bd.to_csv(csv_path)
    breakdown_bars(bd, out / f"{name}_breakdown.svg", f"{name} cost breakdown (scale {schema.scale})")
    sys.stdout.write(csv_path.read_text(encoding="utf-8"))
    print(f"# flops={bd.flops} params={bd.params} energy_mAh={profiler.model_energy(bd.flops):.6g} "
          f"peak_memory_MB={memory:.6g}")
    return 0


def cmd_gen_data(args, cfg) -> int:
    schema = env.make_schema(cfg["scale"])
    out = Path(args.out)
    teacher = build_teacher(schema, cfg["teacher_seed"])
    try:
        manifest = generate_dataset(teacher, schema, cfg["seed"], cfg["n_train"], cfg["n_val"], out)
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    resolved = manifest_items(cfg, "gen-data")
    resolved.update(manifest)
    write_manifest(out / "manifest.txt", resolved)
    print(f"wrote {out} train={manifest['records_train']} val={manifest['records_val']} records")
    return 0


def _inputs(args, cfg, threads=1):
    from .pipeline import SearchInputs, load_datasets

    try:
        train, val = load_datasets(args.data)
    except FileNotFoundError as exc:
        raise CliError("missing-file", str(exc)) from None
    return SearchInputs(train, val, train_config(cfg), search_config(cfg, threads))


def cmd_search(args, cfg) -> int:
    from . import pipeline

    threads = runtime.worker_count(1)
    inputs = _inputs(args, cfg, threads)
    out = run_dir(args, cfg, "search")
    state = pipeline.run_search(inputs, out)
    write_manifest(out / "manifest.txt",
                   pipeline.search_manifest(state, manifest_items(cfg, "search") | {
                       "data": str(Path(args.data).resolve()), "threads": threads}))
    print(f"run={out} rounds={state.round} frontier={len(state.frontier)} "
          f"stop='{state.stop_reason}'")
    return 0


def cmd_distill(args, cfg) -> int:
    from . import pipeline

    inputs = _inputs(args, cfg)
    try:
        design = DesignPoint.parse(args.design)
    except ValueError as exc:
        raise CliError("design", str(exc)) from None
    out = run_dir(args, cfg, "distill")
    net, result = pipeline.distill_design(design, inputs, cfg["seed"], out / "history.csv")
    save_checkpoint(net, out / "student.fadl")
    write_manifest(out / "manifest.txt", manifest_items(cfg, "distill") | {
        "design": design.canonical(), "data": str(Path(args.data).resolve())})
    final = result.final
    print(f"checkpoint={out / 'student.fadl'} val_kl={final['val_kl']:.6g} "
          f"overall_agree={final['overall_agree']:.4f}")
    return 0


def cmd_eval(args, cfg) -> int:
    from .pipeline import evaluate_checkpoint, load_datasets
    from .student import CheckpointError

    try:
        net = load_checkpoint(args.checkpoint)
        _, val = load_datasets(args.data)
    except (FileNotFoundError, CheckpointError) as exc:
        raise CliError("input", str(exc)) from None
    report = evaluate_checkpoint(net, val, cfg["eval_samples"])
    print("head,kl,agreement")
    for name in env.HEAD_NAMES:
        print(f"{name},{report.kl[name]:.6g},{report.agreement[name]:.6f}")
    print(f"overall,{report.mean_kl:.6g},{report.overall_agreement:.6f}")
    return 0


def _read_candidates(path):
    if not Path(path).exists():
        raise CliError("missing-file", f"frontier CSV not found: {path}")
    try:
        return search.read_frontier_csv(path)
    except (ValueError, KeyError) as exc:
        raise CliError("input", f"{path}: {exc}") from None


def cmd_frontier(args, cfg) -> int:
    from .plotting import frontier_scatter

    cands = _read_candidates(args.csv)
    if not cands:
        raise CliError("input", f"{args.csv}: no candidates")
    front = search.pareto_filter_candidates(cands)
    ids = {c.candidate_id for c in front}
    for c in cands:
        c.on_frontier = c.candidate_id in ids
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    search.write_frontier_csv(out / "frontier.csv", cands, ids)
    frontier_scatter(cands, out / "frontier.svg")
    print(f"candidates={len(cands)} frontier={len(front)} svg={out / 'frontier.svg'}")
    return 0


def cmd_select(args, cfg) -> int:
    cands = _read_candidates(args.csv)
    front = [c for c in cands if c.on_frontier] or search.pareto_filter_candidates(cands)
    constraints = parse_constraints(args.constraint or ([cfg["constraints"]] if cfg["constraints"] else []))
    try:
        chosen = search.select_agent(front, constraints)
    except search.ConstraintInfeasibleError as exc:
        raise CliError("infeasible", str(exc)) from None
    m = chosen.metrics
    print("candidate_id,design,P_agreement,latency_ms,energy_mAh,memory_MB,size_MB")
    print(f"{chosen.candidate_id},{chosen.design.canonical()},{m.P!r},{m.L!r},{m.B!r},{m.M!r},{m.S!r}")
    return 0


def cmd_score(args, cfg) -> int:
    if args.table10:
        rows = TABLE10_ROWS
    elif args.csv:
        if not Path(args.csv).exists():
            raise CliError("missing-file", f"score CSV not found: {args.csv}")
        try:
            rows = scoring.read_score_csv(args.csv)
        except ValueError as exc:
            raise CliError("input", str(exc)) from None
    else:
        raise CliError("usage", "score needs --csv PATH or --table10")
    try:
        cards = scoring.score_rows(rows, reference_table(cfg), cfg["target_win_rate"])
    except (ValueError, KeyError) as exc:
        raise CliError("input", str(exc)) from None
    if args.output:
        scoring.write_score_csv(args.output, cards)
    scoring.write_score_csv(sys.stdout, cards)
    return 0


# -- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="paretodistill",
        description="Pareto-guided policy distillation pipeline (desk scale).",
        epilog="Config keys (key=value, via --config FILE or --set): " + ", ".join(CONFIG_KEYS),
    )
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="UTF-8 key=value file ('#' starts a comment)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("profile", parents=[common], help="teacher or student cost breakdown CSV")
    s.add_argument("--scale", type=float, help="schema scale (default: config scale)")
    s.add_argument("--design", help="profile a student design instead of the teacher")
    s.add_argument("--out", default="profile", help="output directory")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("gen-data", parents=[common], help="write the distillation dataset")
    s.add_argument("--out", required=True, help="dataset directory")
    s.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("search", cmd_search, "run the frontier search"),
                                 ("distill", cmd_distill, "distill one design point")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--data", required=True, help="dataset directory from gen-data")
        s.add_argument("--out", default="runs", help="parent directory for the run directory")
        s.add_argument("--run-dir", help="exact run directory (overrides --out naming)")
        if name == "distill":
            s.add_argument("--design", required=True, help="canonical design string")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on validation data")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("frontier", parents=[common], help="recompute and plot a frontier CSV")
    s.add_argument("--csv", required=True)
    s.add_argument("--out", default="frontier")
    s.set_defaults(func=cmd_frontier)

    s = sub.add_parser("select", parents=[common], help="constraint-based choice from a frontier CSV")
    s.add_argument("--csv", required=True)
    s.add_argument("--constraint", action="append",
                   help="e.g. 'P>0.4' or 'L<0.5' (repeatable or comma separated)")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("score", parents=[common], help="competition scoring of metric rows")
    s.add_argument("--csv", help="CSV with win_rate,time_s,memory_MB,energy_mAh,size_MB")
    s.add_argument("--table10", action="store_true", help="score the five published rows")
    s.add_argument("--output", help="also write the score CSV here")
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    parser = build_parser()

    def fail(message):
        sys.stderr.write(f"error: usage: {message}\n")
        raise SystemExit(2)

    parser.error = fail
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            sp.error = fail
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    runtime.tune_allocator()
    try:
        cfg = resolve_config(getattr(args, "config", None), getattr(args, "set", []))
        return args.func(args, cfg)
    except CliError as exc:
        sys.stderr.write(f"error: {exc.kind}: {' '.join(str(exc).split())}\n")
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}\n")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
