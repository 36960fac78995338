"""Competition scoring: log-scaled sub-scores, weighted raw score, win-rate scaling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

METRICS = ("latency", "memory", "energy", "size")
WEIGHTS = {"latency": 0.4, "memory": 0.2, "energy": 0.2, "size": 0.2}
DEFAULT_REFERENCES = {
    "latency": (15.0, 315.0),  # seconds
    "memory": (160.0, 230.0),  # MB
    "energy": (2.0, 75.0),  # mAh
    "size": (7.0, 80.0),  # MB
}
TARGET_WIN_RATE = 0.40
SCORE_INPUT_COLUMNS = ("win_rate", "time_s", "memory_MB", "energy_mAh", "size_MB")
SCORE_OUTPUT_COLUMNS = ("win_rate", "latency_score", "memory_score", "energy_score",
                        "size_score", "raw_score", "final_score")


@dataclass(frozen=True)
class ReferenceTable:
    refs: dict = field(default_factory=lambda: dict(DEFAULT_REFERENCES))

    def __post_init__(self):
        for name in METRICS:
            strong, weak = self.refs[name]
            if not 0 < strong < weak:
                raise ValueError(f"{name}: need 0 < strong < weak, got ({strong}, {weak})")

    def with_overrides(self, **pairs) -> "ReferenceTable":
        refs = dict(self.refs)
        refs.update(pairs)
        return ReferenceTable(refs)


@dataclass(frozen=True)
class ScoreCard:
    sub_scores: dict
    raw: float
    win_rate: float
    target_win_rate: float
    final: float


def sub_score(value: float, strong: float, weak: float) -> float:
    if value <= 0 or strong <= 0 or weak <= 0:
        raise ValueError("sub_score inputs must be positive")
    if strong >= weak:
        raise ValueError(f"strong reference {strong} must be below weak reference {weak}")
    ratio = (math.log(weak) - math.log(value)) / (math.log(weak) - math.log(strong))
    return min(ratio * 60.0 + 20.0, 100.0)


def composite_score(metrics: dict, references: ReferenceTable | None = None,
                    win_rate: float = TARGET_WIN_RATE,
                    target: float = TARGET_WIN_RATE) -> ScoreCard:
    """``metrics`` maps latency/memory/energy/size to measured values."""
    references = references or ReferenceTable()
    if not 0.0 <= win_rate <= 1.0:
        raise ValueError(f"win rate must be in [0, 1], got {win_rate}")
    if target <= 0:
        raise ValueError("target win rate must be positive")
    subs = {m: sub_score(metrics[m], *references.refs[m]) for m in METRICS}
    raw = sum(WEIGHTS[m] * max(subs[m], 0.0) for m in METRICS)
    final = min(win_rate / target, 1.0) * raw
    return ScoreCard(subs, raw, win_rate, target, final)


def _parse_rate(text: str) -> float:
    text = text.strip()
    if text.endswith("%"):
        return float(text[:-1]) / 100.0
    return float(text)


def score_rows(rows, references: ReferenceTable | None = None,
               target: float = TARGET_WIN_RATE) -> list[ScoreCard]:
    cards = []
    for row in rows:
        metrics = {"latency": float(row["time_s"]), "memory": float(row["memory_MB"]),
                   "energy": float(row["energy_mAh"]), "size": float(row["size_MB"])}
        cards.append(composite_score(metrics, references, _parse_rate(row["win_rate"]), target))
    return cards


def read_score_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(SCORE_INPUT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return list(reader)


def write_score_csv(path_or_file, cards: list[ScoreCard]) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        w = csv.writer(fh)
        w.writerow(SCORE_OUTPUT_COLUMNS)
        for c in cards:
            w.writerow([f"{c.win_rate:.6g}"] + [f"{c.sub_scores[m]:.4f}" for m in METRICS]
                       + [f"{c.raw:.4f}", f"{c.final:.4f}"])
    finally:
        if own:
            fh.close()
