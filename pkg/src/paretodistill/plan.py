"""Analytic layer plans: the static description both networks are built from.

A plan is an ordered list of :class:`LayerSpec` (forward schedule order). Cost
conventions: one multiply-accumulate is one FLOP, every bias add is one FLOP,
element-wise activations, softmax and pooling cost one op per element, batch 1,
one time step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .nn.layers import LayerSpec


def layer_params(spec: LayerSpec) -> int:
    e = spec.extents
    if spec.kind == "dense":
        return e["in"] * e["out"] + e["out"]
    if spec.kind == "conv2d":
        return e["cout"] * e["cin"] * e["kernel"] ** 2 + e["cout"]
    if spec.kind == "lstm-cell":
        h = e["hidden"]
        return 4 * (h * (h + e["in"]) + h)
    if spec.kind == "multi-head-attention":
        d = e["dim"]
        return 4 * d * d + 4 * d
    if spec.kind == "dot-product-score":
        return e.get("learned", 0) * e["dim"]
    return 0


def conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def layer_flops(spec: LayerSpec) -> int:
    """FLOPs of a single application of ``spec``."""
    e = spec.extents
    if spec.kind == "dense":
        return e["in"] * e["out"] + e["out"]
    if spec.kind == "conv2d":
        ho = conv_out(e["h"], e["kernel"], e["stride"], e["padding"])
        wo = conv_out(e["w"], e["kernel"], e["stride"], e["padding"])
        return e["cout"] * ho * wo * (e["cin"] * e["kernel"] ** 2 + 1)
    if spec.kind == "lstm-cell":
        h = e["hidden"]
        return 4 * (h * (h + e["in"]) + h)
    if spec.kind == "multi-head-attention":
        n, d = e["tokens"], e["dim"]
        return 4 * n * d * d + 2 * n * n * d
    if spec.kind == "dot-product-score":
        return e["keys"] * e["dim"]
    if spec.kind in ("relu", "masked-temperature-softmax", "set-max-pool"):
        return e["n"]
    return 0  # concat moves data only


@dataclass
class PlanEntry:
    spec: LayerSpec
    inputs: tuple[str, ...]
    out_size: int  # output elements over all uses in one inference


@dataclass
class Plan:
    """Layer specs in schedule order plus the tensors they read and write."""

    entries: list[PlanEntry] = field(default_factory=list)
    inputs: dict[str, int] = field(default_factory=dict)  # external tensors -> size

    def add(self, name, kind, extents=None, uses=1, block="", module="", inputs=(),
            out_size=0) -> str:
        spec = LayerSpec(name=name, kind=kind, extents=dict(extents or {}), uses=uses,
                         block=block, module=module)
        self.entries.append(PlanEntry(spec, tuple(inputs), int(out_size)))
        return name

    def specs(self) -> list[LayerSpec]:
        return [e.spec for e in self.entries]

    def total_flops(self) -> int:
        return sum(layer_flops(e.spec) * e.spec.uses for e in self.entries)

    def total_params(self) -> int:
        return sum(layer_params(e.spec) for e in self.entries)

    def peak_live_elements(self) -> int:
        """Largest sum of simultaneously live tensors along the schedule."""
        sizes = dict(self.inputs)
        produced_at = {name: -1 for name in self.inputs}
        last_use: dict[str, int] = {}
        for i, entry in enumerate(self.entries):
            sizes[entry.spec.name] = entry.out_size
            produced_at[entry.spec.name] = i
            for src in entry.inputs:
                if src not in sizes:
                    raise KeyError(f"{entry.spec.name} reads unknown tensor {src!r}")
                last_use[src] = i
        end = len(self.entries) - 1
        peak = 0
        for i in range(len(self.entries)):
            live = sum(
                size for name, size in sizes.items()
                if produced_at[name] <= i <= last_use.get(name, end)
            )
            peak = max(peak, live)
        return peak
