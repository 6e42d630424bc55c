"""Exact MAC accounting over a ModelGraph and post-pruning MAC prediction.

Counting conventions: convolutions cost ``out_h * out_w * out_c * in_c *
kh * kw / groups`` multiply-accumulates, linear-family layers cost
``in * out`` per token position (``out_h * out_w`` positions), and norm,
pool, residual-add and input nodes cost 0. All counts are exact Python
integers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .netgraph import DependencyGraph, LayerNode, ModelGraph, IsomorphicGroup

EPS_REL = 1e-9  # comparison slack for percentage bounds

_LINEAR_KINDS = (
    "linear",
    "qkv-projection",
    "attn-out-projection",
    "mlp-fc1",
    "mlp-fc2",
    "classifier",
)
_ZERO_KINDS = ("norm", "pool", "residual-add", "input")


class MacError(ValueError):
    pass


class InfeasibleStrategyError(MacError):
    """A coupled group would be pruned to zero units."""


@dataclass(frozen=True)
class ToleranceBand:
    """Asymmetric acceptance interval around the MAC target (percent)."""

    overshoot_pct: float
    undershoot_pct: float

    def __post_init__(self):
        if self.overshoot_pct < 0 or self.undershoot_pct < 0:
            raise ValueError("tolerance percentages must be nonnegative")

    def bounds(self, target: float) -> tuple[float, float]:
        return (target * (1 - self.undershoot_pct / 100.0),
                target * (1 + self.overshoot_pct / 100.0))

    def as_text(self) -> str:
        return f"+{self.overshoot_pct:g}/-{self.undershoot_pct:g}"

    @classmethod
    def parse(cls, text: str) -> "ToleranceBand":
        """Parse '+5/-15' style band notation."""
        try:
            over, under = text.split("/")
            return cls(overshoot_pct=abs(float(over)), undershoot_pct=abs(float(under)))
        except Exception as exc:
            raise ValueError(f"bad tolerance band {text!r}, expected '+5/-15'") from exc


def count_layer_macs(layer: LayerNode) -> int:
    """Multiply-accumulate count of a single layer."""
    if layer.kind == "conv2d":
        macs = (layer.out_h * layer.out_w * layer.out_channels
                * layer.in_channels * layer.kernel_h * layer.kernel_w)
        return macs // layer.groups
    if layer.kind in _LINEAR_KINDS:
        return layer.in_channels * layer.out_channels * layer.out_h * layer.out_w
    if layer.kind in _ZERO_KINDS:
        return 0
    raise MacError(f"unsupported layer kind {layer.kind!r}")


@dataclass
class MacReport:
    """Per-layer and per-group MAC distribution of one graph."""

    per_layer: dict[str, int]
    total: int
    per_group: dict[str, int]
    baseline_macs: int

    def to_json(self) -> str:
        return json.dumps({
            "total": self.total,
            "baseline_macs": self.baseline_macs,
            "per_layer": self.per_layer,
            "per_group": self.per_group,
            "note": "all layers counted, classifier included",
        }, indent=2, sort_keys=True)

    def to_text(self) -> str:
        width = max((len(k) for k in self.per_layer), default=5)
        lines = [f"{'layer':<{width}}  {'MACs':>14}  {'share':>6}"]
        for layer, macs in self.per_layer.items():
            share = 100.0 * macs / self.total if self.total else 0.0
            lines.append(f"{layer:<{width}}  {macs:>14,}  {share:>5.1f}%")
        lines.append(f"{'total':<{width}}  {self.total:>14,}  100.0%")
        if self.per_group:
            lines.append("")
            gwidth = max(len(k) for k in self.per_group)
            lines.append(f"{'group':<{gwidth}}  {'MACs':>14}")
            for sig, macs in self.per_group.items():
                lines.append(f"{sig:<{gwidth}}  {macs:>14,}")
        return "\n".join(lines) + "\n"


def count_model_macs(graph: ModelGraph,
                     groups: list[IsomorphicGroup] | None = None) -> MacReport:
    """Exact MAC report for a whole graph; deterministic ordering."""
    order = graph.topological_order()
    per_layer = {nid: count_layer_macs(graph.node(nid)) for nid in order}
    total = sum(per_layer.values())
    per_group: dict[str, int] = {}
    if groups:
        grouped: set[str] = set()
        for group in groups:
            if group.derived:
                continue
            per_group[group.signature] = sum(per_layer[m] for m in group.members)
            grouped.update(group.members)
        remainder = sum(macs for nid, macs in per_layer.items() if nid not in grouped)
        per_group["(ungrouped)"] = remainder
    return MacReport(per_layer=per_layer, total=total,
                     per_group=per_group, baseline_macs=total)


def predict_pruned_macs(graph: ModelGraph, deps: DependencyGraph,
                        strategy) -> int:
    """Exact MAC count of the graph the pruner would produce for ``strategy``.

    Walks the same kept-count arithmetic (round-to flooring, coupling, head
    granularity) as the pruner, without touching weights, so prediction and
    post-pruning recount agree exactly.
    """
    from .pruner import plan_dimensions  # shared arithmetic, late import

    dims = plan_dimensions(graph, deps, strategy)
    total = 0
    for node in graph.nodes:
        new_in, new_out, new_heads = dims[node.id]
        if new_in < 1 or new_out < 1:
            raise InfeasibleStrategyError(
                f"layer {node.id!r} would be pruned to zero channels")
        virtual = LayerNode(
            id=node.id, kind=node.kind,
            in_channels=new_in, out_channels=new_out,
            kernel_h=node.kernel_h, kernel_w=node.kernel_w,
            stride=node.stride, out_h=node.out_h, out_w=node.out_w,
            num_heads=new_heads,
            prunable=node.prunable,
            groups=new_out if node.is_depthwise else node.groups,
        )
        total += count_layer_macs(virtual)
    return total


def mac_error_pct(achieved: float, target: float) -> float:
    """Signed MAC error (M_r - M_target) / M_target * 100."""
    if target <= 0:
        raise MacError("MAC target must be positive")
    return (achieved - target) / target * 100.0


def within_tolerance(achieved: float, target: float, band: ToleranceBand) -> str:
    """Band status: 'valid', 'overshoot' or 'undershoot' (bounds inclusive)."""
    if target <= 0:
        raise MacError("MAC target must be positive")
    lower, upper = band.bounds(target)
    slack = EPS_REL * target
    if achieved > upper + slack:
        return "overshoot"
    if achieved < lower - slack:
        return "undershoot"
    return "valid"
