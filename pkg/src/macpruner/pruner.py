"""Strategy execution: ranking, round-to arithmetic, dependency-preserving
channel removal.

Pruning always starts from the pristine baseline (search independence), and
the kept-count arithmetic lives in :func:`plan_dimensions`, which the MAC
predictor walks as well — prediction and post-pruning recount agree exactly
by construction, while the recount still runs through full graph rebuilding
and validation.

A strategy's ratio (CNN mode) or base-ratio-times-multiplier (ViT mode) is
applied per coupled dependency group; importance ranking then selects which
unit indices die inside each group. Head pruning removes whole heads of a
fused qkv projection before per-head channel pruning, keeping the kept
width divisible by the surviving head count.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .importance import ImportanceError, ImportanceTable
from .macprof import InfeasibleStrategyError, count_model_macs
from .netexec import WeightedNet
from .netgraph import (
    CoupledGroup,
    DependencyGraph,
    IsomorphicGroup,
    ModelGraph,
    PRUNABLE_KINDS,
    validate_graph,
)

ROUND_TO_CHOICES = (1, 2, 4, 8, 16)
MAX_UNIT_RATIO = 0.85  # minimal-capacity floor: no unit pruned beyond 85%
_EPS = 1e-9

MULTIPLIER_NAMES = ("mlp", "qkv", "proj", "head")


class StrategyError(ValueError):
    pass


@dataclass(frozen=True, eq=True)
class Strategy:
    """One pruning configuration.

    Exactly one of ``channel_pruning_ratio`` (CNN mode) or ``base_ratio`` +
    ``group_multipliers`` (ViT mode) is populated. ``global_pruning`` records
    that ratios are group-wide (applied per isomorphic/coupled group rather
    than as hand-set per-layer quotas), which is the only mode implemented.
    """

    criterion: str = "taylor"
    channel_pruning_ratio: float | None = None
    base_ratio: float | None = None
    group_multipliers: tuple[tuple[str, float], ...] | None = None
    round_to: int = 2
    global_pruning: bool = True
    expected_achieved_macs: float | None = None
    rationale: str = ""

    @staticmethod
    def cnn(ratio: float, criterion: str = "taylor", round_to: int = 2,
            **kw) -> "Strategy":
        return Strategy(criterion=criterion, channel_pruning_ratio=ratio,
                        round_to=round_to, **kw)

    @staticmethod
    def vit(base_ratio: float, multipliers: dict[str, float],
            criterion: str = "taylor", round_to: int = 2, **kw) -> "Strategy":
        mult = tuple((k, float(multipliers.get(k, 0.0))) for k in MULTIPLIER_NAMES)
        return Strategy(criterion=criterion, base_ratio=base_ratio,
                        group_multipliers=mult, round_to=round_to, **kw)

    @property
    def mode(self) -> str:
        return "cnn" if self.channel_pruning_ratio is not None else "vit"

    def multipliers(self) -> dict[str, float]:
        return dict(self.group_multipliers or ())

    def validate(self) -> None:
        cnn = self.channel_pruning_ratio is not None
        vit = self.base_ratio is not None
        if cnn == vit:
            raise StrategyError("exactly one of CNN ratio / ViT base ratio must be set")
        if self.round_to not in ROUND_TO_CHOICES:
            raise StrategyError(f"round_to must be one of {ROUND_TO_CHOICES}")
        if cnn and not 0.0 <= self.channel_pruning_ratio <= 1.0:
            raise StrategyError("channel_pruning_ratio must lie in [0, 1]")
        if vit:
            if not 0.0 <= self.base_ratio <= 1.0:
                raise StrategyError("base_ratio must lie in [0, 1]")
            for key, value in self.group_multipliers or ():
                if value < 0:
                    raise StrategyError(f"multiplier {key} must be nonnegative")

    def knobs(self) -> tuple[float, ...]:
        """Ratio/multiplier vector used for danger zones and cycling."""
        if self.mode == "cnn":
            return (self.channel_pruning_ratio,)
        m = self.multipliers()
        return (self.base_ratio,) + tuple(m.get(k, 0.0) for k in MULTIPLIER_NAMES)

    def signature(self, precision: int = 3) -> tuple:
        return (self.criterion, self.round_to,
                tuple(round(k, precision) for k in self.knobs()))

    def summary(self) -> str:
        if self.mode == "cnn":
            return f"{self.criterion} ratio={self.channel_pruning_ratio:.3f} rt={self.round_to}"
        m = self.multipliers()
        parts = " ".join(f"{k}={m.get(k, 0.0):.2f}" for k in MULTIPLIER_NAMES)
        return f"{self.criterion} base={self.base_ratio:.3f} {parts} rt={self.round_to}"

    def to_dict(self) -> dict:
        doc = {
            "criterion": self.criterion,
            "round_to": self.round_to,
            "global_pruning": self.global_pruning,
            "rationale": self.rationale,
        }
        if self.expected_achieved_macs is not None:
            doc["expected_achieved_macs"] = self.expected_achieved_macs
        if self.mode == "cnn":
            doc["channel_pruning_ratio"] = self.channel_pruning_ratio
        else:
            doc["base_ratio"] = self.base_ratio
            doc["group_multipliers"] = self.multipliers()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Strategy":
        """Accepts both the canonical form and the oracle JSON schema
        (``importance_criterion`` + ``isomorphic_group_ratios`` with
        ``*_multiplier`` keys)."""
        criterion = doc.get("criterion") or doc.get("importance_criterion") or "taylor"
        round_to = int(doc.get("round_to", 2))
        common = dict(
            criterion=criterion,
            round_to=round_to,
            global_pruning=bool(doc.get("global_pruning", True)),
            expected_achieved_macs=doc.get("expected_achieved_macs"),
            rationale=str(doc.get("rationale", "")),
        )
        ratios = doc.get("isomorphic_group_ratios")
        if ratios is not None:
            mult = {k: float(ratios.get(f"{k}_multiplier", 0.0)) for k in MULTIPLIER_NAMES}
            base = float(doc.get("base_ratio", doc.get("target_ratio", 0.0)))
            strategy = Strategy.vit(base, mult, **common)
        elif "group_multipliers" in doc:
            strategy = Strategy.vit(float(doc["base_ratio"]),
                                    {k: float(v) for k, v in doc["group_multipliers"].items()},
                                    **common)
        elif "channel_pruning_ratio" in doc:
            strategy = Strategy.cnn(float(doc["channel_pruning_ratio"]), **common)
        else:
            raise StrategyError("strategy document has neither CNN ratio nor ViT multipliers")
        strategy.validate()
        return strategy

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def kept_count(original: int, effective_ratio: float, round_to: int) -> int:
    """Units kept after flooring to a round_to multiple (never below round_to,
    never above the original count)."""
    kept = int(math.floor(original * (1.0 - effective_ratio) + _EPS))
    kept = (kept // round_to) * round_to
    kept = max(round_to, kept)
    return min(original, kept)


def effective_ratios(strategy: Strategy) -> dict[str, float]:
    """Effective pruning ratio per coupled-group class, clamped to [0, 0.85]."""
    clamp = lambda r: min(MAX_UNIT_RATIO, max(0.0, r))
    if strategy.mode == "cnn":
        r = clamp(strategy.channel_pruning_ratio)
        return {"cnn-channel": r, "mlp": r, "qkv": r, "proj": r, "head": 0.0}
    m = strategy.multipliers()
    base = strategy.base_ratio
    return {
        "mlp": clamp(base * m.get("mlp", 0.0)),
        "qkv": clamp(base * m.get("qkv", 0.0)),
        "proj": clamp(base * m.get("proj", 0.0)),
        "head": clamp(base * m.get("head", 0.0)),
        "cnn-channel": 0.0,
    }


def _qkv_node(graph: ModelGraph, group: CoupledGroup):
    for lid, ax in group.members:
        if ax == "out" and graph.node(lid).kind == "qkv-projection":
            return graph.node(lid)
    return None


def plan_group_keep(graph: ModelGraph, group: CoupledGroup,
                    strategy: Strategy) -> tuple[int, int]:
    """(kept units, kept heads) for one coupled group; heads is 0 for
    non-attention groups."""
    if not group.prunable:
        qkv = _qkv_node(graph, group)
        return group.cardinality, qkv.num_heads if qkv else 0
    ratios = effective_ratios(strategy)
    eff = ratios.get(group.pruning_class, 0.0)
    qkv = _qkv_node(graph, group)
    if qkv is None:
        kept = kept_count(group.cardinality, eff, strategy.round_to)
        if kept < 1:
            raise InfeasibleStrategyError(f"group {group.members} pruned to zero")
        return kept, 0
    head_dim = group.cardinality // qkv.num_heads
    kept_heads = max(1, int(math.floor(qkv.num_heads * (1.0 - ratios["head"]) + _EPS)))
    kept_per_head = kept_count(head_dim, eff, strategy.round_to)
    return kept_heads * kept_per_head, kept_heads


def plan_dimensions(graph: ModelGraph, deps: DependencyGraph,
                    strategy: Strategy) -> dict[str, tuple[int, int, int]]:
    """Post-pruning (in_channels, out_channels, num_heads) per layer.

    Pure arithmetic over coupled groups — no scores involved, so the MAC
    prediction derived from this plan is exact for any importance table.
    """
    strategy.validate()
    keep: dict[tuple[str, str], tuple[int, int]] = {}
    for group in deps.coupled_groups:
        kept, heads = plan_group_keep(graph, group, strategy)
        for axis in group.members:
            keep[axis] = (kept, heads)
    dims: dict[str, tuple[int, int, int]] = {}
    for node in graph.nodes:
        if node.kind == "input":
            dims[node.id] = (node.in_channels, node.out_channels, node.num_heads)
            continue
        new_in = keep[(node.id, "in")][0]
        kept_out, kept_heads = keep[(node.id, "out")]
        if node.kind == "qkv-projection":
            dims[node.id] = (new_in, 3 * kept_out, kept_heads)
        else:
            dims[node.id] = (new_in, kept_out, node.num_heads)
    return dims


# ---------------------------------------------------------------------------
# ranking and selection
# ---------------------------------------------------------------------------

def rank_within_groups(scores: ImportanceTable,
                       groups: list[IsomorphicGroup]) -> dict[str, list[tuple[str, int]]]:
    """Ascending-importance unit order per isomorphic group.

    Ties break lexicographically by (layer id, channel index) so rankings
    are reproducible across runs.
    """
    ranked: dict[str, list[tuple[str, int]]] = {}
    for group in groups:
        if group.derived:
            continue
        units: list[tuple[float, str, int]] = []
        for layer in group.members:
            ch = 0
            found = False
            while (layer, ch) in scores.scores:
                units.append((scores.scores[(layer, ch)], layer, ch))
                ch += 1
                found = True
            if not found:
                raise ImportanceError(f"missing importance scores for layer {layer!r}")
        units.sort(key=lambda u: (u[0], u[1], u[2]))
        ranked[group.signature] = [(layer, ch) for _, layer, ch in units]
    return ranked


def _group_unit_scores(graph: ModelGraph, group: CoupledGroup,
                       table: ImportanceTable) -> list[float]:
    """Aggregate score per group index: sum over scored member output axes
    (qkv triplets sum their q, k and v rows)."""
    totals = [0.0] * group.cardinality
    for lid, ax in group.members:
        if ax != "out":
            continue
        node = graph.node(lid)
        if node.kind not in PRUNABLE_KINDS or not node.prunable:
            continue
        try:
            if node.kind == "qkv-projection":
                inner = group.cardinality
                for i in range(inner):
                    totals[i] += (table.scores[(lid, i)]
                                  + table.scores[(lid, inner + i)]
                                  + table.scores[(lid, 2 * inner + i)])
            else:
                for i in range(group.cardinality):
                    totals[i] += table.scores[(lid, i)]
        except KeyError as exc:
            raise ImportanceError(f"missing importance score {exc.args[0]!r}") from exc
    return totals


def _select_kept(scores: list[float], kept: int) -> list[int]:
    order = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    removed = set(order[:len(scores) - kept])
    return [i for i in range(len(scores)) if i not in removed]


def _select_kept_qkv(graph: ModelGraph, group: CoupledGroup, table: ImportanceTable,
                     kept_units: int, kept_heads: int) -> list[int]:
    node = _qkv_node(graph, group)
    unit_scores = _group_unit_scores(graph, group, table)
    head_dim = group.cardinality // node.num_heads
    kept_per_head = kept_units // kept_heads
    head_scores = [sum(unit_scores[h * head_dim:(h + 1) * head_dim])
                   for h in range(node.num_heads)]
    head_order = sorted(range(node.num_heads), key=lambda h: (head_scores[h], h))
    surviving = sorted(head_order[node.num_heads - kept_heads:])
    kept_idx: list[int] = []
    for h in surviving:
        idx = list(range(h * head_dim, (h + 1) * head_dim))
        order = sorted(idx, key=lambda i: (unit_scores[i], i))
        kept_idx.extend(sorted(order[head_dim - kept_per_head:]))
    return sorted(kept_idx)


@dataclass
class PruneOutcome:
    """Result of executing one strategy from the pristine baseline."""

    pruned_graph: ModelGraph
    pruned_net: WeightedNet
    kept: dict[str, list[int]]
    achieved_macs: int
    baseline_graph: ModelGraph


def apply_pruning(baseline: WeightedNet, deps: DependencyGraph,
                  groups: list[IsomorphicGroup], scores: ImportanceTable,
                  strategy: Strategy) -> PruneOutcome:
    """Remove the lowest-scored units of every prunable coupled group.

    Weight slices are copied, never mutated in place, so the baseline stays
    pristine for subsequent attempts. The achieved MAC count is a full
    recount of the rebuilt graph.
    """
    graph = baseline.graph
    strategy.validate()

    kept_by_axis: dict[tuple[str, str], list[int]] = {}
    heads_by_layer: dict[str, int] = {}
    for group in deps.coupled_groups:
        kept_units, kept_heads = plan_group_keep(graph, group, strategy)
        if group.prunable and kept_units < group.cardinality:
            qkv = _qkv_node(graph, group)
            if qkv is not None:
                kept_idx = _select_kept_qkv(graph, group, scores, kept_units, kept_heads)
            else:
                kept_idx = _select_kept(_group_unit_scores(graph, group, scores),
                                        kept_units)
        else:
            kept_idx = list(range(group.cardinality))
        for lid, ax in group.members:
            kept_by_axis[(lid, ax)] = kept_idx
            if ax == "out" and graph.node(lid).kind == "qkv-projection":
                heads_by_layer[lid] = kept_heads

    new_nodes: list = []
    new_weights: dict[str, np.ndarray] = {}
    new_biases: dict[str, np.ndarray] = {}
    kept_report: dict[str, list[int]] = {}

    for node in graph.nodes:
        if node.kind == "input":
            new_nodes.append(node)
            continue
        kept_in = kept_by_axis[(node.id, "in")]
        kept_out = kept_by_axis[(node.id, "out")]
        if node.kind == "qkv-projection":
            inner = node.inner_channels
            rows = ([i for i in kept_out] + [inner + i for i in kept_out]
                    + [2 * inner + i for i in kept_out])
            new_out = 3 * len(kept_out)
            new_heads = heads_by_layer[node.id]
        else:
            rows = kept_out
            new_out = len(kept_out)
            new_heads = node.num_heads
        new_node = replace(
            node,
            in_channels=len(kept_in),
            out_channels=new_out,
            num_heads=new_heads,
            groups=len(kept_out) if node.is_depthwise else node.groups,
        )
        new_nodes.append(new_node)
        if node.id in baseline.weights:
            w = baseline.weights[node.id]
            if node.is_depthwise:
                new_w = w[rows].copy()
            elif node.kind == "conv2d":
                new_w = w[np.ix_(rows, kept_in)].copy()
            else:
                new_w = w[np.ix_(rows, kept_in)].copy()
            new_weights[node.id] = new_w
            new_biases[node.id] = baseline.biases[node.id][rows].copy()
            kept_report[node.id] = list(rows)

    pruned_graph = ModelGraph(tuple(new_nodes), graph.edges, graph.dataset_profile)
    validate_graph(pruned_graph)
    pruned_net = WeightedNet(graph=pruned_graph, weights=new_weights, biases=new_biases)
    pruned_net.check_shapes()
    achieved = count_model_macs(pruned_graph).total
    return PruneOutcome(pruned_graph=pruned_graph, pruned_net=pruned_net,
                        kept=kept_report, achieved_macs=achieved,
                        baseline_graph=graph)


def validate_structure(outcome: PruneOutcome) -> list[str]:
    """Structural integrity checks on a pruning outcome; empty list means ok."""
    violations: list[str] = []
    graph = outcome.pruned_graph
    baseline = outcome.baseline_graph

    for p, c in graph.edges:
        prod, cons = graph.node(p), graph.node(c)
        if prod.inner_channels != cons.in_channels:
            violations.append(
                f"edge {p}->{c}: channel mismatch "
                f"({prod.inner_channels} vs {cons.in_channels})")
    for node in graph.nodes:
        if node.kind != "qkv-projection":
            continue
        if node.num_heads and node.out_channels % (3 * node.num_heads):
            violations.append(
                f"{node.id}: qkv out {node.out_channels} not divisible by "
                f"3*num_heads ({3 * node.num_heads})")
        if node.head_dim and node.head_dim < 8:
            violations.append(f"{node.id}: head_dim {node.head_dim} below minimum 8")
        if graph.is_transformer and node.out_channels < 96:
            violations.append(f"{node.id}: qkv out {node.out_channels} below minimum 96")
    for lid, kept in outcome.kept.items():
        if baseline.has_node(lid):
            orig = baseline.node(lid).out_channels
            ratio = 1.0 - len(kept) / orig
            if ratio > MAX_UNIT_RATIO + _EPS:
                violations.append(
                    f"{lid}: pruned {ratio:.0%} of units, beyond the 85% cap")
    return violations
