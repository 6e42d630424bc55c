"""Declarative layer-graph IR with dependency and isomorphism analysis.

A model is a DAG of :class:`LayerNode` objects. From it we derive:

* a :class:`DependencyGraph` of coupled channel axes — sets of
  ``(layer, axis)`` pairs that must be pruned with identical index sets
  (chains couple producer-out to consumer-in; residual adds unify all
  their producers' output axes transitively), and
* a list of :class:`IsomorphicGroup` — layers with identical computational
  topology, ranked together so importance scores are compared fairly.

Graphs are immutable after construction and all operations here are pure.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

KINDS = (
    "conv2d",
    "linear",
    "norm",
    "qkv-projection",
    "attn-out-projection",
    "mlp-fc1",
    "mlp-fc2",
    "residual-add",
    "pool",
    "classifier",
    "input",
)

# short aliases accepted by the textual model-spec format
KIND_ALIASES = {
    "conv": "conv2d",
    "qkv": "qkv-projection",
    "proj": "attn-out-projection",
    "fc1": "mlp-fc1",
    "fc2": "mlp-fc2",
    "add": "residual-add",
}

# kinds that carry weights and can lose output units
PRUNABLE_KINDS = (
    "conv2d",
    "linear",
    "qkv-projection",
    "attn-out-projection",
    "mlp-fc1",
    "mlp-fc2",
)

# kinds whose input and output are the same logical channel axis
PASSTHROUGH_KINDS = ("norm", "pool", "residual-add")

MULTIPLIER_KEYS = ("mlp", "qkv", "proj", "head", "cnn-channel")


class GraphError(ValueError):
    """Malformed model spec or violated graph invariant."""


@dataclass(frozen=True)
class LayerNode:
    """One layer of the model graph.

    ``kernel_h/kernel_w/stride`` are 1 for non-convolutional kinds, and
    ``out_h * out_w`` doubles as the token count for per-token linear
    layers. ``groups`` is the convolution group count; ``groups ==
    channels`` marks a depthwise convolution (experimental).
    """

    id: str
    kind: str
    in_channels: int
    out_channels: int
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    out_h: int = 1
    out_w: int = 1
    num_heads: int = 0
    prunable: bool = True
    groups: int = 1

    @property
    def is_depthwise(self) -> bool:
        return self.kind == "conv2d" and self.groups > 1 and self.groups == self.in_channels

    @property
    def inner_channels(self) -> int:
        """Per-stream width: out_channels/3 for fused qkv, else out_channels."""
        if self.kind == "qkv-projection":
            return self.out_channels // 3
        return self.out_channels

    @property
    def head_dim(self) -> int:
        if self.kind == "qkv-projection" and self.num_heads > 0:
            return self.inner_channels // self.num_heads
        return 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise GraphError(f"node {self.id!r}: unknown kind {self.kind!r}")
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w",
                     "stride", "out_h", "out_w", "groups"):
            value = getattr(self, name)
            if value < 1:
                raise GraphError(f"node {self.id!r}: {name} must be >= 1, got {value}")
        if self.kind == "qkv-projection":
            if self.num_heads < 1:
                raise GraphError(f"node {self.id!r}: qkv-projection requires num_heads >= 1")
            if self.out_channels % 3 != 0:
                raise GraphError(
                    f"node {self.id!r}: qkv-projection out_channels {self.out_channels} "
                    f"not divisible by 3")
            if self.out_channels % self.num_heads != 0:
                raise GraphError(
                    f"node {self.id!r}: qkv-projection out_channels {self.out_channels} "
                    f"not divisible by num_heads {self.num_heads}")
        if self.kind == "conv2d" and self.groups > 1:
            if self.in_channels % self.groups or self.out_channels % self.groups:
                raise GraphError(f"node {self.id!r}: channels not divisible by groups")
        if self.kind == "classifier" and self.prunable:
            raise GraphError(f"node {self.id!r}: classifier must not be prunable")


@dataclass(frozen=True)
class ModelGraph:
    """Immutable layer DAG plus its dataset profile."""

    nodes: tuple[LayerNode, ...]
    edges: tuple[tuple[str, str], ...]
    dataset_profile: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {n.id: n for n in self.nodes})

    def node(self, node_id: str) -> LayerNode:
        return self._by_id[node_id]

    def has_node(self, node_id: str) -> bool:
        return node_id in self._by_id

    def producers(self, node_id: str) -> list[str]:
        return [p for p, c in self.edges if c == node_id]

    def consumers(self, node_id: str) -> list[str]:
        return [c for p, c in self.edges if p == node_id]

    def input_nodes(self) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind == "input"]

    @property
    def is_transformer(self) -> bool:
        return any(n.kind == "qkv-projection" for n in self.nodes)

    def topological_order(self) -> list[str]:
        """Node ids in dependency order; raises GraphError on a cycle."""
        indeg = {n.id: 0 for n in self.nodes}
        for _, c in self.edges:
            indeg[c] += 1
        ready = [n.id for n in self.nodes if indeg[n.id] == 0]
        order: list[str] = []
        while ready:
            ready.sort()
            nid = ready.pop(0)
            order.append(nid)
            for c in self.consumers(nid):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.nodes):
            stuck = sorted(set(indeg) - set(order))
            raise GraphError(f"cycle detected involving node {stuck[0]!r}")
        return order


def _effective_out(node: LayerNode) -> int:
    """Channel count seen by consumers (qkv emits mixed values of width inner)."""
    return node.inner_channels


def validate_graph(graph: ModelGraph) -> None:
    """Check all structural invariants; raises GraphError naming the offender."""
    seen = set()
    for node in graph.nodes:
        if node.id in seen:
            raise GraphError(f"duplicate node id {node.id!r}")
        seen.add(node.id)
        node.validate()
    for p, c in graph.edges:
        if not graph.has_node(p):
            raise GraphError(f"edge ({p!r} -> {c!r}): unknown producer {p!r}")
        if not graph.has_node(c):
            raise GraphError(f"edge ({p!r} -> {c!r}): unknown consumer {c!r}")
    inputs = graph.input_nodes()
    if not inputs:
        raise GraphError("graph has no input node")

    graph.topological_order()  # cycle check

    # reachability from inputs
    reached = {n.id for n in inputs}
    frontier = list(reached)
    while frontier:
        nid = frontier.pop()
        for c in graph.consumers(nid):
            if c not in reached:
                reached.add(c)
                frontier.append(c)
    for node in graph.nodes:
        if node.id not in reached:
            raise GraphError(f"node {node.id!r} unreachable from input")

    # channel compatibility along every edge
    for p, c in graph.edges:
        prod, cons = graph.node(p), graph.node(c)
        if _effective_out(prod) != cons.in_channels:
            raise GraphError(
                f"edge ({p!r} -> {c!r}): producer supplies {_effective_out(prod)} "
                f"channels but consumer expects {cons.in_channels}")
    for node in graph.nodes:
        if node.kind in PASSTHROUGH_KINDS and node.in_channels != node.out_channels:
            raise GraphError(f"node {node.id!r}: {node.kind} must have in == out channels")


def first_convs_on_input_path(graph: ModelGraph) -> set[str]:
    """Conv2d nodes reachable from an input without passing another conv2d."""
    firsts: set[str] = set()
    seen: set[str] = set()
    frontier = [n.id for n in graph.input_nodes()]
    while frontier:
        nid = frontier.pop()
        if nid in seen:
            continue
        seen.add(nid)
        node = graph.node(nid)
        if node.kind == "conv2d":
            firsts.add(nid)
            continue  # do not walk past the first conv
        frontier.extend(graph.consumers(nid))
    return firsts


# ---------------------------------------------------------------------------
# model spec parsing
# ---------------------------------------------------------------------------

_NODE_FIELDS = ("in", "out", "kh", "kw", "stride", "out_h", "out_w")


def _parse_node_line(line: str, lineno: int) -> tuple[LayerNode, bool]:
    """Returns (node, prunable_was_explicit)."""
    tokens = line.split()
    if len(tokens) < 9:
        raise GraphError(
            f"line {lineno}: expected 'id kind in out kh kw stride out_h out_w "
            f"[heads=N] [prunable=0] [groups=N]', got {line!r}")
    node_id, kind = tokens[0], tokens[1]
    kind = KIND_ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise GraphError(f"line {lineno}: unknown kind {tokens[1]!r}")
    try:
        dims = [int(t) for t in tokens[2:9]]
    except ValueError as exc:
        raise GraphError(f"line {lineno}: non-integer dimension in {line!r}") from exc
    heads, prunable, groups = 0, None, 1
    for extra in tokens[9:]:
        if "=" not in extra:
            raise GraphError(f"line {lineno}: bad option {extra!r}")
        key, _, value = extra.partition("=")
        if key == "heads":
            heads = int(value)
        elif key == "prunable":
            prunable = bool(int(value))
        elif key == "groups":
            groups = int(value)
        else:
            raise GraphError(f"line {lineno}: unknown option {key!r}")
    node = LayerNode(
        id=node_id, kind=kind,
        in_channels=dims[0], out_channels=dims[1],
        kernel_h=dims[2], kernel_w=dims[3], stride=dims[4],
        out_h=dims[5], out_w=dims[6],
        num_heads=heads,
        prunable=True if prunable is None else prunable,
        groups=groups,
    )
    return node, prunable is not None


def _apply_prunable_defaults(nodes: list[LayerNode], explicit: list[bool],
                             edges: list[tuple[str, str]],
                             dataset_profile: str) -> ModelGraph:
    graph = ModelGraph(tuple(nodes), tuple(edges), dataset_profile)
    # classifier ban is unconditional; first-conv ban is the default and may
    # be overridden by an explicit prunable=1 in the spec text
    firsts = first_convs_on_input_path(graph)
    fixed = []
    for node, was_explicit in zip(nodes, explicit):
        prunable = node.prunable
        if node.kind in ("classifier", "input"):
            prunable = False
        elif node.kind not in PRUNABLE_KINDS:
            prunable = False
        elif node.id in firsts and not was_explicit:
            prunable = False
        fixed.append(replace(node, prunable=prunable))
    return ModelGraph(tuple(fixed), tuple(edges), dataset_profile)


def load_graph(spec_text: str) -> ModelGraph:
    """Parse a textual or JSON model description into a validated ModelGraph.

    Text format: one node per line (``id kind in out kh kw stride out_h out_w``
    with optional ``heads=N``, ``prunable=0/1``, ``groups=N``), edge lines
    starting with ``edges:`` listing comma-separated ``a->b`` pairs, and an
    optional ``dataset_profile:`` line. ``#`` starts a comment. A JSON
    document with the same field names is accepted interchangeably.
    """
    stripped = spec_text.lstrip()
    if stripped.startswith("{"):
        return _load_graph_json(spec_text)

    nodes: list[LayerNode] = []
    explicit: list[bool] = []
    edges: list[tuple[str, str]] = []
    dataset_profile = "synthetic"
    for lineno, raw in enumerate(spec_text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("edges:"):
            for pair in line[len("edges:"):].split(","):
                pair = pair.strip()
                if not pair:
                    continue
                if "->" not in pair:
                    raise GraphError(f"line {lineno}: bad edge {pair!r}")
                a, _, b = pair.partition("->")
                edges.append((a.strip(), b.strip()))
            continue
        if line.startswith("dataset_profile:"):
            dataset_profile = line.split(":", 1)[1].strip()
            continue
        node, was_explicit = _parse_node_line(line, lineno)
        nodes.append(node)
        explicit.append(was_explicit)

    graph = _apply_prunable_defaults(nodes, explicit, edges, dataset_profile)
    validate_graph(graph)
    return graph


def _load_graph_json(text: str) -> ModelGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"model spec is not valid JSON: {exc}") from exc
    nodes: list[LayerNode] = []
    explicit: list[bool] = []
    for entry in doc.get("nodes", []):
        kind = KIND_ALIASES.get(entry.get("kind", ""), entry.get("kind", ""))
        if kind not in KINDS:
            raise GraphError(f"node {entry.get('id')!r}: unknown kind {entry.get('kind')!r}")
        node = LayerNode(
            id=str(entry["id"]), kind=kind,
            in_channels=int(entry["in_channels"]),
            out_channels=int(entry["out_channels"]),
            kernel_h=int(entry.get("kernel_h", 1)),
            kernel_w=int(entry.get("kernel_w", 1)),
            stride=int(entry.get("stride", 1)),
            out_h=int(entry.get("out_h", 1)),
            out_w=int(entry.get("out_w", 1)),
            num_heads=int(entry.get("num_heads", 0)),
            prunable=bool(entry.get("prunable", True)),
            groups=int(entry.get("groups", 1)),
        )
        nodes.append(node)
        explicit.append("prunable" in entry)
    edges = [(str(a), str(b)) for a, b in doc.get("edges", [])]
    graph = _apply_prunable_defaults(nodes, explicit, edges,
                                     str(doc.get("dataset_profile", "synthetic")))
    validate_graph(graph)
    return graph


def dump_spec_text(graph: ModelGraph) -> str:
    """Serialize a graph back to the line-oriented spec format."""
    lines = [f"dataset_profile: {graph.dataset_profile}"]
    for n in graph.nodes:
        parts = [n.id, n.kind, str(n.in_channels), str(n.out_channels),
                 str(n.kernel_h), str(n.kernel_w), str(n.stride),
                 str(n.out_h), str(n.out_w)]
        if n.num_heads:
            parts.append(f"heads={n.num_heads}")
        parts.append(f"prunable={int(n.prunable)}")
        if n.groups != 1:
            parts.append(f"groups={n.groups}")
        lines.append(" ".join(parts))
    if graph.edges:
        lines.append("edges: " + ", ".join(f"{a}->{b}" for a, b in graph.edges))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# dependency analysis
# ---------------------------------------------------------------------------

Axis = tuple[str, str]  # (layer id, "out" | "in")


@dataclass(frozen=True)
class CoupledGroup:
    """Axes that must be pruned with one identical index set.

    ``cardinality`` counts prunable units: triplet slots for a fused qkv
    output axis, plain channels otherwise. ``pruning_class`` names the
    multiplier that drives this group.
    """

    members: tuple[Axis, ...]
    cardinality: int
    prunable: bool
    pruning_class: str  # one of MULTIPLIER_KEYS

    def contains(self, axis: Axis) -> bool:
        return axis in self.members


@dataclass(frozen=True)
class DependencyGraph:
    coupled_groups: tuple[CoupledGroup, ...]

    def group_of(self, axis: Axis) -> CoupledGroup:
        for group in self.coupled_groups:
            if group.contains(axis):
                return group
        raise KeyError(axis)

    def prunable_groups(self) -> list[CoupledGroup]:
        return [g for g in self.coupled_groups if g.prunable]


class _UnionFind:
    def __init__(self):
        self.parent: dict[Axis, Axis] = {}

    def find(self, x: Axis) -> Axis:
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: Axis, b: Axis) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _axis_cardinality(graph: ModelGraph, axis: Axis) -> int:
    node = graph.node(axis[0])
    if axis[1] == "in":
        return node.in_channels
    return node.inner_channels  # qkv out counted in triplets


def _classify_group(graph: ModelGraph, members: tuple[Axis, ...]) -> str:
    kinds_out = {graph.node(lid).kind for lid, ax in members if ax == "out"}
    kinds_any = {graph.node(lid).kind for lid, _ in members}
    if "qkv-projection" in kinds_out:
        return "qkv"
    if "mlp-fc1" in kinds_out:
        return "mlp"
    if ("attn-out-projection" in kinds_out or "mlp-fc2" in kinds_out
            or ("residual-add" in kinds_any and
                kinds_any & {"qkv-projection", "attn-out-projection", "mlp-fc1", "mlp-fc2"})):
        return "proj"
    if graph.is_transformer and "residual-add" in kinds_any:
        return "proj"  # the embedding stream of a transformer
    return "cnn-channel"


def derive_dependencies(graph: ModelGraph) -> DependencyGraph:
    """Build the coupled-dimension structure of a validated graph.

    Rules: every edge couples the producer's output axis to the consumer's
    input axis; passthrough kinds (norm, pool, residual-add) and depthwise
    convolutions tie their own input and output axes; residual adds thereby
    unify all producers' output groups transitively.
    """
    uf = _UnionFind()
    axes: list[Axis] = []
    for node in graph.nodes:
        if node.kind != "input":
            axes.append((node.id, "in"))
        axes.append((node.id, "out"))
    for axis in axes:
        uf.find(axis)
    for p, c in graph.edges:
        uf.union((p, "out"), (c, "in"))
    for node in graph.nodes:
        if node.kind in PASSTHROUGH_KINDS or node.is_depthwise:
            uf.union((node.id, "in"), (node.id, "out"))

    buckets: dict[Axis, list[Axis]] = {}
    for axis in axes:
        buckets.setdefault(uf.find(axis), []).append(axis)

    groups = []
    for members in buckets.values():
        members = tuple(sorted(members))
        cards = {_axis_cardinality(graph, a) for a in members}
        if len(cards) != 1:
            raise GraphError(f"inconsistent cardinalities in coupled group {members}")
        prunable = True
        for lid, ax in members:
            node = graph.node(lid)
            if ax == "out" and node.kind == "input":
                prunable = False
            if ax == "out" and node.kind in PRUNABLE_KINDS and not node.prunable:
                prunable = False
            if ax == "out" and node.kind == "classifier":
                prunable = False
        # a group with no prunable weight-bearing output axis cannot be pruned
        if not any(ax == "out" and graph.node(lid).kind in PRUNABLE_KINDS
                   for lid, ax in members):
            prunable = False
        groups.append(CoupledGroup(
            members=members,
            cardinality=cards.pop(),
            prunable=prunable,
            pruning_class=_classify_group(graph, members),
        ))
    groups.sort(key=lambda g: g.members)
    return DependencyGraph(tuple(groups))


# ---------------------------------------------------------------------------
# isomorphic grouping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IsomorphicGroup:
    """Topology-equivalent layers ranked together for importance comparison.

    ``derived=True`` marks the head-granularity view of qkv layers; derived
    groups share members with their primary group and are excluded from the
    partition over prunable nodes.
    """

    signature: str
    members: tuple[str, ...]
    multiplier_key: str
    derived: bool = False


_KIND_TO_KEY = {
    "conv2d": "cnn-channel",
    "linear": "cnn-channel",
    "qkv-projection": "qkv",
    "attn-out-projection": "proj",
    "mlp-fc1": "mlp",
    "mlp-fc2": "mlp",
}


def _node_signature(node: LayerNode) -> str:
    g = math.gcd(node.in_channels, node.out_channels)
    fan = f"{node.out_channels // g}:{node.in_channels // g}"
    return (f"{node.kind}|k{node.kernel_h}x{node.kernel_w}|s{node.stride}"
            f"|h{node.num_heads}|f{fan}|g{node.groups}")


def group_isomorphic(graph: ModelGraph) -> list[IsomorphicGroup]:
    """Partition prunable nodes by canonical signature.

    The signature is (kind, kernel shape, stride, head count, reduced
    out:in fan, conv groups) — depth positions are deliberately excluded so
    repeated blocks across the network fall into one group. Deterministic:
    members and groups are emitted in sorted order.
    """
    buckets: dict[str, list[str]] = {}
    for node in graph.nodes:
        if node.kind in PRUNABLE_KINDS and node.prunable:
            buckets.setdefault(_node_signature(node), []).append(node.id)

    groups: list[IsomorphicGroup] = []
    for signature in sorted(buckets):
        members = tuple(sorted(buckets[signature]))
        kind = graph.node(members[0]).kind
        groups.append(IsomorphicGroup(
            signature=signature,
            members=members,
            multiplier_key=_KIND_TO_KEY[kind],
        ))
        if kind == "qkv-projection" and graph.node(members[0]).num_heads >= 2:
            groups.append(IsomorphicGroup(
                signature=signature + "|heads",
                members=members,
                multiplier_key="head",
                derived=True,
            ))
    return groups
