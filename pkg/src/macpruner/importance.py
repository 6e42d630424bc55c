"""Structural-unit importance scoring.

Every prunable output channel of every prunable layer receives one
nonnegative score. ``taylor`` sums |gradient * parameter| over the
channel's weights (bias included — removing a channel removes its bias),
accumulated over calibration batches; ``l1norm``/``l2norm`` use the weight
slice alone; ``random`` draws uniform scores reproducible from a seed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .netexec import Gradients, WeightedNet, forward_backward, init_weights  # noqa: F401
from .netgraph import ModelGraph, PRUNABLE_KINDS

CRITERIA = ("taylor", "l1norm", "l2norm", "random")


class ImportanceError(ValueError):
    pass


@dataclass
class ImportanceTable:
    """Scores keyed by (layer id, output channel index)."""

    criterion: str
    scores: dict[tuple[str, int], float]

    def score(self, layer: str, channel: int) -> float:
        return self.scores[(layer, channel)]

    def layer_scores(self, layer: str) -> list[float]:
        out = []
        i = 0
        while (layer, i) in self.scores:
            out.append(self.scores[(layer, i)])
            i += 1
        return out

    def to_json(self) -> str:
        return json.dumps({
            "criterion": self.criterion,
            "scores": {f"{layer}:{ch}": s for (layer, ch), s in sorted(self.scores.items())},
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ImportanceTable":
        doc = json.loads(text)
        scores = {}
        for key, value in doc["scores"].items():
            layer, _, ch = key.rpartition(":")
            scores[(layer, int(ch))] = float(value)
        return cls(criterion=doc["criterion"], scores=scores)


def _prunable_layers(graph: ModelGraph):
    return [n for n in graph.nodes if n.kind in PRUNABLE_KINDS and n.prunable]


def taylor_scores(net: WeightedNet, calibration: list[tuple[np.ndarray, np.ndarray]],
                  label_smoothing: float = 0.0) -> ImportanceTable:
    """First-order Taylor importance summed over calibration batches."""
    if not calibration:
        raise ImportanceError("taylor scoring requires at least one calibration batch")
    scores: dict[tuple[str, int], float] = {}
    layers = _prunable_layers(net.graph)
    for node in layers:
        for ch in range(node.out_channels):
            scores[(node.id, ch)] = 0.0
    for batch_x, batch_y in calibration:
        _, grads = forward_backward(net, batch_x, batch_y, label_smoothing)
        for node in layers:
            w = net.weights[node.id]
            g = grads.weights[node.id]
            per_channel = np.abs(g * w).reshape(w.shape[0], -1).sum(axis=1)
            per_channel = per_channel + np.abs(
                grads.biases[node.id] * net.biases[node.id])
            for ch in range(node.out_channels):
                scores[(node.id, ch)] += float(per_channel[ch])
    return ImportanceTable(criterion="taylor", scores=scores)


def magnitude_scores(net: WeightedNet, norm: str = "l1") -> ImportanceTable:
    """Per-channel L1 or L2 norm of the weight slice."""
    if norm not in ("l1", "l2"):
        raise ImportanceError(f"unknown norm {norm!r}")
    scores: dict[tuple[str, int], float] = {}
    for node in _prunable_layers(net.graph):
        w = net.weights[node.id].reshape(net.weights[node.id].shape[0], -1)
        if norm == "l1":
            per_channel = np.abs(w).sum(axis=1)
        else:
            per_channel = np.sqrt((w * w).sum(axis=1))
        for ch in range(node.out_channels):
            scores[(node.id, ch)] = float(per_channel[ch])
    return ImportanceTable(criterion=f"{norm}norm", scores=scores)


def random_scores(net: WeightedNet, seed: int) -> ImportanceTable:
    return random_scores_for_graph(net.graph, seed)


def random_scores_for_graph(graph: ModelGraph, seed: int) -> ImportanceTable:
    """Uniform [0,1) scores; identical seed gives an identical table."""
    rng = np.random.default_rng(seed)
    scores: dict[tuple[str, int], float] = {}
    for node in sorted(_prunable_layers(graph), key=lambda n: n.id):
        draw = rng.random(node.out_channels)
        for ch in range(node.out_channels):
            scores[(node.id, ch)] = float(draw[ch])
    return ImportanceTable(criterion="random", scores=scores)


def compute_scores(net: WeightedNet, criterion: str,
                   calibration: list[tuple[np.ndarray, np.ndarray]] | None = None,
                   seed: int = 0) -> ImportanceTable:
    """Dispatch on the strategy's importance criterion."""
    if criterion == "taylor":
        return taylor_scores(net, calibration or [])
    if criterion == "l1norm":
        return magnitude_scores(net, "l1")
    if criterion == "l2norm":
        return magnitude_scores(net, "l2")
    if criterion == "random":
        return random_scores(net, seed)
    raise ImportanceError(f"unknown importance criterion {criterion!r}")
