"""Forward/backward execution of a weighted layer graph.

The engine runs desk-scale networks described by a ModelGraph with dense
numpy weights: convolutions via im2col, per-token linear layers, and a
simplified per-head attention mixing for qkv blocks — values are combined
with unnormalized ``(q k^T / head_dim) v`` per head, so head pruning is
expressible without softmax attention. ReLU follows conv2d, mlp-fc1 and
hidden linear layers; norm nodes are identity at this scale.

Backward is hand-written reverse mode per layer kind, validated against
central finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netgraph import ModelGraph

_RELU_KINDS = ("conv2d", "mlp-fc1", "linear")
_WEIGHTED_KINDS = (
    "conv2d", "linear", "qkv-projection", "attn-out-projection",
    "mlp-fc1", "mlp-fc2", "classifier",
)


class ExecError(ValueError):
    pass


@dataclass
class WeightedNet:
    """A ModelGraph plus dense weights/biases keyed by layer id.

    Conv weights are ``(out, in/groups, kh, kw)``; linear-family weights are
    ``(out, in)``; biases are ``(out,)``. Shapes must match the graph's
    current dimensions exactly.
    """

    graph: ModelGraph
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]

    def copy(self) -> "WeightedNet":
        return WeightedNet(
            graph=self.graph,
            weights={k: v.copy() for k, v in self.weights.items()},
            biases={k: v.copy() for k, v in self.biases.items()},
        )

    def num_params(self) -> int:
        return (sum(w.size for w in self.weights.values())
                + sum(b.size for b in self.biases.values()))

    def check_shapes(self) -> None:
        for node in self.graph.nodes:
            if node.kind not in _WEIGHTED_KINDS:
                continue
            w = self.weights[node.id]
            if node.kind == "conv2d":
                expect = (node.out_channels, node.in_channels // node.groups,
                          node.kernel_h, node.kernel_w)
            else:
                expect = (node.out_channels, node.in_channels)
            if w.shape != expect:
                raise ExecError(
                    f"layer {node.id!r}: weight shape {w.shape} != expected {expect}")
            if self.biases[node.id].shape != (node.out_channels,):
                raise ExecError(f"layer {node.id!r}: bad bias shape")


def init_weights(graph: ModelGraph, seed: int, dtype=np.float64,
                 scale: float = 1.0) -> WeightedNet:
    """He-style random initialization, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    biases: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.kind not in _WEIGHTED_KINDS:
            continue
        if node.kind == "conv2d":
            fan_in = (node.in_channels // node.groups) * node.kernel_h * node.kernel_w
            shape = (node.out_channels, node.in_channels // node.groups,
                     node.kernel_h, node.kernel_w)
        else:
            fan_in = node.in_channels
            shape = (node.out_channels, node.in_channels)
        std = scale * np.sqrt(2.0 / fan_in)
        weights[node.id] = rng.normal(0.0, std, size=shape).astype(dtype)
        biases[node.id] = np.zeros(node.out_channels, dtype=dtype)
    return WeightedNet(graph=graph, weights=weights, biases=biases)


# ---------------------------------------------------------------------------
# conv helpers
# ---------------------------------------------------------------------------

def _conv_padding(in_hw: tuple[int, int], node) -> tuple[int, int]:
    pad_h = (node.out_h - 1) * node.stride + node.kernel_h - in_hw[0]
    pad_w = (node.out_w - 1) * node.stride + node.kernel_w - in_hw[1]
    if pad_h < 0 or pad_w < 0:
        raise ExecError(f"layer {node.id!r}: declared output larger than input allows")
    return pad_h, pad_w


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int,
            pad_h: int, pad_w: int, oh: int, ow: int) -> np.ndarray:
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0),
                    (pad_h // 2, pad_h - pad_h // 2),
                    (pad_w // 2, pad_w - pad_w // 2)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]  # (n, c, oh, ow, kh, kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int,
            pad_h: int, pad_w: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x_shape
    hp, wp = h + pad_h, w + pad_w
    dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    d = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += d[:, :, i, j]
    top, left = pad_h // 2, pad_w // 2
    return dxp[:, :, top:top + h, left:left + w]


def _patchify(x: np.ndarray, node) -> np.ndarray:
    """Reshape images (N,C,H,W) to token streams (N,T,patch_dim)."""
    n, c, h, w = x.shape
    th, tw = node.out_h, node.out_w
    if h % th or w % tw:
        raise ExecError(f"input {node.id!r}: image {h}x{w} not divisible into {th}x{tw} tokens")
    ph, pw = h // th, w // tw
    if c * ph * pw != node.in_channels:
        raise ExecError(
            f"input {node.id!r}: patch dim {c * ph * pw} != declared {node.in_channels}")
    x = x.reshape(n, c, th, ph, tw, pw).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(n, th * tw, c * ph * pw))


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _run_forward(net: WeightedNet, x: np.ndarray) -> tuple[dict, list[str], str]:
    """Execute the graph; returns (per-node cache, topo order, classifier id)."""
    graph = net.graph
    order = graph.topological_order()
    cache: dict[str, dict] = {}
    classifier_id = None

    for nid in order:
        node = graph.node(nid)
        rec: dict = {"node": node}
        if node.kind == "input":
            if x.ndim == 4 and node.out_h * node.out_w > 1 and x.shape[1] != node.in_channels:
                out = _patchify(x, node)
            else:
                out = x
            rec["out"] = out
            cache[nid] = rec
            continue

        producers = graph.producers(nid)
        if node.kind == "residual-add":
            inp = cache[producers[0]]["out"]
            for p in producers[1:]:
                inp = inp + cache[p]["out"]
        else:
            if len(producers) != 1:
                raise ExecError(f"layer {nid!r}: expected one producer, got {len(producers)}")
            inp = cache[producers[0]]["out"]
        rec["in"] = inp

        if node.kind == "residual-add" or node.kind == "norm":
            rec["out"] = inp
        elif node.kind == "pool":
            if inp.ndim == 4:
                rec["out"] = inp.mean(axis=(2, 3))
            else:
                rec["out"] = inp.mean(axis=1)
        elif node.kind == "conv2d":
            if node.groups != 1:
                raise ExecError("grouped convolution execution not supported")
            in_hw = inp.shape[2], inp.shape[3]
            pad_h, pad_w = _conv_padding(in_hw, node)
            cols = _im2col(inp, node.kernel_h, node.kernel_w, node.stride,
                           pad_h, pad_w, node.out_h, node.out_w)
            wm = net.weights[nid].reshape(node.out_channels, -1)
            z = np.einsum("oc,ncp->nop", wm, cols)
            z = z.reshape(inp.shape[0], node.out_channels, node.out_h, node.out_w)
            z = z + net.biases[nid][None, :, None, None]
            rec.update(cols=cols, pad=(pad_h, pad_w), z=z)
            rec["out"] = np.maximum(z, 0.0)
        elif node.kind == "qkv-projection":
            w, b = net.weights[nid], net.biases[nid]
            qkv = inp @ w.T + b  # (n, t, 3i)
            inner = node.out_channels // 3
            hd = inner // node.num_heads
            q, k, v = qkv[:, :, :inner], qkv[:, :, inner:2 * inner], qkv[:, :, 2 * inner:]
            outs, attn = [], []
            for h in range(node.num_heads):
                s = slice(h * hd, (h + 1) * hd)
                a = q[:, :, s] @ k[:, :, s].transpose(0, 2, 1) / hd
                outs.append(a @ v[:, :, s])
                attn.append(a)
            rec.update(qkv=qkv, inner=inner, hd=hd, attn=attn)
            rec["out"] = np.concatenate(outs, axis=2)
        elif node.kind in ("attn-out-projection", "mlp-fc1", "mlp-fc2",
                           "linear", "classifier"):
            w, b = net.weights[nid], net.biases[nid]
            feats = inp
            if node.kind == "classifier":
                if feats.ndim == 4:
                    feats = feats.mean(axis=(2, 3))
                elif feats.ndim == 3:
                    feats = feats.mean(axis=1)
                rec["pooled_from"] = inp.ndim
            z = feats @ w.T + b
            rec.update(feats=feats, z=z)
            if node.kind in _RELU_KINDS:
                rec["out"] = np.maximum(z, 0.0)
            else:
                rec["out"] = z
        else:
            raise ExecError(f"cannot execute layer kind {node.kind!r}")
        cache[nid] = rec
        if node.kind == "classifier":
            classifier_id = nid

    if classifier_id is None:
        raise ExecError("graph has no classifier node")
    return cache, order, classifier_id


def forward(net: WeightedNet, x: np.ndarray) -> np.ndarray:
    """Logits of shape (N, num_classes)."""
    cache, _, classifier_id = _run_forward(net, np.asarray(x))
    return cache[classifier_id]["out"]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                          label_smoothing: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean CE loss and dL/dlogits."""
    n, k = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    targets = np.full((n, k), label_smoothing / k, dtype=logits.dtype)
    targets[np.arange(n), labels] += 1.0 - label_smoothing
    loss = float(-(targets * log_probs).sum() / n)
    dlogits = (probs - targets) / n
    return loss, dlogits


@dataclass
class Gradients:
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]


def forward_backward(net: WeightedNet, batch_x: np.ndarray, batch_y: np.ndarray,
                     label_smoothing: float = 0.0) -> tuple[float, Gradients]:
    """Cross-entropy loss and exact gradients for every weight and bias."""
    x = np.asarray(batch_x)
    y = np.asarray(batch_y)
    cache, order, classifier_id = _run_forward(net, x)
    logits = cache[classifier_id]["out"]
    if logits.shape[0] != y.shape[0]:
        raise ExecError("batch size mismatch between inputs and labels")
    loss, dlogits = softmax_cross_entropy(logits, y, label_smoothing)

    graph = net.graph
    dout: dict[str, np.ndarray] = {classifier_id: dlogits}
    gw: dict[str, np.ndarray] = {}
    gb: dict[str, np.ndarray] = {}

    for nid in reversed(order):
        node = graph.node(nid)
        if nid not in dout or node.kind == "input":
            continue
        grad = dout.pop(nid)
        rec = cache[nid]

        if node.kind in ("residual-add", "norm"):
            dinp = grad
        elif node.kind == "pool":
            inp = rec["in"]
            if inp.ndim == 4:
                dinp = np.broadcast_to(
                    grad[:, :, None, None] / (inp.shape[2] * inp.shape[3]), inp.shape).copy()
            else:
                dinp = np.broadcast_to(grad[:, None, :] / inp.shape[1], inp.shape).copy()
        elif node.kind == "conv2d":
            dz = grad * (rec["z"] > 0)
            n = dz.shape[0]
            dzm = dz.reshape(n, node.out_channels, -1)
            cols = rec["cols"]
            gw[nid] = np.einsum("nop,ncp->oc", dzm, cols).reshape(net.weights[nid].shape)
            gb[nid] = dz.sum(axis=(0, 2, 3))
            wm = net.weights[nid].reshape(node.out_channels, -1)
            dcols = np.einsum("oc,nop->ncp", wm, dzm)
            pad_h, pad_w = rec["pad"]
            dinp = _col2im(dcols, rec["in"].shape, node.kernel_h, node.kernel_w,
                           node.stride, pad_h, pad_w, node.out_h, node.out_w)
        elif node.kind == "qkv-projection":
            inner, hd = rec["inner"], rec["hd"]
            qkv = rec["qkv"]
            q, k, v = (qkv[:, :, :inner], qkv[:, :, inner:2 * inner],
                       qkv[:, :, 2 * inner:])
            dq = np.zeros_like(q)
            dk = np.zeros_like(k)
            dv = np.zeros_like(v)
            for h in range(node.num_heads):
                s = slice(h * hd, (h + 1) * hd)
                do = grad[:, :, s]
                a = rec["attn"][h]
                da = do @ v[:, :, s].transpose(0, 2, 1)
                dv[:, :, s] = a.transpose(0, 2, 1) @ do
                dq[:, :, s] = da @ k[:, :, s] / hd
                dk[:, :, s] = da.transpose(0, 2, 1) @ q[:, :, s] / hd
            dqkv = np.concatenate([dq, dk, dv], axis=2)
            inp = rec["in"]
            gw[nid] = np.einsum("nto,nti->oi", dqkv, inp)
            gb[nid] = dqkv.sum(axis=(0, 1))
            dinp = dqkv @ net.weights[nid]
        else:  # dense family
            z = rec["z"]
            dz = grad * (z > 0) if node.kind in _RELU_KINDS else grad
            feats = rec["feats"]
            if feats.ndim == 3:
                gw[nid] = np.einsum("nto,nti->oi", dz, feats)
                gb[nid] = dz.sum(axis=(0, 1))
                dfeats = dz @ net.weights[nid]
            else:
                gw[nid] = dz.T @ feats
                gb[nid] = dz.sum(axis=0)
                dfeats = dz @ net.weights[nid]
            if node.kind == "classifier" and rec.get("pooled_from"):
                inp = rec["in"]
                if rec["pooled_from"] == 4:
                    dinp = np.broadcast_to(
                        dfeats[:, :, None, None] / (inp.shape[2] * inp.shape[3]),
                        inp.shape).copy()
                elif rec["pooled_from"] == 3:
                    dinp = np.broadcast_to(dfeats[:, None, :] / inp.shape[1],
                                           inp.shape).copy()
                else:
                    dinp = dfeats
            else:
                dinp = dfeats

        producers = graph.producers(nid)
        for p in producers:
            contrib = dinp
            if graph.node(p).kind == "input":
                continue
            if p in dout:
                dout[p] = dout[p] + contrib
            else:
                dout[p] = contrib.copy() if len(producers) > 1 else contrib

    # layers never reached by the loss gradient still get zero entries
    for nid, w in net.weights.items():
        gw.setdefault(nid, np.zeros_like(w))
        gb.setdefault(nid, np.zeros_like(net.biases[nid]))
    return loss, Gradients(weights=gw, biases=gb)
