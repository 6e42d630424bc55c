"""Reference model graphs used by the demos and the test suite.

Two trainable desk-scale fixtures (a 4-conv residual CNN and a 2-block
attention/MLP transformer, both in the 1e6-1e7 MAC range) plus structural
fixtures shaped like the published architectures for MAC-accounting checks.
"""
from __future__ import annotations

from .netexec import WeightedNet, init_weights
from .netgraph import LayerNode, ModelGraph, load_graph, validate_graph

# frozen baseline accuracies of the trainable fixtures on their default
# datasets (established empirically, see tests/test_harness.py)
MINI_RESNET_BASELINE_ACC = 96.09375
MINI_DEIT_BASELINE_ACC = 100.0


def mini_resnet_spec() -> str:
    """4 convolutions with one residual join, pool and a 10-way classifier."""
    return """
# 3x16x16 images
dataset_profile: synthetic
in input 3 3 1 1 1 16 16 prunable=0
conv1 conv2d 3 16 3 3 1 16 16
conv2 conv2d 16 32 3 3 2 8 8
conv3 conv2d 32 32 3 3 1 8 8
res residual-add 32 32 1 1 1 8 8
conv4 conv2d 32 64 3 3 2 4 4
gap pool 64 64 1 1 1 1 1
head classifier 64 10 1 1 1 1 1
edges: in->conv1, conv1->conv2, conv2->conv3, conv2->res, conv3->res, res->conv4, conv4->gap, gap->head
"""


def mini_resnet_graph() -> ModelGraph:
    return load_graph(mini_resnet_spec())


def mini_deit_spec() -> str:
    """2 transformer blocks (qkv / proj / fc1 / fc2 with residual joins).

    32x32 images, 8x8 patches -> 16 tokens of dim 192, embedding 64,
    4 heads (head_dim 16), MLP hidden 256.
    """
    return """
dataset_profile: synthetic
in input 192 192 1 1 1 4 4 prunable=0
patch linear 192 64 1 1 1 4 4
qkv1 qkv-projection 64 192 1 1 1 4 4 heads=4
proj1 attn-out-projection 64 64 1 1 1 4 4
res1 residual-add 64 64 1 1 1 4 4
fc1a mlp-fc1 64 256 1 1 1 4 4
fc2a mlp-fc2 256 64 1 1 1 4 4
res2 residual-add 64 64 1 1 1 4 4
qkv2 qkv-projection 64 192 1 1 1 4 4 heads=4
proj2 attn-out-projection 64 64 1 1 1 4 4
res3 residual-add 64 64 1 1 1 4 4
fc1b mlp-fc1 64 256 1 1 1 4 4
fc2b mlp-fc2 256 64 1 1 1 4 4
res4 residual-add 64 64 1 1 1 4 4
head classifier 64 10 1 1 1 1 1
edges: in->patch, patch->qkv1, qkv1->proj1, patch->res1, proj1->res1, res1->fc1a, fc1a->fc2a, res1->res2, fc2a->res2, res2->qkv2, qkv2->proj2, res2->res3, proj2->res3, res3->fc1b, fc1b->fc2b, res3->res4, fc2b->res4, res4->head
"""


def mini_deit_graph() -> ModelGraph:
    return load_graph(mini_deit_spec())


def mini_mlp_graph() -> ModelGraph:
    """16 features -> 12 hidden units -> 4 classes; used for the
    leave-one-channel-out importance oracle."""
    return load_graph("""
dataset_profile: synthetic
in input 16 16 1 1 1 1 1 prunable=0
hidden linear 16 12 1 1 1 1 1
head classifier 12 4 1 1 1 1 1
edges: in->hidden, hidden->head
""")


def conv_chain_graph(depth: int = 8, channels: int = 64, kernel: int = 3,
                     spatial: int = 8, classes: int = 10) -> ModelGraph:
    """Uniform conv chain: 3-channel input, then ``depth`` equal 3x3 convs.

    All chain convs are explicitly prunable (including the first, whose
    3-channel input keeps its MAC share negligible) so the whole chain
    follows the quadratic MAC-vs-ratio regime.
    """
    lines = ["dataset_profile: synthetic",
             f"in input 3 3 1 1 1 {spatial} {spatial} prunable=0",
             f"c0 conv2d 3 {channels} {kernel} {kernel} 1 {spatial} {spatial} prunable=1"]
    for i in range(1, depth):
        lines.append(f"c{i} conv2d {channels} {channels} {kernel} {kernel} 1 "
                     f"{spatial} {spatial} prunable=1")
    lines.append(f"gap pool {channels} {channels} 1 1 1 1 1")
    lines.append(f"head classifier {channels} {classes} 1 1 1 1 1")
    edges = ["in->c0"] + [f"c{i}->c{i + 1}" for i in range(depth - 1)]
    edges += [f"c{depth - 1}->gap", "gap->head"]
    lines.append("edges: " + ", ".join(edges))
    return load_graph("\n".join(lines))


def deit_tiny_shaped_graph() -> ModelGraph:
    """A 12-block transformer whose linear-layer MAC total lands on the
    published DeiT-Tiny budget (1.26G) under per-token counting.

    Embedding width 208 absorbs the attention matmul cost that per-layer
    counting excludes; 197 tokens, 4 heads, MLP ratio 4.
    """
    d, tokens, heads, blocks = 208, 197, 4, 12
    mlp = 4 * d
    lines = ["dataset_profile: imagenet-like",
             f"in input 768 768 1 1 1 {tokens} 1 prunable=0",
             f"patch linear 768 {d} 1 1 1 {tokens} 1"]
    edges = ["in->patch"]
    prev = "patch"
    for b in range(blocks):
        lines += [
            f"qkv{b} qkv-projection {d} {3 * d} 1 1 1 {tokens} 1 heads={heads}",
            f"proj{b} attn-out-projection {d} {d} 1 1 1 {tokens} 1",
            f"resa{b} residual-add {d} {d} 1 1 1 {tokens} 1",
            f"fc1_{b} mlp-fc1 {d} {mlp} 1 1 1 {tokens} 1",
            f"fc2_{b} mlp-fc2 {mlp} {d} 1 1 1 {tokens} 1",
            f"resb{b} residual-add {d} {d} 1 1 1 {tokens} 1",
        ]
        edges += [f"{prev}->qkv{b}", f"qkv{b}->proj{b}", f"{prev}->resa{b}",
                  f"proj{b}->resa{b}", f"resa{b}->fc1_{b}", f"fc1_{b}->fc2_{b}",
                  f"resa{b}->resb{b}", f"fc2_{b}->resb{b}"]
        prev = f"resb{b}"
    lines.append(f"head classifier {d} 1000 1 1 1 1 1")
    edges.append(f"{prev}->head")
    lines.append("edges: " + ", ".join(edges))
    return load_graph("\n".join(lines))


def resnet50_shaped_graph(input_size: int = 224) -> ModelGraph:
    """Standard ResNet-50 bottleneck layout (4.1G MACs at 224x224)."""
    stages = [  # (blocks, mid, out, spatial after the stage's first block)
        (3, 64, 256, 56),
        (4, 128, 512, 28),
        (6, 256, 1024, 14),
        (3, 512, 2048, 7),
    ]
    s0 = input_size // 2  # conv1 output
    lines = ["dataset_profile: imagenet-like",
             f"in input 3 3 1 1 1 {input_size} {input_size} prunable=0",
             f"conv1 conv2d 3 64 7 7 2 {s0} {s0}"]
    edges = ["in->conv1"]
    prev, prev_ch = "conv1", 64
    prev_hw = s0 // 2  # maxpool halves to 56; pool is MAC-free so elide the node
    for si, (blocks, mid, out, hw) in enumerate(stages):
        for bi in range(blocks):
            stride = 2 if (bi == 0 and si > 0) else 1
            name = f"s{si}b{bi}"
            lines += [
                f"{name}a conv2d {prev_ch} {mid} 1 1 {stride} {hw} {hw}",
                f"{name}b conv2d {mid} {mid} 3 3 1 {hw} {hw}",
                f"{name}c conv2d {mid} {out} 1 1 1 {hw} {hw}",
            ]
            edges += [f"{prev}->{name}a", f"{name}a->{name}b", f"{name}b->{name}c"]
            if bi == 0:
                lines.append(f"{name}d conv2d {prev_ch} {out} 1 1 {stride} {hw} {hw}")
                edges.append(f"{prev}->{name}d")
                shortcut = f"{name}d"
            else:
                shortcut = prev
            lines.append(f"{name}r residual-add {out} {out} 1 1 1 {hw} {hw}")
            edges += [f"{name}c->{name}r", f"{shortcut}->{name}r"]
            prev, prev_ch, prev_hw = f"{name}r", out, hw
    lines += ["gap pool 2048 2048 1 1 1 1 1",
              "head classifier 2048 1000 1 1 1 1 1"]
    edges += [f"{prev}->gap", "gap->head"]
    lines.append("edges: " + ", ".join(edges))
    return load_graph("\n".join(lines))


def mini_resnet_net(seed: int = 11) -> WeightedNet:
    return init_weights(mini_resnet_graph(), seed=seed)


def mini_deit_net(seed: int = 13) -> WeightedNet:
    return init_weights(mini_deit_graph(), seed=seed, scale=0.7)


def mini_mlp_net(seed: int = 5) -> WeightedNet:
    return init_weights(mini_mlp_graph(), seed=seed)
