"""Declarative network graphs: node specs, builders, and parameter init.

A graph is an ordered list of typed nodes forming a DAG over named values;
``input`` is the implicit image node.  Side branches hang off pooling
layers as conv1x1 -> relu -> gap chains, get stacked together with the
main-trunk gap feature (always the last slot), fused, and classified by a
single fully-connected layer.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .fusion import FUSION_KINDS, fusion_param_count, init_conv, init_lc

NODE_KINDS = ("conv3x3", "conv1x1", "maxpool", "relu", "gap", "stack",
              "fuse", "fc", "softmax_ce")

CIFAR_WIDTHS = (96, 96, 192, 192, 192, 192)
CIFAR_POOLS = (2, 4, 6)
CIFAR_BRANCH_POINTS = ("pool2", "pool3")
CIFAR_FUSE_CHANNELS = 192


@dataclass(frozen=True)
class NodeSpec:
    name: str
    kind: str
    inputs: tuple
    out_channels: int | None = None


@dataclass(frozen=True)
class GraphSpec:
    nodes: tuple
    branch_points: tuple
    fusion: str | None
    num_classes: int
    fuse_channels: int

    def node(self, name):
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(f"no node named {name!r}")

    def find(self, kind):
        return [n for n in self.nodes if n.kind == kind]

    @property
    def loss_node(self):
        return self.find("softmax_ce")[0]

    @property
    def logits_node(self):
        return self.loss_node.inputs[0]

    @property
    def fuse_node(self):
        fuses = self.find("fuse")
        return fuses[0] if fuses else None

    @property
    def branch_count(self):
        """S: side branches plus the main branch."""
        return len(self.branch_points) + 1


def channel_flow(graph):
    """Channel count at every node output (vector width for gap/stack/fuse/fc)."""
    channels = {"input": 3}
    for node in graph.nodes:
        if node.kind in ("conv3x3", "conv1x1", "fc"):
            channels[node.name] = node.out_channels
        else:
            channels[node.name] = channels[node.inputs[0]]
    return channels


def validate_graph(graph):
    """Check structural invariants; raises ValueError on the first violation."""
    names = set()
    consumed = set()
    kinds = {}
    for node in graph.nodes:
        if node.kind not in NODE_KINDS:
            raise ValueError(f"unknown node kind {node.kind!r}")
        if node.name in names or node.name == "input":
            raise ValueError(f"duplicate node name {node.name!r}")
        for ref in node.inputs:
            if ref != "input" and ref not in names:
                raise ValueError(
                    f"node {node.name!r} references {ref!r} before definition")
            consumed.add(ref)
        if node.kind in ("conv3x3", "conv1x1", "fc") and not node.out_channels:
            raise ValueError(f"node {node.name!r} needs out_channels")
        names.add(node.name)
        kinds[node.name] = node.kind

    losses = graph.find("softmax_ce")
    if len(losses) != 1:
        raise ValueError(f"graph must have exactly one loss node, found {len(losses)}")
    for node in graph.nodes:
        if node.kind != "softmax_ce" and node.name not in consumed:
            raise ValueError(f"node {node.name!r} output is never consumed")

    stacks = graph.find("stack")
    fuses = graph.find("fuse")
    if len(stacks) != len(fuses) or len(stacks) > 1:
        raise ValueError("graph needs exactly one stack + fuse pair, or neither")
    if stacks:
        if graph.fusion not in FUSION_KINDS:
            raise ValueError(f"invalid fusion kind {graph.fusion!r}")
        stack = stacks[0]
        if len(stack.inputs) != graph.branch_count:
            raise ValueError(
                f"stack has {len(stack.inputs)} inputs but S = {graph.branch_count}")
        for ref in stack.inputs:
            if kinds[ref] != "gap":
                raise ValueError(f"stack input {ref!r} is not a gap node")
        for point in graph.branch_points:
            if point not in kinds:
                raise ValueError(f"branch point {point!r} does not exist")
            if kinds[point] != "maxpool":
                raise ValueError(f"branch point {point!r} is not a pooling node")
    elif graph.branch_points:
        raise ValueError("branch points declared but graph has no stack node")


def build_generic_cfn(widths, pools, branch_points=(), fusion="lc",
                      fuse_channels=16, num_classes=10):
    """Assemble a fusion network from 3x3 trunk widths and pool placements.

    ``pools`` lists 1-based conv indices followed by a 2x2 max pool;
    ``branch_points`` names pool nodes that sprout conv1x1 -> relu -> gap
    side branches of ``fuse_channels`` channels each.  With no branch
    points the graph degenerates to a plain CNN (gap feeds the classifier
    directly, no stack or fuse nodes).
    """
    widths = tuple(int(w) for w in widths)
    pools = tuple(int(p) for p in pools)
    branch_points = tuple(branch_points)
    if not widths or any(w < 1 for w in widths):
        raise ValueError(f"invalid trunk widths {widths}")
    if any(p < 1 or p > len(widths) for p in pools) or list(pools) != sorted(set(pools)):
        raise ValueError(f"pool positions {pools} must be increasing conv indices")
    if fuse_channels < 1:
        raise ValueError("fuse_channels must be >= 1")
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if branch_points and fusion not in FUSION_KINDS:
        raise ValueError(f"unknown fusion kind {fusion!r}")

    nodes = []
    prev = "input"
    pool_names = []
    pool_after = set(pools)
    for i, width in enumerate(widths, start=1):
        nodes.append(NodeSpec(f"conv{i}", "conv3x3", (prev,), width))
        nodes.append(NodeSpec(f"relu{i}", "relu", (f"conv{i}",)))
        prev = f"relu{i}"
        if i in pool_after:
            pool_name = f"pool{len(pool_names) + 1}"
            nodes.append(NodeSpec(pool_name, "maxpool", (prev,)))
            pool_names.append(pool_name)
            prev = pool_name

    head = len(widths) + 1
    nodes.append(NodeSpec(f"conv{head}", "conv1x1", (prev,), fuse_channels))
    nodes.append(NodeSpec(f"relu{head}", "relu", (f"conv{head}",)))
    main_gap = f"gap{head}"
    nodes.append(NodeSpec(main_gap, "gap", (f"relu{head}",)))

    for point in branch_points:
        if point not in pool_names:
            raise ValueError(f"branch point {point!r} is not a pooling node")

    if branch_points:
        gap_names = []
        for bi, point in enumerate(branch_points, start=1):
            conv = f"branch{bi}_conv"
            relu = f"branch{bi}_relu"
            gap = f"branch{bi}_gap"
            nodes.append(NodeSpec(conv, "conv1x1", (point,), fuse_channels))
            nodes.append(NodeSpec(relu, "relu", (conv,)))
            nodes.append(NodeSpec(gap, "gap", (relu,)))
            gap_names.append(gap)
        gap_names.append(main_gap)  # main branch rides in the last slot
        nodes.append(NodeSpec("stack", "stack", tuple(gap_names)))
        nodes.append(NodeSpec("fuse", "fuse", ("stack",)))
        feature = "fuse"
        graph_fusion = fusion
    else:
        feature = main_gap
        graph_fusion = None

    nodes.append(NodeSpec("fc", "fc", (feature,), num_classes))
    nodes.append(NodeSpec("loss", "softmax_ce", ("fc",)))
    graph = GraphSpec(tuple(nodes), branch_points, graph_fusion,
                      num_classes, fuse_channels)
    validate_graph(graph)
    return graph


def build_plain_cifar_cnn(num_classes=10):
    """Seven-conv CIFAR trunk: six 3x3 convs, a 1x1 head, gap, and one FC."""
    return build_generic_cfn(CIFAR_WIDTHS, CIFAR_POOLS, (), fusion="lc",
                             fuse_channels=CIFAR_FUSE_CHANNELS,
                             num_classes=num_classes)


def build_cfn_cifar(num_classes=10, fusion="lc"):
    """CIFAR trunk plus side branches at pool2 and pool3 (S = 3)."""
    return build_generic_cfn(CIFAR_WIDTHS, CIFAR_POOLS, CIFAR_BRANCH_POINTS,
                             fusion=fusion, fuse_channels=CIFAR_FUSE_CHANNELS,
                             num_classes=num_classes)


def _param_seed(seed, name):
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _he_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(graph, seed, dtype=np.float32):
    """Initialize all parameters deterministically from the run seed.

    Conv kernels and FC weights draw from a fan-in-scaled uniform
    (He-style, bound sqrt(6/fan_in)) with a per-parameter generator seeded
    from (seed, parameter name), so shared layer names get identical values
    across architectures.  Biases start at zero and fusion weights at 1/S.
    """
    dtype = np.dtype(dtype)
    channels = channel_flow(graph)
    params = {}
    for node in graph.nodes:
        if node.kind in ("conv3x3", "conv1x1"):
            cin = channels[node.inputs[0]]
            k = 3 if node.kind == "conv3x3" else 1
            rng = np.random.Generator(np.random.PCG64(
                _param_seed(seed, f"{node.name}.kernel")))
            params[f"{node.name}.kernel"] = _he_uniform(
                rng, (node.out_channels, cin, k, k), cin * k * k, dtype)
            params[f"{node.name}.bias"] = np.zeros(node.out_channels, dtype=dtype)
        elif node.kind == "fc":
            fan_in = channels[node.inputs[0]]
            rng = np.random.Generator(np.random.PCG64(
                _param_seed(seed, f"{node.name}.weight")))
            params[f"{node.name}.weight"] = _he_uniform(
                rng, (node.out_channels, fan_in), fan_in, dtype)
            params[f"{node.name}.bias"] = np.zeros(node.out_channels, dtype=dtype)
        elif node.kind == "fuse":
            if graph.fusion == "lc":
                fp = init_lc(graph.fuse_channels, graph.branch_count, dtype)
            elif graph.fusion == "conv":
                fp = init_conv(graph.branch_count, dtype)
            else:
                fp = None
            if fp is not None:
                params[f"{node.name}.weight"] = fp.weight
                params[f"{node.name}.bias"] = fp.bias
    return params


def param_count(params):
    return int(sum(p.size for p in params.values()))


@dataclass(frozen=True)
class ParamBreakdown:
    """Element counts split into trunk, side branches, and fusion weights."""

    basic: int
    side_branches: int
    fusion: int

    @property
    def total(self):
        return self.basic + self.side_branches + self.fusion


def param_breakdown(graph):
    """Analytic parameter counts per graph section; matches init_params sizes."""
    channels = channel_flow(graph)
    basic = 0
    side = 0
    fusion = 0
    for node in graph.nodes:
        if node.kind in ("conv3x3", "conv1x1"):
            cin = channels[node.inputs[0]]
            k = 3 if node.kind == "conv3x3" else 1
            count = node.out_channels * cin * k * k + node.out_channels
            if node.name.startswith("branch"):
                side += count
            else:
                basic += count
        elif node.kind == "fc":
            basic += node.out_channels * channels[node.inputs[0]] + node.out_channels
        elif node.kind == "fuse":
            fusion += fusion_param_count(graph.fusion, graph.fuse_channels,
                                         graph.branch_count)
    return ParamBreakdown(basic, side, fusion)
