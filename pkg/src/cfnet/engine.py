"""Forward and reverse execution of graph specs.

``forward`` walks the node list once, recording a backward closure per node
(the tape); ``backward`` replays the tape in reverse, accumulating output
gradients by summation wherever a value feeds several consumers, which is
exactly how the per-branch contributions at a pooling layer combine.  Edges
can be blocked to measure one path's contribution in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import FusionParams, apply_fusion, stack_branches
from .layers import (
    conv2d_fb,
    fc_fb,
    gap_fb,
    maxpool2d_fb,
    relu_fb,
    softmax_ce_fb,
)


@dataclass
class Tape:
    """Saved forward state: node outputs plus one backward closure per node."""

    graph: object
    values: dict
    steps: list
    loss: object


def _node_forward(node, inputs, params, graph, labels):
    kind = node.kind
    if kind == "conv3x3":
        return conv2d_fb(inputs[0], params[f"{node.name}.kernel"],
                         params[f"{node.name}.bias"], stride=1, pad=1)
    if kind == "conv1x1":
        return conv2d_fb(inputs[0], params[f"{node.name}.kernel"],
                         params[f"{node.name}.bias"], stride=1, pad=0)
    if kind == "maxpool":
        return maxpool2d_fb(inputs[0], window=2, stride=2)
    if kind == "relu":
        return relu_fb(inputs[0])
    if kind == "gap":
        return gap_fb(inputs[0])
    if kind == "stack":
        return stack_branches(inputs)
    if kind == "fuse":
        fp = FusionParams(graph.fusion,
                          params.get(f"{node.name}.weight"),
                          params.get(f"{node.name}.bias"))
        return apply_fusion(inputs[0], fp)
    if kind == "fc":
        return fc_fb(inputs[0], params[f"{node.name}.weight"],
                     params[f"{node.name}.bias"])
    if kind == "softmax_ce":
        if labels is None:
            raise ValueError("labels are required to evaluate the loss node")
        return softmax_ce_fb(inputs[0], labels)
    raise ValueError(f"unknown node kind {kind!r}")


def forward(graph, params, images, labels):
    """Run the full graph on a batch; returns (LossValue, Tape)."""
    values = {"input": images}
    steps = []
    loss = None
    for node in graph.nodes:
        inputs = [values[name] for name in node.inputs]
        out, bwd = _node_forward(node, inputs, params, graph, labels)
        if node.kind == "softmax_ce":
            loss = out
            values[node.name] = out.probs
        else:
            values[node.name] = out
        steps.append((node, bwd))
    if loss is None:
        raise ValueError("graph has no loss node")
    return loss, Tape(graph, values, steps, loss)


def forward_features(graph, params, images, node_name):
    """Run the graph up to ``node_name`` and return that node's output."""
    values = {"input": images}
    for node in graph.nodes:
        if node.kind == "softmax_ce":
            continue
        inputs = [values[name] for name in node.inputs]
        out, _ = _node_forward(node, inputs, params, graph, None)
        values[node.name] = out
        if node.name == node_name:
            return out
    raise ValueError(f"node {node_name!r} not found (or it is the loss node)")


def backward(tape, blocked_edges=frozenset()):
    """Reverse pass over a tape.

    Returns ``(param_grads, node_grads)`` where ``node_grads[name]`` is the
    loss gradient at that node's output (and at ``"input"``).  Gradient flow
    along ``(consumer, producer)`` pairs listed in ``blocked_edges`` is
    dropped, which isolates per-path contributions; parameters upstream of
    only blocked paths are then absent from ``param_grads``.
    """
    node_grads = {}
    param_grads = {}
    blocked_edges = frozenset(blocked_edges)

    def send(consumer, producer, grad):
        if (consumer, producer) in blocked_edges:
            return
        if producer in node_grads:
            node_grads[producer] = node_grads[producer] + grad
        else:
            node_grads[producer] = grad

    for node, bwd in reversed(tape.steps):
        if node.kind == "softmax_ce":
            send(node.name, node.inputs[0], bwd())
            continue
        dout = node_grads.get(node.name)
        if dout is None:
            continue
        if node.kind in ("conv3x3", "conv1x1"):
            dx, dk, db = bwd(dout)
            param_grads[f"{node.name}.kernel"] = dk
            param_grads[f"{node.name}.bias"] = db
            send(node.name, node.inputs[0], dx)
        elif node.kind == "fc":
            dx, dw, db = bwd(dout)
            param_grads[f"{node.name}.weight"] = dw
            param_grads[f"{node.name}.bias"] = db
            send(node.name, node.inputs[0], dx)
        elif node.kind == "fuse":
            dg, dw, db = bwd(dout)
            if dw is not None:
                param_grads[f"{node.name}.weight"] = dw
                param_grads[f"{node.name}.bias"] = db
            send(node.name, node.inputs[0], dg)
        elif node.kind == "stack":
            for producer, dgi in zip(node.inputs, bwd(dout)):
                send(node.name, producer, dgi)
        else:
            send(node.name, node.inputs[0], bwd(dout))
    return param_grads, node_grads
