"""Gradient-check inventory over every differentiable op.

Each op gets a scalar-valued function of its float64 inputs/parameters (the
output is contracted against a fixed random projection) whose analytic
gradients come from the op's own backward closure.  Input generation keeps
ReLU pre-activations and within-window pool gaps away from zero by a margin
well above the finite-difference step, redrawing deterministically from the
next derived seed when a draw lands too close to a kink.
"""

from __future__ import annotations

import numpy as np

from . import fusion as fu
from .engine import backward, forward
from .gradcheck import grad_check
from .graph import build_generic_cfn, init_params
from .layers import (
    conv2d_fb,
    fc_fb,
    gap_fb,
    maxpool2d_fb,
    relu_fb,
    softmax_ce_fb,
)

KINK_MARGIN = 1e-3
# a full graph has thousands of kink sites, so its feasible margin is smaller;
# still ~50x the reach of an eps=1e-5 parameter perturbation
FULL_GRAPH_MARGIN = 5e-4

OP_NAMES = ("fc", "gap", "relu", "conv1x1", "conv3x3", "maxpool",
            "softmax_ce", "stack", "fuse_sum", "fuse_conv", "fuse_lc")


def _rng(seed, salt):
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, salt])))


def _uniform(rng, shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def _away_from_zero(rng, shape, margin):
    x = rng.uniform(-1.0, 1.0, size=shape)
    return x + margin * np.sign(x)


def _pool_safe_input(seed, shape, window=2, stride=2):
    # redraw until every pooling window has a clear winner
    for attempt in range(64):
        rng = _rng(seed, 1000 + attempt)
        x = rng.uniform(0.0, 1.0, size=shape)
        n, c, h, w = shape
        ok = True
        for wy in range(0, h - window + 1, stride):
            for wx in range(0, w - window + 1, stride):
                win = x[:, :, wy:wy + window, wx:wx + window].reshape(n, c, -1)
                top2 = np.sort(win, axis=2)[:, :, -2:]
                if np.min(top2[:, :, 1] - top2[:, :, 0]) < KINK_MARGIN:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return x
    raise RuntimeError("could not draw a tie-free pooling input")


def _fusion_safe_stack(seed, n, k, s, weight_fn):
    # redraw until no fused pre-activation sits within the kink margin
    for attempt in range(64):
        rng = _rng(seed, 2000 + attempt)
        g = _uniform(rng, (n, k, s))
        weight, bias = weight_fn(rng)
        if weight is None:
            pre = g.sum(axis=2)
        elif weight.ndim == 1:
            pre = g @ weight + bias[0]
        else:
            pre = (g * weight[None]).sum(axis=2) + bias
        if np.min(np.abs(pre)) > KINK_MARGIN:
            return g, weight, bias
    raise RuntimeError("could not draw a kink-free fusion stack")


def _projected(out, proj):
    return float((out * proj).sum())


def check_fc(seed, eps, threshold):
    rng = _rng(seed, 1)
    params = {
        "input": _uniform(rng, (3, 5)),
        "weight": _uniform(rng, (4, 5)),
        "bias": _uniform(rng, (4,)),
    }
    proj = _uniform(rng, (3, 4))

    def f(p):
        out, bwd = fc_fb(p["input"], p["weight"], p["bias"])
        dx, dw, db = bwd(proj)
        return _projected(out, proj), {"input": dx, "weight": dw, "bias": db}

    return grad_check(f, params, eps, threshold)


def check_gap(seed, eps, threshold):
    rng = _rng(seed, 2)
    params = {"input": _uniform(rng, (2, 3, 4, 5))}
    proj = _uniform(rng, (2, 3))

    def f(p):
        out, bwd = gap_fb(p["input"])
        return _projected(out, proj), {"input": bwd(proj)}

    return grad_check(f, params, eps, threshold)


def check_relu(seed, eps, threshold):
    rng = _rng(seed, 3)
    params = {"input": _away_from_zero(rng, (3, 7), 0.05)}
    proj = _uniform(rng, (3, 7))

    def f(p):
        out, bwd = relu_fb(p["input"])
        return _projected(out, proj), {"input": bwd(proj)}

    return grad_check(f, params, eps, threshold)


def _check_conv(seed, eps, threshold, ksize, pad):
    rng = _rng(seed, 4 + ksize)
    cin, cout = 3, 4
    params = {
        "input": _uniform(rng, (2, cin, 5, 5)),
        "kernel": _uniform(rng, (cout, cin, ksize, ksize)),
        "bias": _uniform(rng, (cout,)),
    }
    hout = 5 + 2 * pad - ksize + 1
    proj = _uniform(rng, (2, cout, hout, hout))

    def f(p):
        out, bwd = conv2d_fb(p["input"], p["kernel"], p["bias"], stride=1, pad=pad)
        dx, dk, db = bwd(proj)
        return _projected(out, proj), {"input": dx, "kernel": dk, "bias": db}

    return grad_check(f, params, eps, threshold)


def check_conv1x1(seed, eps, threshold):
    return _check_conv(seed, eps, threshold, ksize=1, pad=0)


def check_conv3x3(seed, eps, threshold):
    return _check_conv(seed, eps, threshold, ksize=3, pad=1)


def check_maxpool(seed, eps, threshold):
    params = {"input": _pool_safe_input(seed, (2, 3, 6, 6))}
    proj = _uniform(_rng(seed, 6), (2, 3, 3, 3))

    def f(p):
        out, bwd = maxpool2d_fb(p["input"], window=2, stride=2)
        return _projected(out, proj), {"input": bwd(proj)}

    return grad_check(f, params, eps, threshold)


def check_softmax_ce(seed, eps, threshold):
    rng = _rng(seed, 7)
    params = {"logits": _uniform(rng, (4, 6), -2.0, 2.0)}
    labels = rng.integers(0, 6, size=4)

    def f(p):
        loss, bwd = softmax_ce_fb(p["logits"], labels)
        return loss.value, {"logits": bwd()}

    return grad_check(f, params, eps, threshold)


def check_stack(seed, eps, threshold):
    rng = _rng(seed, 8)
    params = {f"g{i}": _uniform(rng, (2, 5)) for i in range(3)}
    proj = _uniform(rng, (2, 5, 3))

    def f(p):
        out, bwd = fu.stack_branches([p["g0"], p["g1"], p["g2"]])
        grads = bwd(proj)
        return _projected(out, proj), {f"g{i}": grads[i] for i in range(3)}

    return grad_check(f, params, eps, threshold)


def check_fuse_sum(seed, eps, threshold):
    g, _, _ = _fusion_safe_stack(seed, 2, 5, 3, lambda rng: (None, None))
    proj = _uniform(_rng(seed, 9), (2, 5))
    params = {"stack": g}

    def f(p):
        out, bwd = fu.fuse_sum(p["stack"])
        return _projected(out, proj), {"stack": bwd(proj)}

    return grad_check(f, params, eps, threshold)


def check_fuse_conv(seed, eps, threshold):
    def draw(rng):
        return _uniform(rng, (3,)), _uniform(rng, (1,))

    g, shared, bias = _fusion_safe_stack(seed, 2, 5, 3, draw)
    proj = _uniform(_rng(seed, 10), (2, 5))
    params = {"stack": g, "shared": shared, "bias": bias}

    def f(p):
        out, bwd = fu.fuse_conv(p["stack"], p["shared"], p["bias"])
        dg, dw, db = bwd(proj)
        return _projected(out, proj), {"stack": dg, "shared": dw, "bias": db}

    return grad_check(f, params, eps, threshold)


def check_fuse_lc(seed, eps, threshold):
    def draw(rng):
        return _uniform(rng, (5, 3)), _uniform(rng, (5,))

    g, weight, bias = _fusion_safe_stack(seed, 2, 5, 3, draw)
    proj = _uniform(_rng(seed, 11), (2, 5))
    params = {"stack": g, "weight": weight, "bias": bias}

    def f(p):
        out, bwd = fu.fuse_lc(p["stack"], fu.FusionParams("lc", p["weight"], p["bias"]))
        dg, dw, db = bwd(proj)
        return _projected(out, proj), {"stack": dg, "weight": dw, "bias": db}

    return grad_check(f, params, eps, threshold)


_CHECKS = {
    "fc": check_fc,
    "gap": check_gap,
    "relu": check_relu,
    "conv1x1": check_conv1x1,
    "conv3x3": check_conv3x3,
    "maxpool": check_maxpool,
    "softmax_ce": check_softmax_ce,
    "stack": check_stack,
    "fuse_sum": check_fuse_sum,
    "fuse_conv": check_fuse_conv,
    "fuse_lc": check_fuse_lc,
}


def check_op(name, seeds=range(20), eps=1e-5, threshold=1e-6):
    """Run one op's check over several seeds; returns the worst report."""
    worst = None
    for seed in seeds:
        report = _CHECKS[name](int(seed), eps, threshold)
        if worst is None or report.max_rel_error > worst.max_rel_error:
            worst = report
    return worst


def check_all_ops(seeds=range(20), eps=1e-5, threshold=1e-6):
    """Check every op; returns ``[(op name, worst report over seeds)]``."""
    return [(name, check_op(name, seeds, eps, threshold)) for name in OP_NAMES]


def _toy_cfn_graph(num_classes=3):
    # 8x8 inputs: two pools take the head's 1x1 conv down to 2x2
    return build_generic_cfn(widths=(4, 4, 6, 6), pools=(2, 4),
                             branch_points=("pool1", "pool2"), fusion="lc",
                             fuse_channels=6, num_classes=num_classes)


def _graph_kink_margin(graph, tape, params):
    """Smallest distance to a ReLU kink or pool tie anywhere in the net."""
    margin = np.inf
    for node in graph.nodes:
        if node.kind == "relu":
            margin = min(margin, float(np.abs(tape.values[node.inputs[0]]).min()))
        elif node.kind == "maxpool":
            x = tape.values[node.inputs[0]]
            n, c, h, w = x.shape
            win = x.reshape(n, c, h // 2, 2, w // 2, 2)
            win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
            top2 = np.sort(win, axis=4)[..., -2:]
            gap = top2[..., 1] - top2[..., 0]
            # windows clamped to all zeros by an upstream relu tie stably at 0;
            # their kink risk is the relu margin, counted above
            live = top2[..., 1] > 0
            if np.any(live):
                margin = min(margin, float(gap[live].min()))
        elif node.kind == "fuse":
            g = tape.values[node.inputs[0]]
            pre = (g * params["fuse.weight"][None]).sum(axis=2) + params["fuse.bias"]
            margin = min(margin, float(np.abs(pre).min()))
    return margin


def check_full_graph(seed=0, eps=1e-5, threshold=1e-5, batch=4, size=8):
    """Gradient-check every parameter of a small fusion network end to end.

    Scans derived seeds for a batch whose activations keep a safe distance
    from all ReLU/pool kinks, then runs central differences on all params.
    """
    graph = _toy_cfn_graph()
    for attempt in range(64):
        rng = _rng(seed, 3000 + attempt)
        images = rng.uniform(-1.0, 1.0, size=(batch, 3, size, size))
        labels = rng.integers(0, graph.num_classes, size=batch)
        params = init_params(graph, seed + attempt, dtype=np.float64)
        # nonzero biases keep pre-activations off the init-time kink at 0
        for name in params:
            if name.endswith(".bias"):
                params[name] = params[name] + 0.05
        _, tape = forward(graph, params, images, labels)
        if _graph_kink_margin(graph, tape, params) > FULL_GRAPH_MARGIN:
            break
    else:
        raise RuntimeError("could not find a kink-free full-graph configuration")

    def f(p):
        loss, tape = forward(graph, p, images, labels)
        grads, _ = backward(tape)
        return loss.value, grads

    return grad_check(f, params, eps, threshold)
