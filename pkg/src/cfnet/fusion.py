"""Branch stacking and the three fusion modules.

Branch features [N,K] are stacked into G[N,K,S] with the main branch in the
last slot.  Three fusions reduce the stack back to an [N,K] fused feature:

* ``sum``  — unweighted sum across branches, no parameters;
* ``conv`` — one shared S-weight filter plus a scalar bias (S+1 parameters);
* ``lc``   — locally connected: an untied weight row per feature position,
  weights [K,S] plus bias [K], so K*(S+1) parameters.

All three apply ReLU after the weighted sum and share one inner kernel, so
the degenerate equalities (conv with all-ones weights == sum; lc with tied
rows == conv) hold bitwise, not just within tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FUSION_KINDS = ("sum", "conv", "lc")


@dataclass
class FusionParams:
    """Weights of one fusion module.

    kind "lc": weight [K,S], bias [K].  kind "conv": weight [S], bias [1].
    kind "sum": both None.
    """

    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def param_count(self):
        count = 0
        if self.weight is not None:
            count += self.weight.size
        if self.bias is not None:
            count += self.bias.size
        return count


def init_lc(k, s, dtype=np.float32):
    """Locally-connected fusion at its starting point: every weight 1/S, bias 0."""
    if k < 1 or s < 1:
        raise ValueError("K and S must be >= 1")
    dtype = np.dtype(dtype)
    weight = np.full((k, s), 1.0 / s, dtype=dtype)
    bias = np.zeros(k, dtype=dtype)
    return FusionParams("lc", weight, bias)


def init_conv(s, dtype=np.float32):
    """Shared-filter fusion initialized like the LC module: weights 1/S, bias 0."""
    if s < 1:
        raise ValueError("S must be >= 1")
    dtype = np.dtype(dtype)
    return FusionParams("conv", np.full(s, 1.0 / s, dtype=dtype),
                        np.zeros(1, dtype=dtype))


def init_sum():
    return FusionParams("sum")


def fusion_param_count(kind, k, s):
    """Parameter count of a fusion module: sum -> 0, conv -> S+1, lc -> K*(S+1)."""
    if k < 1 or s < 1:
        raise ValueError("K and S must be >= 1")
    if kind == "sum":
        return 0
    if kind == "conv":
        return s + 1
    if kind == "lc":
        return k * (s + 1)
    raise ValueError(f"unknown fusion kind {kind!r}")


def stack_branches(gaps):
    """Stack S branch features [N,K] into G[N,K,S]; backward splits per branch.

    The caller supplies branches in order; the last one is the main branch.
    """
    if len(gaps) < 1:
        raise ValueError("need at least one branch to stack")
    shape = gaps[0].shape
    for i, g in enumerate(gaps):
        if g.shape != shape:
            raise ValueError(
                f"ragged branch shapes: branch 0 is {shape}, branch {i} is {g.shape}")
    stacked = np.stack(gaps, axis=2)

    def backward(dout):
        return [np.ascontiguousarray(dout[:, :, s]) for s in range(len(gaps))]

    return stacked, backward


def _check_stack(g_stack):
    if g_stack.ndim != 3:
        raise ValueError(f"branch stack must be [N,K,S], got {g_stack.shape}")
    return g_stack.shape


def _preactivation(g_stack, weight_rows, bias_vec):
    # One shared arithmetic path for all three fusion kinds: per-position
    # weighted sum over branches, then bias.  Identical inputs give
    # identical bits regardless of which fusion wrapper produced them.
    return (g_stack * weight_rows[None, :, :]).sum(axis=2) + bias_vec[None, :]


def fuse_lc(g_stack, params):
    """Locally-connected fusion: out[n,i] = relu(sum_j W[i,j] G[n,i,j] + b[i])."""
    n, k, s = _check_stack(g_stack)
    if params.kind != "lc":
        raise ValueError(f"fuse_lc needs lc params, got kind {params.kind!r}")
    weight, bias = params.weight, params.bias
    if weight.shape != (k, s):
        raise ValueError(f"lc weight shape {weight.shape}, expected {(k, s)}")
    if bias.shape != (k,):
        raise ValueError(f"lc bias shape {bias.shape}, expected {(k,)}")
    pre = _preactivation(g_stack, weight, bias)
    out = np.maximum(pre, 0)

    def backward(dout):
        dpre = dout * (pre > 0)
        dg = dpre[:, :, None] * weight[None, :, :]
        dw = np.einsum("ni,nis->is", dpre, g_stack)
        db = dpre.sum(axis=0)
        return dg, dw, db

    return out, backward


def fuse_conv(g_stack, shared, bias):
    """Shared-filter fusion: one S-vector of weights and a scalar bias for all K."""
    n, k, s = _check_stack(g_stack)
    shared = np.asarray(shared)
    if shared.shape != (s,):
        raise ValueError(f"shared filter shape {shared.shape}, expected {(s,)}")
    bias_arr = np.asarray(bias, dtype=g_stack.dtype).reshape(-1)
    if bias_arr.size != 1:
        raise ValueError("conv fusion bias must be a single scalar")
    weight_rows = np.broadcast_to(shared, (k, s))
    bias_vec = np.broadcast_to(bias_arr, (k,))
    pre = _preactivation(g_stack, weight_rows, bias_vec)
    out = np.maximum(pre, 0)

    def backward(dout):
        dpre = dout * (pre > 0)
        dg = dpre[:, :, None] * shared[None, None, :]
        dshared = np.einsum("ni,nis->s", dpre, g_stack)
        dbias = np.asarray(dpre.sum(), dtype=g_stack.dtype).reshape(1)
        return dg, dshared, dbias

    return out, backward


def fuse_sum(g_stack):
    """Unweighted fusion: relu of the plain branch sum, no parameters."""
    n, k, s = _check_stack(g_stack)
    ones = np.ones((k, s), dtype=g_stack.dtype)
    zeros = np.zeros(k, dtype=g_stack.dtype)
    pre = _preactivation(g_stack, ones, zeros)
    out = np.maximum(pre, 0)

    def backward(dout):
        dpre = dout * (pre > 0)
        return np.ascontiguousarray(
            np.broadcast_to(dpre[:, :, None], g_stack.shape))

    return out, backward


def apply_fusion(g_stack, params):
    """Dispatch on ``params.kind``; returns (fused feature, backward).

    The backward closure returns ``(dG, dW, db)`` with the weight entries
    None for the sum fusion, keeping one calling convention for the graph
    executor.
    """
    if params.kind == "lc":
        return fuse_lc(g_stack, params)
    if params.kind == "conv":
        out, bwd = fuse_conv(g_stack, params.weight, params.bias)
        return out, bwd
    if params.kind == "sum":
        out, bwd = fuse_sum(g_stack)

        def backward(dout):
            return bwd(dout), None, None

        return out, backward
    raise ValueError(f"unknown fusion kind {params.kind!r}")


@dataclass(frozen=True)
class PredictionStrategyAudit:
    """Parameter comparison between fuse-then-classify and classify-then-fuse.

    ``*_direct`` counts the fully-connected layers as built: one C x (K+1)
    layer after the fused feature versus one per branch.  ``*_formula``
    evaluates the closed forms S*(C+1) + W_fuse and S*K*(C+1) + W_fuse for
    side-by-side reporting; the audit never silently replaces one with the
    other.
    """

    eflp_direct: int
    eplf_direct: int
    eflp_formula: int
    eplf_formula: int
    fusion_params: int


def prediction_strategy_audit(k, c, s, kind):
    """Count classifier parameters for both prediction strategies."""
    if min(k, c, s) < 1:
        raise ValueError("K, C and S must be >= 1")
    w_fuse = fusion_param_count(kind, k, s)
    eflp_direct = c * (k + 1) + w_fuse
    eplf_direct = s * c * (k + 1) + w_fuse
    eflp_formula = s * (c + 1) + w_fuse
    eplf_formula = s * k * (c + 1) + w_fuse
    return PredictionStrategyAudit(eflp_direct, eplf_direct,
                                   eflp_formula, eplf_formula, w_fuse)
