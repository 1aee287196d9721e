"""Multi-head attention, the position-wise feed-forward block, and the
two-directional cross-modal promotion unit they compose into.

A promotion unit takes two sequences and lets each refine the other: every
direction runs pre-norm cross-attention against the other sequence, then
pre-norm self-attention, then a pre-norm feed-forward block, each with a
residual connection.  The unit also reports an exact closed-form count of the
multiply-accumulates its matmuls perform, which the tensor engine's tally can
confirm at runtime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import RngState, Tensor


@dataclass
class AttentionParams:
    """Projection matrices for multi-head attention (no biases).

    ``wq``/``wk`` map the model width d to d_k, ``wv`` to d_v, and ``wo``
    (optional) maps the concatenated head outputs back to d.  Both d_k and
    d_v must be divisible by the head count.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor | None
    heads: int

    def __post_init__(self):
        dk = self.wq.shape[1]
        dv = self.wv.shape[1]
        if dk % self.heads or dv % self.heads:
            raise ValueError("head count must divide the projection widths")

    def tensors(self):
        base = (self.wq, self.wk, self.wv)
        return base if self.wo is None else base + (self.wo,)


def init_attention(rng: RngState, d: int, heads: int, dk: int | None = None,
                   dv: int | None = None, out_proj: bool = True) -> AttentionParams:
    dk = d if dk is None else dk
    dv = d if dv is None else dv
    wo = Tensor(nn.glorot(rng, dv, d), requires_grad=True) if out_proj else None
    return AttentionParams(
        Tensor(nn.glorot(rng, d, dk), requires_grad=True),
        Tensor(nn.glorot(rng, d, dk), requires_grad=True),
        Tensor(nn.glorot(rng, d, dv), requires_grad=True),
        wo,
        heads,
    )


def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int,
                   rng: RngState | None = None, attn_dropout: float = 0.0,
                   training: bool = False) -> tuple[Tensor, np.ndarray]:
    """Fused scaled dot-product attention over all heads.

    Takes projected (T_t, d_k), (T_s, d_k), (T_s, d_v) inputs, splits them
    into heads, and returns the concatenated (T_t, d_v) output plus the
    pre-dropout softmax weights as a (heads, T_t, T_s) array.  The whole
    computation is one graph node with a hand-derived backward pass.
    """
    q = T.as_tensor(q)
    k = T.as_tensor(k)
    v = T.as_tensor(v)
    t_t, dk = q.shape
    t_s, dv = k.shape[0], v.shape[1]
    hd_k = dk // heads
    hd_v = dv // heads
    inv_scale = 1.0 / math.sqrt(hd_k)

    qh = q.data.reshape(t_t, heads, hd_k).transpose(1, 0, 2)
    kh = k.data.reshape(t_s, heads, hd_k).transpose(1, 0, 2)
    vh = v.data.reshape(t_s, heads, hd_v).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) * inv_scale
    if not np.isfinite(scores).all():
        raise ValueError("non-finite input")
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    weights = e / e.sum(axis=-1, keepdims=True)       # (heads, T_t, T_s)
    if attn_dropout > 0.0 and training:
        if rng is None:
            raise ValueError("attention dropout needs an RngState")
        keep = ((rng.uniform(weights.shape) >= attn_dropout)
                / (1.0 - attn_dropout))
        used = weights * keep
    else:
        keep = None
        used = weights
    out_h = used @ vh                                  # (heads, T_t, hd_v)
    out = out_h.transpose(1, 0, 2).reshape(t_t, dv)

    T._MAC_COUNT += t_t * t_s * dk + t_t * t_s * dv

    needs = T.grad_enabled() and (q.requires_grad or k.requires_grad
                                  or v.requires_grad)
    if not needs:
        return T.constant(out), weights

    def bw(grad_out):
        gh = grad_out.reshape(t_t, heads, hd_v).transpose(1, 0, 2)
        d_used = gh @ vh.transpose(0, 2, 1)
        d_v = used.transpose(0, 2, 1) @ gh if v.requires_grad else None
        d_weights = d_used * keep if keep is not None else d_used
        d_scores = weights * (d_weights
                              - (d_weights * weights).sum(axis=-1, keepdims=True))
        d_scores *= inv_scale
        d_q = None
        d_k = None
        if q.requires_grad:
            d_q = (d_scores @ kh).transpose(1, 0, 2).reshape(t_t, dk)
        if k.requires_grad:
            d_k = (d_scores.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(t_s, dk)
        if d_v is not None:
            d_v = d_v.transpose(1, 0, 2).reshape(t_s, dv)
        return (d_q, d_k, d_v)

    return T.node(out, (q, k, v), bw), weights


def multi_head_attention(target: Tensor, source: Tensor, params: AttentionParams,
                         rng: RngState | None = None, attn_dropout: float = 0.0,
                         training: bool = False) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention of ``target`` over ``source``.

    Returns the attended output (same shape as ``target``) and the softmaxed
    weights as a (heads, T_target, T_source) tensor; each weight row is a
    probability distribution.  Self-attention is the ``source is target``
    case.  Weight dropout, when active, is applied after the weights are
    recorded so the returned matrix stays row-stochastic.
    """
    if source.shape[0] == 0:
        raise ValueError("empty source")
    q = T.matmul(target, params.wq)
    k = T.matmul(source, params.wk)
    v = T.matmul(source, params.wv)
    out, weights = attention_core(q, k, v, params.heads, rng, attn_dropout, training)
    if params.wo is not None:
        out = T.matmul(out, params.wo)
    return out, T.constant(weights)


def ffn(x: Tensor, params: nn.MlpParams) -> Tensor:
    """Position-wise feed-forward block: rows are transformed independently."""
    return nn.mlp(x, params)


@dataclass
class MpuDirectionParams:
    """One direction of a promotion unit: cross-attention into the target,
    self-attention, and a feed-forward block, each behind its own pre-norm."""

    ln_cross: nn.LayerNormParams
    cross: AttentionParams
    ln_self: nn.LayerNormParams
    self_attn: AttentionParams
    ln_ffn: nn.LayerNormParams
    ffn: nn.MlpParams

    def tensors(self):
        return (self.ln_cross.tensors() + self.cross.tensors()
                + self.ln_self.tensors() + self.self_attn.tensors()
                + self.ln_ffn.tensors() + self.ffn.tensors())


@dataclass
class MpuParams:
    """Both directions of a promotion unit.

    ``fwd`` promotes the first input sequence, ``rev`` the second.  With
    direction-level sharing the two fields reference the same storage.
    """

    fwd: MpuDirectionParams
    rev: MpuDirectionParams

    def tensors(self):
        seen = []
        for direction in (self.fwd, self.rev):
            for t in direction.tensors():
                if not any(t is s for s in seen):
                    seen.append(t)
        return tuple(seen)


def init_mpu_direction(rng: RngState, d: int, heads: int, expansion: int,
                       activation: str = "gelu", out_proj: bool = True) -> MpuDirectionParams:
    return MpuDirectionParams(
        nn.init_layer_norm(d),
        init_attention(rng, d, heads, out_proj=out_proj),
        nn.init_layer_norm(d),
        init_attention(rng, d, heads, out_proj=out_proj),
        nn.init_layer_norm(d),
        nn.init_mlp(rng, d, expansion * d, d, activation),
    )


def init_mpu(rng: RngState, d: int, heads: int, expansion: int, activation: str = "gelu",
             share_directions: bool = False, out_proj: bool = True) -> MpuParams:
    fwd = init_mpu_direction(rng, d, heads, expansion, activation, out_proj)
    rev = fwd if share_directions else init_mpu_direction(
        rng, d, heads, expansion, activation, out_proj)
    return MpuParams(fwd, rev)


def mpu_direction(target: Tensor, source: Tensor, p: MpuDirectionParams,
                  rng: RngState | None = None, attn_dropout: float = 0.0,
                  ffn_dropout: float = 0.0, training: bool = False):
    """Promote ``target`` using ``source``; returns (output, attention dump)."""
    attended, cross_w = multi_head_attention(
        nn.layer_norm(target, p.ln_cross), nn.layer_norm(source, p.ln_cross),
        p.cross, rng, attn_dropout, training)
    h1 = attended + target
    normed = nn.layer_norm(h1, p.ln_self)
    refined, self_w = multi_head_attention(normed, normed, p.self_attn,
                                           rng, attn_dropout, training)
    h2 = refined + h1
    out = T.dropout(ffn(nn.layer_norm(h2, p.ln_ffn), p.ffn), ffn_dropout, rng, training) + h2
    dump = {"cross": cross_w.data.copy(), "self": self_w.data.copy()}
    return out, dump


def mpu_forward(h_a: Tensor, h_b: Tensor, params: MpuParams,
                rng: RngState | None = None, attn_dropout: float = 0.0,
                ffn_dropout: float = 0.0, training: bool = False,
                serial: bool = False):
    """Mutually promote two sequences.

    Returns ``(out_a, out_b, dumps)`` where ``out_a`` has the shape of
    ``h_a`` and ``out_b`` that of ``h_b``.  In the parallel form both
    directions read the original inputs; in the serial form the second
    direction reads the already-promoted first output as its source.
    """
    out_a, dump_a = mpu_direction(h_a, h_b, params.fwd, rng, attn_dropout,
                                  ffn_dropout, training)
    src = out_a if serial else h_a
    out_b, dump_b = mpu_direction(h_b, src, params.rev, rng, attn_dropout,
                                  ffn_dropout, training)
    return out_a, out_b, {"first": dump_a, "second": dump_b}


# ---------------------------------------------------------------------------
# closed-form complexity accounting (matmul multiply-accumulates only)


def attention_mac_count(t_target: int, t_source: int, d: int, dk: int, dv: int,
                        out_proj: bool = True) -> int:
    """MACs of one multi-head attention call (head count cancels out)."""
    macs = t_target * d * dk + t_source * d * dk + t_source * d * dv
    macs += t_target * t_source * dk + t_target * t_source * dv
    if out_proj:
        macs += t_target * dv * d
    return macs


def mpu_direction_macs(t_target: int, t_source: int, d: int, dk: int, dv: int,
                       expansion: int, out_proj: bool = True) -> int:
    cross = attention_mac_count(t_target, t_source, d, dk, dv, out_proj)
    self_attn = attention_mac_count(t_target, t_target, d, dk, dv, out_proj)
    ffn_macs = 2 * t_target * d * (expansion * d)
    return cross + self_attn + ffn_macs


def mpu_mac_count(t_a: int, t_b: int, d: int, dk: int | None = None,
                  dv: int | None = None, heads: int = 1, expansion: int = 4,
                  out_proj: bool = True) -> int:
    """Exact MAC count of one ``mpu_forward``; symmetric in the two lengths.

    The attention-score portion alone is (dk+dv)*(t_a+t_b)^2, which is the
    quadratic-in-total-length term that dominates for long sequences.
    """
    if min(t_a, t_b, d) < 1:
        raise ValueError("lengths and width must be positive")
    dk = d if dk is None else dk
    dv = d if dv is None else dv
    return (mpu_direction_macs(t_a, t_b, d, dk, dv, expansion, out_proj)
            + mpu_direction_macs(t_b, t_a, d, dk, dv, expansion, out_proj))


def mpu_score_macs(t_a: int, t_b: int, dk: int, dv: int) -> int:
    """The score/weighting portion of ``mpu_mac_count``: (dk+dv)*(t_a+t_b)^2."""
    return (dk + dv) * (t_a * t_b * 2 + t_a * t_a + t_b * t_b)
