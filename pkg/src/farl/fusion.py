"""Fourier fusion attention: representation tokens query the phase and amplitude streams.

Per stream, CrossAttn(Q=R; K,V=F) = softmax(Q K^T / sqrt(d_head)) V W_O, with
no residual inside the block. The two stream outputs are concatenated, passed
through the fusion MLP and added back onto R with weight ``beta``.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module, param


class CrossAttnBlock(Module):
    def __init__(self, d_rep: int, rng: np.random.Generator, heads: int = 1, d_head: int | None = None):
        if heads > 1 and d_rep % heads:
            raise ValueError(f"d_rep={d_rep} not divisible by heads={heads}")
        self.heads = heads
        self.d_head = d_head if d_head is not None else d_rep // heads
        inner = self.heads * self.d_head
        self.w_q = Linear(d_rep, inner, rng, bias=False)
        self.w_k = Linear(d_rep, inner, rng, bias=False)
        self.w_v = Linear(d_rep, inner, rng, bias=False)
        self.w_o = Linear(inner, d_rep, rng, bias=False)

    @property
    def d_rep(self) -> int:
        return self.w_q.weight.shape[0]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., T, H*Dh) -> (..., H, T, Dh)
    *lead, t, d = x.shape
    x = ad.reshape(x, tuple(lead) + (t, heads, d // heads))
    nd = x.ndim
    return ad.swapaxes(x, nd - 3, nd - 2)


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    x = ad.swapaxes(x, nd - 3, nd - 2)
    *lead, t, h, dh = x.shape
    return ad.reshape(x, tuple(lead) + (t, h * dh))


def cross_attention(queries, kv, block: CrossAttnBlock) -> tuple[Tensor, Tensor]:
    """Returns (out: (..., K, D_rep), attn: (..., K, N)); attention averaged over heads."""
    queries, kv = ad.as_tensor(queries), ad.as_tensor(getattr(kv, "tokens", kv))
    d_rep = block.d_rep
    if queries.shape[-1] != d_rep or kv.shape[-1] != d_rep:
        raise ad.ShapeError(f"cross_attention expects width {d_rep}, got queries {queries.shape} and kv {kv.shape}")
    h = block.heads
    q = _split_heads(block.w_q(queries), h)
    k = _split_heads(block.w_k(kv), h)
    v = _split_heads(block.w_v(kv), h)
    logits = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(block.d_head))
    attn = ad.softmax_rows(logits)
    out = block.w_o(_merge_heads(ad.matmul(attn, v)))
    if h == 1:
        attn_map = ad.reshape(attn, attn.shape[:-3] + attn.shape[-2:])
    else:
        attn_map = ad.mean(attn, axis=attn.ndim - 3)
    return out, attn_map


class FusionMLP(Module):
    """2*D_rep -> 2*D_rep -> D_rep with GELU between."""

    def __init__(self, d_rep: int, rng: np.random.Generator, beta: float = 1.0, hidden: int | None = None):
        hidden = hidden or 2 * d_rep
        self.fc1 = Linear(2 * d_rep, hidden, rng)
        self.fc2 = Linear(hidden, d_rep, rng)
        self.beta = beta

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class FourierFusion(Module):
    """Learnable tokens R plus the two attention blocks and the fusion MLP."""

    def __init__(self, k_tokens: int, d_rep: int, rng: np.random.Generator, heads: int = 1, beta: float = 1.0,
                 rep_init_std: float = 0.02):
        if k_tokens < 1:
            raise ValueError("k_tokens must be >= 1")
        self.R = param(rng.normal(0.0, rep_init_std, size=(k_tokens, d_rep)))
        self.attn_phase = CrossAttnBlock(d_rep, rng, heads)
        self.attn_amp = CrossAttnBlock(d_rep, rng, heads)
        self.mlp = FusionMLP(d_rep, rng, beta)

    def enrich(self, f_phase, f_amp, *, use_phase: bool = True, use_amp: bool = True):
        return enrich(self.R, f_phase, f_amp, self.attn_phase, self.attn_amp, self.mlp,
                      use_phase=use_phase, use_amp=use_amp)


def enrich(R: Tensor, f_phase, f_amp, attn_phase: CrossAttnBlock, attn_amp: CrossAttnBlock, mlp: FusionMLP,
           *, use_phase: bool = True, use_amp: bool = True):
    """R_fused = R + beta * MLP(concat(R'_phase, R'_amp)).

    With one stream disabled the surviving branch output is duplicated into
    both halves of the MLP input; the disabled stream's attention map is None.
    """
    if not (use_phase or use_amp):
        raise ValueError("at least one stream must be active")
    out_p = attn_p = out_a = attn_a = None
    if use_phase:
        out_p, attn_p = cross_attention(R, f_phase, attn_phase)
    if use_amp:
        out_a, attn_a = cross_attention(R, f_amp, attn_amp)
    if out_p is None:
        out_p = out_a
    if out_a is None:
        out_a = out_p
    fusion = mlp(ad.concat([out_p, out_a], axis=-1))
    fused = ad.add(R, fusion) if mlp.beta == 1.0 else ad.add(R, ad.scale(fusion, mlp.beta))
    return fused, attn_p, attn_a
