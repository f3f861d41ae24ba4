"""Independent reference computations used as test oracles.

Everything here is written with plain Python loops or straight-line numpy and
shares no code with the package under test.
"""
from __future__ import annotations

import cmath
import math

import numpy as np


def matmul_loops(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for q in range(k):
                acc = acc + a[i][q] * b[q][j]
            out[i][j] = acc
    return np.array(out)


def dft2_naive(x: np.ndarray) -> np.ndarray:
    """O(N^4) double sum, X[k,l] = sum x[m,n] exp(-2 pi i (km/H + ln/W))."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for k in range(h):
        for l in range(w):
            acc = 0j
            for m in range(h):
                for n in range(w):
                    acc += x[m, n] * cmath.exp(-2j * math.pi * (k * m / h + l * n / w))
            out[k, l] = acc
    return out


def idft2_naive(X: np.ndarray) -> np.ndarray:
    h, w = X.shape
    out = np.zeros((h, w), dtype=complex)
    for m in range(h):
        for n in range(w):
            acc = 0j
            for k in range(h):
                for l in range(w):
                    acc += X[k, l] * cmath.exp(2j * math.pi * (k * m / h + l * n / w))
            out[m, n] = acc / (h * w)
    return out


def phase_only_two_step(ch: np.ndarray) -> np.ndarray:
    """Compute P from the naive DFT, then inverse-transform unit amplitude."""
    X = dft2_naive(ch)
    P = np.angle(X)
    P[np.abs(X) <= 1e-10 * np.abs(X).max()] = 0.0
    return idft2_naive(np.exp(1j * P)).real


def amp_only_two_step(ch: np.ndarray) -> np.ndarray:
    return idft2_naive(np.abs(dft2_naive(ch)).astype(complex)).real


def gelu_tanh(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 2, pad: int = 1) -> np.ndarray:
    """x: (C, H, W); w: (Cout, C, 3, 3); nested-loop zero-padded convolution -> (Cout, Ho, Wo)."""
    c, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for ci in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            y = i * stride - pad + di
                            xx = j * stride - pad + dj
                            if 0 <= y < h and 0 <= xx < wd:
                                acc += w[o, ci, di, dj] * x[ci, y, xx]
                out[o, i, j] = acc
    return out


def softmax_vec(v):
    m = max(v)
    e = [math.exp(t - m) for t in v]
    s = sum(e)
    return [t / s for t in e]


def layer_norm_rows(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def mha_rows(x, wqkv, bqkv, wo, bo, heads):
    """Straight-line multi-head self-attention over one (T, D) sequence."""
    t, d = x.shape
    dh = d // heads
    qkv = x @ wqkv + bqkv
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    out = np.zeros((t, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(t):
            scores = [float(q[i, sl] @ k[j, sl]) / math.sqrt(dh) for j in range(t)]
            p = softmax_vec(scores)
            out[i, sl] = sum(p[j] * v[j, sl] for j in range(t))
    return out @ wo + bo


def block(x, P, prefix, heads, eps):
    """Pre-LN transformer layer from a flat parameter dict."""
    g = lambda n: P[f"{prefix}.{n}"]  # noqa: E731
    h = layer_norm_rows(x, g("ln1.gamma"), g("ln1.beta"), eps)
    x = x + mha_rows(h, g("qkv.weight"), g("qkv.bias"), g("out.weight"), g("out.bias"), heads)
    h = layer_norm_rows(x, g("ln2.gamma"), g("ln2.beta"), eps)
    return x + gelu_tanh(h @ g("fc1.weight") + g("fc1.bias")) @ g("fc2.weight") + g("fc2.bias")


def image_encoder_oracle(P: dict, img: np.ndarray, cfg, R=None, bank=None) -> np.ndarray:
    """f_v for one (3, H, W) image from a flat state dict (keys as in ImageEncoder.state())."""
    p = cfg.patch
    gh = img.shape[1] // p
    z = (img - 0.5) / 0.25
    rows = []
    for i in range(gh):
        for j in range(gh):
            patch = z[:, i * p:(i + 1) * p, j * p:(j + 1) * p]   # (C, p, p)
            rows.append(patch.transpose(1, 2, 0).reshape(-1))     # (py, px, c) order
    x = np.vstack([P["cls"][None], np.array(rows) @ P["patch_embed.weight"]]) + P["pos"]
    x = layer_norm_rows(x, P["ln_pre.gamma"], P["ln_pre.beta"], 1e-6)
    k = 0
    for layer in range(1, cfg.layers + 1):
        if R is not None and layer >= cfg.inject_layer:
            rep = R @ bank[f"image.{layer - cfg.inject_layer}.weight"] + bank[f"image.{layer - cfg.inject_layer}.bias"]
            x = np.vstack([x[:1], rep, x[1 + k:]])
            k = R.shape[0]
        x = block(x, P, f"layers.{layer - 1}", cfg.heads, 1e-6)
    f = layer_norm_rows(x[0], P["ln_post.gamma"], P["ln_post.beta"], 1e-6) @ P["proj.weight"]
    return f / np.linalg.norm(f)


def text_encoder_oracle(P: dict, ids, cfg, R_fused=None, bank=None) -> np.ndarray:
    x = P["tok"][np.asarray(ids)] + P["pos"][:len(ids)]
    k = 0
    for layer in range(1, cfg.layers + 1):
        if R_fused is not None and layer >= cfg.inject_layer:
            idx = layer - cfg.inject_layer
            rep = R_fused @ bank[f"text.{idx}.weight"] + bank[f"text.{idx}.bias"]
            x = np.vstack([x[:1], rep, x[1 + k:]])
            k = R_fused.shape[0]
        x = block(x, P, f"layers.{layer - 1}", cfg.heads, 1e-6)
    f = layer_norm_rows(x[-1], P["ln_final.gamma"], P["ln_final.beta"], 1e-6) @ P["proj.weight"]
    return f / np.linalg.norm(f)


def cross_attention_oracle(R, F, wq, wk, wv, wo):
    """Single-head CrossAttn with explicit per-row softmax loops."""
    q, k, v = R @ wq, F @ wk, F @ wv
    dh = wq.shape[1]
    attn = np.array([softmax_vec([float(q[i] @ k[j]) / math.sqrt(dh) for j in range(len(F))]) for i in range(len(R))])
    return (attn @ v) @ wo, attn


def enrich_oracle(R, Fp, Fa, pp, pa, mlp, beta=1.0):
    """R'_phase, R'_amp via two blocks; R_fusion = MLP(concat); R_fused = R + beta * R_fusion."""
    rp, _ = cross_attention_oracle(R, Fp, *pp)
    ra, _ = cross_attention_oracle(R, Fa, *pa)
    h = gelu_tanh(np.concatenate([rp, ra], axis=1) @ mlp[0] + mlp[1])
    return R + beta * (h @ mlp[2] + mlp[3])


def cross_entropy_scalar(logits_row, label):
    m = max(logits_row)
    lse = m + math.log(sum(math.exp(v - m) for v in logits_row))
    return lse - logits_row[label]


def cosine_scalar(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    return dot / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(b * b for b in v)))


def pearson(a, b):
    a, b = np.ravel(a), np.ravel(b)
    a, b = a - a.mean(), b - b.mean()
    return float((a @ b) / math.sqrt((a @ a) * (b @ b)))
