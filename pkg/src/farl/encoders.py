"""Toy transformer image/text encoders with layer-wise representation-token injection.

Layers are numbered 1..L. With tokens present, every layer j >= J sees
``[CLS, REP*K, PATCH*N]`` (image) or ``[BOT, REP*K, WORD*M, EOT]`` (text),
where the REP slots are overwritten by a per-layer projection of the tokens
right before the layer runs. Layers below J never see REP slots, and with no
tokens at all the encoders are the plain zero-shot backbone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LayerNorm, Linear, Module, param

BOT, EOT = "<bot>", "<eot>"
TEMPLATE = "a photo of a {}"
BASE_WORDS = (BOT, EOT, "a", "photo", "of")
CLASS_NAMES = ("circle", "square", "triangle", "cross", "ring", "bar", "ell", "diamond")


class TokenizationError(KeyError):
    pass


@dataclass
class EncoderConfig:
    layers: int = 6
    inject_layer: int = 3
    d_model: int = 64
    heads: int = 4
    patch: int = 4
    image_size: int = 32
    channels: int = 3
    d_embed: int = 64
    mlp_ratio: int = 2
    k_tokens: int = 5
    d_rep: int = 64
    max_text_len: int = 16
    propagate_rep: bool = False
    vocab: tuple[str, ...] = field(default_factory=lambda: BASE_WORDS + CLASS_NAMES)

    def __post_init__(self):
        if not 1 <= self.inject_layer <= self.layers:
            raise ValueError(f"inject_layer must lie in [1, {self.layers}], got {self.inject_layer}")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.image_size % self.patch:
            raise ValueError("image_size must be a multiple of the patch size")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def inject_range(self) -> range:
        return range(self.inject_layer, self.layers + 1)


# ------------------------------------------------------------- tokenizer ----

class Tokenizer:
    def __init__(self, vocab):
        self.words = list(vocab)
        self.ids = {w: i for i, w in enumerate(self.words)}

    def encode(self, text: str) -> list[int]:
        out = [self.ids[BOT]]
        for w in text.split():
            if w not in self.ids:
                raise TokenizationError(f"word {w!r} is not in the vocabulary")
            out.append(self.ids[w])
        out.append(self.ids[EOT])
        return out

    def prompt(self, class_name: str) -> list[int]:
        return self.encode(TEMPLATE.format(class_name))


def load_vocab(path) -> tuple[str, ...]:
    """Class-name vocabulary file: one word per line; blank lines and '#' comments skipped."""
    words = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.append(line)
    return BASE_WORDS + tuple(w for w in words if w not in BASE_WORDS)


def write_vocab(path, class_names) -> None:
    Path(path).write_text("".join(f"{w}\n" for w in class_names))


# ------------------------------------------------------------ transformer ----

class TransformerLayer(Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.heads = heads
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, mlp_ratio * d, rng)
        self.fc2 = Linear(mlp_ratio * d, d, rng)

    def attention(self, x: Tensor) -> tuple[Tensor, Tensor]:
        *lead, t, d = x.shape
        h, dh = self.heads, d // self.heads
        qkv = ad.reshape(self.qkv(x), tuple(lead) + (t, 3, h, dh))
        nd = qkv.ndim
        # (..., T, 3, H, Dh) -> (..., 3, H, T, Dh)
        perm = tuple(range(nd - 4)) + (nd - 3, nd - 2, nd - 4, nd - 1)
        qkv = ad.transpose(qkv, perm)
        q, k, v = (qkv[(Ellipsis, i, slice(None), slice(None), slice(None))] for i in range(3))
        logits = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
        attn = ad.softmax_rows(logits)
        y = ad.matmul(attn, v)
        y = ad.swapaxes(y, y.ndim - 3, y.ndim - 2)
        y = ad.reshape(y, tuple(lead) + (t, d))
        return self.out(y), attn

    def __call__(self, x: Tensor) -> Tensor:
        a, _ = self.attention(self.ln1(x))
        x = x + a
        return x + self.fc2(ad.gelu(self.fc1(self.ln2(x))))


class ImageEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d, p = cfg.d_model, cfg.patch
        self.cfg = cfg
        self.patch_embed = Linear(p * p * cfg.channels, d, rng, bias=False)
        self.cls = param(rng.normal(0, 0.02, d))
        self.pos = param(rng.normal(0, 0.02, (1 + cfg.n_patches, d)))
        self.ln_pre = LayerNorm(d)
        self.layers = [TransformerLayer(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.layers)]
        self.ln_post = LayerNorm(d)
        self.proj = Linear(d, cfg.d_embed, rng, bias=False)


class TextEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.cfg = cfg
        self.tok = param(rng.normal(0, 0.02, (len(cfg.vocab), d)))
        self.pos = param(rng.normal(0, 0.01, (cfg.max_text_len, d)))
        self.layers = [TransformerLayer(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.layers)]
        self.ln_final = LayerNorm(d)
        self.proj = Linear(d, cfg.d_embed, rng, bias=False)


class ProjectionBank(Module):
    """Independent D_rep -> D_model maps per injected layer, one set per encoder side."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.inject_layer = cfg.inject_layer
        self.image = [Linear(cfg.d_rep, cfg.d_model, rng) for _ in cfg.inject_range]
        self.text = [Linear(cfg.d_rep, cfg.d_model, rng) for _ in cfg.inject_range]

    def image_at(self, layer: int) -> Linear:
        return self.image[layer - self.inject_layer]

    def text_at(self, layer: int) -> Linear:
        return self.text[layer - self.inject_layer]


# ------------------------------------------------------------ image path ----

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, p*p*C), patches in row-major grid order."""
    images = np.asarray(images, dtype=np.float64)
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(b, gh * gw, patch * patch * c)


def image_embed(enc: ImageEncoder, images) -> Tensor:
    """Layer-0 sequence [CLS, PATCH*N] with positional embeddings."""
    cfg = enc.cfg
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ad.ShapeError(f"image encoder expects (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), got {images.shape}")
    b = images.shape[0]
    x = ad.matmul(Tensor(patchify((images - 0.5) / 0.25, cfg.patch)), enc.patch_embed.weight)
    cls = ad.broadcast_to(ad.reshape(enc.cls, (1, 1, -1)), (b, 1, cfg.d_model))
    x = ad.concat([cls, x], axis=1) + enc.pos
    return enc.ln_pre(x)


def image_prefix(enc: ImageEncoder, images, upto: int | None = None) -> Tensor:
    """Hidden state after layers 1..upto (default J-1); no REP slots exist there."""
    upto = enc.cfg.inject_layer - 1 if upto is None else upto
    x = image_embed(enc, images)
    for layer in enc.layers[:upto]:
        x = layer(x)
    return x


def _rep_slots(bank_layer: Linear, tokens: Tensor, lead: tuple[int, ...]) -> Tensor:
    r = bank_layer(tokens)
    return ad.broadcast_to(r, lead + r.shape[-2:]) if r.shape[:-2] != lead else r


def image_suffix(enc: ImageEncoder, state: Tensor, R: Tensor | None, bank: ProjectionBank | None,
                 start: int | None = None, rep_override=None) -> tuple[Tensor, Tensor | None, list[Tensor]]:
    """Run layers start..L (default J..L) from ``state``; returns (CLS_L, REP_L or None, layer outputs).

    ``rep_override`` maps a layer number to a tensor that replaces the REP
    slots entering that layer (used to probe overwrite semantics).
    """
    cfg = enc.cfg
    start = cfg.inject_layer if start is None else start
    k = 0 if R is None else R.shape[-2]
    b = state.shape[0]
    x = state
    outputs = []
    for j in range(start, cfg.layers + 1):
        if R is not None and j >= cfg.inject_layer:
            has_rep = x.shape[1] == 1 + k + cfg.n_patches
            if rep_override is not None and j in rep_override:
                rep = ad.as_tensor(rep_override[j])
            elif has_rep and cfg.propagate_rep:
                rep = x[:, 1:1 + k]
            else:
                rep = _rep_slots(bank.image_at(j), R, (b,))
            rest = x[:, 1 + k:] if has_rep else x[:, 1:]
            x = ad.concat([x[:, :1], rep, rest], axis=1)
        x = enc.layers[j - 1](x)
        outputs.append(x)
    cls_out = x[:, 0]
    rep_out = x[:, 1:1 + k] if R is not None else None
    return cls_out, rep_out, outputs


def image_features(enc: ImageEncoder, cls_out: Tensor, rep_out: Tensor | None, rep_head: Linear | None):
    f_v = ad.l2_normalize(enc.proj(enc.ln_post(cls_out)))
    if rep_out is None:
        return f_v, None
    head = enc.proj if rep_head is None else rep_head
    f_r = ad.l2_normalize(head(enc.ln_post(ad.mean(rep_out, axis=-2))))
    return f_v, f_r


def encode_image(enc: ImageEncoder, images, R: Tensor | None = None, bank: ProjectionBank | None = None,
                 rep_head: Linear | None = None):
    """Returns (f_v, f_r or None, per-layer states)."""
    x = image_embed(enc, images)
    states = []
    for layer in enc.layers[:enc.cfg.inject_layer - 1]:
        x = layer(x)
        states.append(x)
    cls_out, rep_out, tail = image_suffix(enc, x, R, bank)
    f_v, f_r = image_features(enc, cls_out, rep_out, rep_head)
    return f_v, f_r, states + tail


# ------------------------------------------------------------- text path ----

def text_embed(enc: TextEncoder, prompts) -> Tensor:
    ids = np.asarray(prompts, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.shape[1] > enc.cfg.max_text_len:
        raise ad.ShapeError(f"prompt length {ids.shape[1]} exceeds max_text_len={enc.cfg.max_text_len}")
    x = enc.tok[ids]
    return x + enc.pos[:ids.shape[1]]


def text_prefix(enc: TextEncoder, prompts, upto: int | None = None) -> Tensor:
    upto = enc.cfg.inject_layer - 1 if upto is None else upto
    x = text_embed(enc, prompts)
    for layer in enc.layers[:upto]:
        x = layer(x)
    return x


def text_suffix(enc: TextEncoder, state: Tensor, R_fused: Tensor | None, bank: ProjectionBank | None,
                start: int | None = None) -> Tensor:
    """Layers start..L; returns the final EOT state.

    ``state`` is (C, T, D). ``R_fused`` is (K, D_rep) or (B, K, D_rep); with a
    batch axis the result is (B, C, D), one text set per image.
    """
    cfg = enc.cfg
    start = cfg.inject_layer if start is None else start
    x = state
    if R_fused is not None:
        k = R_fused.shape[-2]
        lead = (R_fused.shape[0], state.shape[0]) if R_fused.ndim == 3 else (state.shape[0],)
        if R_fused.ndim == 3:
            x = ad.broadcast_to(ad.reshape(x, (1,) + x.shape), lead + x.shape[1:])
    for j in range(start, cfg.layers + 1):
        if R_fused is not None and j >= cfg.inject_layer:
            has_rep = x.shape[-2] == state.shape[-2] + k
            if has_rep and cfg.propagate_rep:
                rep = x[..., 1:1 + k, :]
            else:
                r = bank.text_at(j)(R_fused)
                if R_fused.ndim == 3:
                    r = ad.reshape(r, (r.shape[0], 1) + r.shape[1:])
                rep = ad.broadcast_to(r, lead + r.shape[-2:])
            rest = x[..., 1 + k:, :] if has_rep else x[..., 1:, :]
            x = ad.concat([x[..., :1, :], rep, rest], axis=-2)
        x = enc.layers[j - 1](x)
    return x[..., -1, :]


def text_features(enc: TextEncoder, eot: Tensor) -> Tensor:
    return ad.l2_normalize(enc.proj(enc.ln_final(eot)))


def encode_text(enc: TextEncoder, prompts, R_fused: Tensor | None = None, bank: ProjectionBank | None = None) -> Tensor:
    """f_t for each prompt: (C, E), or (B, C, E) when ``R_fused`` carries a batch axis."""
    x = text_embed(enc, prompts)
    for layer in enc.layers[:enc.cfg.inject_layer - 1]:
        x = layer(x)
    return text_features(enc, text_suffix(enc, x, R_fused, bank))


def similarity_logits(f_img: Tensor, class_feats: Tensor, tau: float = 0.07) -> Tensor:
    """cos(f_img, f_t,c) / tau for unit vectors; class_feats (C, E) shared or (B, C, E) per image."""
    f_img, class_feats = ad.as_tensor(f_img), ad.as_tensor(class_feats)
    if class_feats.ndim == 2:
        return ad.scale(ad.matmul(f_img, ad.transpose(class_feats)), 1.0 / tau)
    prod = ad.mul(ad.reshape(f_img, (f_img.shape[0], 1, f_img.shape[-1])), class_feats)
    return ad.scale(ad.sum_(prod, axis=-1), 1.0 / tau)
