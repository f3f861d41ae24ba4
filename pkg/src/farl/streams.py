"""Lightweight convolutional token extractors for the phase and amplitude images."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, param, uniform_fan_in

KERNEL, STRIDE, PAD = 3, 2, 1
MIN_SIDE = 4


@dataclass
class PatchTokens:
    tokens: Tensor  # (B, N, D_rep)
    stream_tag: str
    grid: tuple[int, int]


def token_grid(h: int, w: int) -> tuple[int, int]:
    return math.ceil(h / 4), math.ceil(w / 4)


class StreamCNN(Module):
    """Two 3x3 stride-2 convolutions, C -> hidden -> D_rep, GELU after each."""

    def __init__(self, in_ch: int, d_rep: int, rng: np.random.Generator, hidden: int = 16):
        fan1, fan2 = KERNEL * KERNEL * in_ch, KERNEL * KERNEL * hidden
        self.w1 = uniform_fan_in(rng, fan1, (fan1, hidden))
        self.b1 = param(np.zeros(hidden))
        self.w2 = uniform_fan_in(rng, fan2, (fan2, d_rep))
        self.b2 = param(np.zeros(d_rep))
        self.in_ch, self.d_rep = in_ch, d_rep

    def __call__(self, images) -> Tensor:
        """(B, C, H, W) array or tensor -> (B, N, D_rep) tokens."""
        x = ad.as_tensor(images)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        b, c, h, w = x.shape
        if c != self.in_ch:
            raise ad.ShapeError(f"stream expects {self.in_ch} channels, got image {x.shape}")
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ad.ShapeError(f"image {h}x{w} is smaller than the {MIN_SIDE}x{MIN_SIDE} minimum")
        x = ad.transpose(x, (0, 2, 3, 1))
        y = ad.gelu(ad.matmul(ad.im2col(x, KERNEL, STRIDE, PAD), self.w1) + self.b1)
        y = ad.gelu(ad.matmul(ad.im2col(y, KERNEL, STRIDE, PAD), self.w2) + self.b2)
        _, ho, wo, d = y.shape
        return ad.reshape(y, (b, ho * wo, d))


def extract_tokens(img, cnn: StreamCNN, stream_tag: str = "phase") -> PatchTokens:
    x = np.asarray(img.data if isinstance(img, Tensor) else img)
    h, w = x.shape[-2:]
    return PatchTokens(cnn(img), stream_tag, token_grid(h, w))
