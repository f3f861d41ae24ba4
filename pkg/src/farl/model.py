"""Backbone + adapter assembly, ablation variants, and the batched forward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import fourier
from .autodiff import Tensor
from .encoders import (EncoderConfig, ImageEncoder, ProjectionBank, TextEncoder, Tokenizer, image_features,
                       image_prefix, image_suffix, similarity_logits, text_features, text_prefix, text_suffix)
from .fusion import FourierFusion, enrich
from .nn import Linear, Module
from .streams import StreamCNN


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VariantSpec:
    name: str
    phase_input: str | None   # "phase" | "rgb" | None (stream removed)
    amp_input: str | None     # "amp" | "rgb" | None

    @property
    def use_phase(self) -> bool:
        return self.phase_input is not None

    @property
    def use_amp(self) -> bool:
        return self.amp_input is not None


VARIANTS = {
    "FULL": VariantSpec("FULL", "phase", "amp"),
    "PHASE_ONLY": VariantSpec("PHASE_ONLY", "phase", None),
    "AMP_ONLY": VariantSpec("AMP_ONLY", None, "amp"),
    "SPATIAL": VariantSpec("SPATIAL", "rgb", "rgb"),
    "PHASE_AND_SPATIAL": VariantSpec("PHASE_AND_SPATIAL", "phase", "rgb"),
}


def get_variant(name) -> VariantSpec:
    if isinstance(name, VariantSpec):
        return name
    try:
        return VARIANTS[str(name).upper()]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}") from None


class Backbone(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.image = ImageEncoder(cfg, rng)
        self.text = TextEncoder(cfg, rng)


class Adapter(Module):
    """Everything the adaptation stage trains."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, heads: int = 1, beta: float = 1.0):
        self.fusion = FourierFusion(cfg.k_tokens, cfg.d_rep, rng, heads=heads, beta=beta)
        self.stream_phase = StreamCNN(cfg.channels, cfg.d_rep, rng)
        self.stream_amp = StreamCNN(cfg.channels, cfg.d_rep, rng)
        self.bank = ProjectionBank(cfg, rng)
        self.rep_head = Linear(cfg.d_model, cfg.d_embed, rng, bias=False)


class FarlModel:
    def __init__(self, cfg: EncoderConfig, backbone: Backbone, adapter: Adapter | None = None, tau: float = 0.07):
        self.cfg = cfg
        self.backbone = backbone
        self.adapter = adapter
        self.tau = tau
        self.tokenizer = Tokenizer(cfg.vocab)

    @classmethod
    def create(cls, cfg: EncoderConfig, seed: int, with_adapter: bool = True, **kw) -> "FarlModel":
        backbone = Backbone(cfg, np.random.default_rng([seed, 0]))
        model = cls(cfg, backbone, **kw)
        if with_adapter:
            model.init_adapter(seed)
        return model

    def init_adapter(self, seed: int, heads: int = 1, beta: float = 1.0) -> Adapter:
        self.adapter = Adapter(self.cfg, np.random.default_rng([seed, 1]), heads=heads, beta=beta)
        # f_r head starts as a copy of the frozen class-feature projection
        self.adapter.rep_head.weight.data = self.backbone.image.proj.weight.data.copy()
        return self.adapter

    def state(self) -> dict[str, np.ndarray]:
        out = {f"backbone.{k}": v for k, v in self.backbone.state().items()}
        if self.adapter is not None:
            out.update({f"adapter.{k}": v for k, v in self.adapter.state().items()})
        return out

    def backbone_state(self) -> dict[str, np.ndarray]:
        return {f"backbone.{k}": v for k, v in self.backbone.state().items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        bb = {k[len("backbone."):]: v for k, v in state.items() if k.startswith("backbone.")}
        self.backbone.load_state(bb, strict=strict)
        ad_state = {k[len("adapter."):]: v for k, v in state.items() if k.startswith("adapter.")}
        if ad_state:
            if self.adapter is None:
                self.init_adapter(0)
            self.adapter.load_state(ad_state, strict=strict)

    def prompts(self, class_names) -> np.ndarray:
        return np.array([self.tokenizer.prompt(n) for n in class_names], dtype=np.int64)


# ---------------------------------------------------------------- caches ----

def stream_images(images: np.ndarray, decompose_normalized: bool = True) -> dict[str, np.ndarray]:
    """Normalised stream inputs for every image: phase, amp and rgb, each (B, C, H, W)."""
    phase = np.empty_like(images)
    amp = np.empty_like(images)
    rgb = np.empty_like(images)
    for i, img in enumerate(images):
        p, a = fourier.phase_only(img), fourier.amp_only(img)
        if decompose_normalized:
            p, a = fourier.normalize_component(p), fourier.normalize_component(a)
        phase[i], amp[i] = p, a
        rgb[i] = fourier.normalize_component(img)
    return {"phase": phase, "amp": amp, "rgb": rgb}


@dataclass
class ImageCache:
    """Per-image quantities that depend only on the frozen backbone."""

    streams: dict[str, np.ndarray]
    prefix: np.ndarray        # hidden state entering layer J
    f_v_frozen: np.ndarray    # injection-free class feature

    def take(self, idx) -> "ImageCache":
        return ImageCache({k: v[idx] for k, v in self.streams.items()}, self.prefix[idx], self.f_v_frozen[idx])


def build_image_cache(model: FarlModel, images: np.ndarray, batch: int = 64) -> ImageCache:
    enc = model.backbone.image
    prefixes, frozen = [], []
    with ad.no_grad():
        for s in range(0, len(images), batch):
            x = image_prefix(enc, images[s:s + batch])
            cls_out, _, _ = image_suffix(enc, x, None, None)
            f_v, _ = image_features(enc, cls_out, None, None)
            prefixes.append(x.data)
            frozen.append(f_v.data)
    d = model.cfg.d_model
    return ImageCache(stream_images(images),
                      np.concatenate(prefixes) if prefixes else np.zeros((0, 1 + model.cfg.n_patches, d)),
                      np.concatenate(frozen) if frozen else np.zeros((0, model.cfg.d_embed)))


@dataclass
class TextCache:
    class_ids: tuple[int, ...]
    prefix: np.ndarray        # (C, T, D) entering layer J
    f_t_frozen: np.ndarray    # (C, E)


def build_text_cache(model: FarlModel, class_ids, class_names) -> TextCache:
    enc = model.backbone.text
    with ad.no_grad():
        x = text_prefix(enc, model.prompts([class_names[c] for c in class_ids]))
        f_t = text_features(enc, text_suffix(enc, x, None, None))
    return TextCache(tuple(class_ids), x.data, f_t.data)


# --------------------------------------------------------------- forward ----

@dataclass
class Outputs:
    logits_v: Tensor
    logits_r: Tensor | None
    f_v: Tensor
    f_r: Tensor | None
    f_t: Tensor
    r_fused: Tensor
    attn_phase: Tensor | None
    attn_amp: Tensor | None


def fused_tokens(model: FarlModel, streams: dict[str, np.ndarray], variant: VariantSpec):
    a = model.adapter
    f_p = a.stream_phase(streams[variant.phase_input]) if variant.use_phase else None
    f_a = a.stream_amp(streams[variant.amp_input]) if variant.use_amp else None
    fz = a.fusion
    return enrich(fz.R, f_p, f_a, fz.attn_phase, fz.attn_amp, fz.mlp,
                  use_phase=variant.use_phase, use_amp=variant.use_amp)


def forward(model: FarlModel, imgs: ImageCache, text: TextCache, variant: VariantSpec,
            with_rep_head: bool = True, conditioned: bool = True) -> Outputs:
    """Adapted forward for a batch of cached images against the classes in ``text``."""
    a = model.adapter
    bb = model.backbone
    r_fused, attn_p, attn_a = fused_tokens(model, imgs.streams, variant)
    cls_out, rep_out, _ = image_suffix(bb.image, Tensor(imgs.prefix), a.fusion.R, a.bank)
    f_v, f_r = image_features(bb.image, cls_out, rep_out if with_rep_head else None, a.rep_head)
    if conditioned:
        eot = text_suffix(bb.text, Tensor(text.prefix), r_fused, a.bank)
        f_t = text_features(bb.text, eot)
    else:
        f_t = text_features(bb.text, text_suffix(bb.text, Tensor(text.prefix), a.fusion.R, a.bank))
    logits_v = similarity_logits(f_v, f_t, model.tau)
    logits_r = similarity_logits(f_r, f_t, model.tau) if f_r is not None else None
    return Outputs(logits_v, logits_r, f_v, f_r, f_t, r_fused, attn_p, attn_a)


def zero_shot_logits(model: FarlModel, imgs: ImageCache, text: TextCache) -> np.ndarray:
    return imgs.f_v_frozen @ text.f_t_frozen.T / model.tau
