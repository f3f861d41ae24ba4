"""Objective, AdamW with cosine decay, backbone pre-training and adapter training."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import CLASS_NAMES, Dataset, sample_16shot
from .encoders import encode_image, encode_text
from .model import (FarlModel, ImageCache, Outputs, build_image_cache, build_text_cache, forward, get_variant)
from .nn import is_decayed

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    alpha: float = 0.5
    lam: float = 1.0
    tau: float = 0.07

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")


def cosine_reg(f: Tensor, f_frozen) -> Tensor:
    """mean(1 - cos(f, f_frozen)) over every leading index."""
    cos = ad.cosine_similarity(f, ad.as_tensor(f_frozen))
    return ad.scale(ad.sum_(ad.scale(cos, -1.0) + 1.0), 1.0 / cos.data.size)


def farl_loss(out: Outputs, labels, f_v_frozen, f_t_frozen, cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """alpha*CE(f_v) + (1-alpha)*CE(f_r) + lam*(Lcos_v + Lcos_t); terms with zero weight are skipped."""
    if out.logits_r is None:
        raise ValueError("farl_loss needs logits from both the class and representation heads")
    terms: dict[str, Tensor] = {}
    terms["ce_v"] = ad.cross_entropy(out.logits_v, labels)
    terms["ce_r"] = ad.cross_entropy(out.logits_r, labels)
    f_t_ref = np.broadcast_to(np.asarray(f_t_frozen), out.f_t.shape)
    terms["cos_v"] = cosine_reg(out.f_v, f_v_frozen)
    terms["cos_t"] = cosine_reg(out.f_t, f_t_ref)
    parts = []
    if cfg.alpha > 0:
        parts.append(ad.scale(terms["ce_v"], cfg.alpha))
    if cfg.alpha < 1:
        parts.append(ad.scale(terms["ce_r"], 1.0 - cfg.alpha))
    if cfg.lam > 0:
        parts.append(ad.scale(terms["cos_v"] + terms["cos_t"], cfg.lam))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total, {k: v.item() for k, v in terms.items()}


# ------------------------------------------------------------- optimiser ----

def cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total)) if total > 0 else base


class AdamW:
    """Decoupled weight decay Adam; decay applies to parameters flagged in ``decay``."""

    def __init__(self, params: dict[str, Tensor], lr: float = 5e-5, total_steps: int = 1, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01, decay: dict[str, bool] | None = None):
        self.params = params
        self.base_lr = lr
        self.total_steps = total_steps
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = decay if decay is not None else {k: is_decayed(k) for k in params}
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    @property
    def lr(self) -> float:
        return cosine_lr(self.base_lr, self.t, self.total_steps)

    def step(self) -> None:
        lr = self.lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and self.decay.get(k, False):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -------------------------------------------------------------- pretrain ----

@dataclass
class PretrainConfig:
    epochs: int = 12
    lr: float = 3e-4
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = 0.01


def contrastive_loss(f_img: Tensor, f_txt: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over matched rows."""
    logits = ad.scale(ad.matmul(f_img, ad.transpose(f_txt)), 1.0 / tau)
    target = np.arange(f_img.shape[0])
    return ad.scale(ad.cross_entropy(logits, target) + ad.cross_entropy(ad.transpose(logits), target), 0.5)


def pretrain_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Batches with pairwise-distinct classes so every in-batch negative is a true negative."""
    classes = np.unique(labels)
    if batch_size < 2:
        raise ConfigError(f"contrastive pre-training needs batch_size >= 2, got {batch_size}")
    per_batch = min(batch_size, len(classes))
    queues = {c: list(rng.permutation(np.flatnonzero(labels == c))) for c in classes}
    batches = []
    while True:
        live = [c for c in classes if queues[c]]
        if len(live) < 2:
            break
        chosen = rng.permutation(live)[:per_batch]
        batches.append(np.array([queues[c].pop() for c in chosen]))
    return batches


def pretrain_contrastive(model: FarlModel, ds: Dataset, cfg: PretrainConfig,
                         on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    """Trains the backbone on the ``pretrain`` images; returns mean loss per epoch."""
    idx = ds.indices("pretrain")
    if len(idx) == 0:
        raise ConfigError("dataset has no pretrain samples")
    bb = model.backbone
    bb.requires_grad_(True)
    params = bb.named_parameters()
    rng = np.random.default_rng([cfg.seed, 2])
    steps_per_epoch = len(pretrain_batches(ds.labels[idx], cfg.batch_size, np.random.default_rng(0)))
    opt = AdamW(params, lr=cfg.lr, total_steps=cfg.epochs * steps_per_epoch, weight_decay=cfg.weight_decay)
    prompts = model.prompts(CLASS_NAMES)
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for b in pretrain_batches(ds.labels[idx], cfg.batch_size, rng):
            sel = idx[b]
            f_img, _, _ = encode_image(bb.image, ds.images[sel])
            f_txt = encode_text(bb.text, prompts[ds.labels[sel]])
            loss = contrastive_loss(f_img, f_txt, model.tau)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.4f", epoch + 1, history[-1])
        if on_epoch:
            on_epoch(epoch + 1, history[-1])
    bb.requires_grad_(False)
    return history


# ----------------------------------------------------------------- adapt ----

@dataclass
class AdaptConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 5e-5
    weight_decay: float = 0.01
    seed: int = 0
    variant: str = "FULL"
    shots: int = 16
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 0       # 0: evaluate after the final epoch only


@dataclass
class AdaptResult:
    losses: list[float]
    step_losses: list[float]
    train_idx: np.ndarray
    log_rows: list[dict]


def adapter_params(model: FarlModel, variant) -> dict[str, Tensor]:
    """Trainable adapter parameters; a removed stream's extractor and attention block stay inactive."""
    v = get_variant(variant)
    params = model.adapter.named_parameters()
    drop = []
    if not v.use_phase:
        drop += ["stream_phase.", "fusion.attn_phase."]
    if not v.use_amp:
        drop += ["stream_amp.", "fusion.attn_amp."]
    return {k: p for k, p in params.items() if not any(k.startswith(d) for d in drop)}


def train_adapt(model: FarlModel, ds: Dataset, cfg: AdaptConfig,
                evaluate_fn: Callable[[FarlModel], tuple[float, float, float]] | None = None,
                cache: ImageCache | None = None) -> AdaptResult:
    """Optimises the adapter on a 16-shot base split; the backbone stays frozen."""
    if model.adapter is None:
        raise ConfigError("model has no adapter; call init_adapter first")
    variant = get_variant(cfg.variant)
    model.backbone.requires_grad_(False)
    params = adapter_params(model, variant)
    for p in model.adapter.parameters():
        p.requires_grad = False
    for p in params.values():
        p.requires_grad = True

    base = tuple(ds.split_spec.base)
    train_idx = sample_16shot(ds, cfg.seed, cfg.shots)
    label_map = {c: i for i, c in enumerate(base)}
    labels = np.array([label_map[c] for c in ds.labels[train_idx]])
    cache = cache if cache is not None else build_image_cache(model, ds.images[train_idx])
    text = build_text_cache(model, base, CLASS_NAMES)

    order_rng = np.random.default_rng([cfg.seed, 3])
    n = len(train_idx)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    opt = AdamW(params, lr=cfg.lr, total_steps=cfg.epochs * steps_per_epoch, weight_decay=cfg.weight_decay)
    losses, step_losses, rows = [], [], []
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(n)
        ep = []
        for s in range(0, n, cfg.batch_size):
            b = perm[s:s + cfg.batch_size]
            sub = cache.take(b)
            out = forward(model, sub, text, variant)
            loss, _ = farl_loss(out, labels[b], sub.f_v_frozen, text.f_t_frozen, cfg.loss)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            ep.append(loss.item())
            step_losses.append(ep[-1])
        losses.append(float(np.mean(ep)))
        row = {"epoch": epoch, "loss": losses[-1], "base_acc": None, "novel_acc": None, "hm": None}
        due = (cfg.eval_every and epoch % cfg.eval_every == 0) or epoch == cfg.epochs
        if evaluate_fn is not None and due:
            row["base_acc"], row["novel_acc"], row["hm"] = evaluate_fn(model)
        rows.append(row)
        log.info("adapt[%s] epoch %d loss %.4f", variant.name, epoch, losses[-1])
    for p in model.adapter.parameters():
        p.requires_grad = False
    return AdaptResult(losses, step_losses, train_idx, rows)
