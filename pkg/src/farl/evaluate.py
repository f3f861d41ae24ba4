"""Base-to-novel evaluation, ablation harness and attention-map export."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import fourier
from .data import CLASS_NAMES, Dataset
from .model import (FarlModel, ImageCache, VariantSpec, build_image_cache, build_text_cache, forward,
                    fused_tokens, get_variant, stream_images, zero_shot_logits)
from .streams import token_grid

log = logging.getLogger(__name__)


def harmonic_mean(base: float, novel: float) -> float:
    return 0.0 if base + novel == 0 else 2.0 * base * novel / (base + novel)


@dataclass
class Metrics:
    base_acc: float
    novel_acc: float
    hm: float
    seed: int = 0
    variant: str = "FULL"

    @classmethod
    def of(cls, base_acc: float, novel_acc: float, seed: int = 0, variant: str = "FULL") -> "Metrics":
        return cls(base_acc, novel_acc, harmonic_mean(base_acc, novel_acc), seed, variant)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def split_classes(ds: Dataset, split: str) -> tuple[int, ...]:
    if split == "base":
        return tuple(ds.split_spec.base)
    if split == "novel":
        return tuple(ds.split_spec.novel)
    raise ValueError(f"split must be 'base' or 'novel', got {split!r}")


def predict(model: FarlModel, cache: ImageCache, class_ids, split: str, variant="FULL", *,
            base_weight: float = 0.5, conditioned: bool = True, zero_shot: bool = False,
            batch: int = 64) -> np.ndarray:
    """Index into ``class_ids`` of the predicted class for every cached image.

    Base split: argmax of base_weight*softmax(logits_v) + (1-base_weight)*softmax(logits_r).
    Novel split: argmax of logits_v; the representation head is never evaluated.
    """
    text = build_text_cache(model, class_ids, CLASS_NAMES)
    if zero_shot or model.adapter is None:
        return zero_shot_logits(model, cache, text).argmax(axis=1)
    v = get_variant(variant)
    preds = []
    with ad.no_grad():
        for s in range(0, len(cache.prefix), batch):
            sub = cache.take(slice(s, s + batch))
            out = forward(model, sub, text, v, with_rep_head=(split == "base"), conditioned=conditioned)
            if split == "base":
                p = base_weight * _softmax(out.logits_v.data) + (1 - base_weight) * _softmax(out.logits_r.data)
            else:
                p = out.logits_v.data
            preds.append(p.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model: FarlModel, ds: Dataset, split: str, variant="FULL", cache: ImageCache | None = None,
             **kw) -> float:
    classes = split_classes(ds, split)
    idx = ds.indices("test", classes)
    cache = cache if cache is not None else build_image_cache(model, ds.images[idx])
    preds = predict(model, cache, classes, split, variant, **kw)
    truth = np.searchsorted(np.array(classes), ds.labels[idx])
    return float(100.0 * np.mean(preds == truth)) if len(idx) else 0.0


class EvalBench:
    """Holds frozen-backbone caches of the test images so repeated evaluation is cheap."""

    def __init__(self, model: FarlModel, ds: Dataset):
        self.ds = ds
        self.caches = {}
        for split in ("base", "novel"):
            idx = ds.indices("test", split_classes(ds, split))
            self.caches[split] = (idx, build_image_cache(model, ds.images[idx]))

    def accuracy(self, model: FarlModel, split: str, variant="FULL", **kw) -> float:
        idx, cache = self.caches[split]
        return accuracy(model, self.ds, split, variant, cache=cache, **kw)

    def predictions(self, model: FarlModel, split: str, variant="FULL", **kw) -> np.ndarray:
        _, cache = self.caches[split]
        return predict(model, cache, split_classes(self.ds, split), split, variant, **kw)

    def metrics(self, model: FarlModel, variant="FULL", seed: int = 0, **kw) -> Metrics:
        b = self.accuracy(model, "base", variant, **kw)
        n = self.accuracy(model, "novel", variant, **kw)
        return Metrics.of(b, n, seed, get_variant(variant).name)


def evaluate(model: FarlModel, ds: Dataset, split: str, variant="FULL", seed: int = 0, **kw) -> Metrics:
    """Metrics for one split; the other split's accuracy is reported as 0."""
    acc = accuracy(model, ds, split, variant, **kw)
    b, n = (acc, 0.0) if split == "base" else (0.0, acc)
    return Metrics.of(b, n, seed, get_variant(variant).name)


# ----------------------------------------------------------------- CSVs ----

METRIC_FIELDS = ("variant", "seed", "base_acc", "novel_acc", "hm")
EPOCH_FIELDS = ("epoch", "loss", "base_acc", "novel_acc", "hm")


def _fmt(x) -> str:
    return "" if x is None else (f"{x:.6f}" if isinstance(x, float) else str(x))


def metrics_csv(rows: list[Metrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for m in rows:
        d = asdict(m)
        w.writerow([_fmt(d[k]) for k in METRIC_FIELDS])
    return buf.getvalue()


def epoch_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPOCH_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in EPOCH_FIELDS])
    return buf.getvalue()


def median_table(rows: list[Metrics]) -> dict[str, Metrics]:
    out = {}
    for name in dict.fromkeys(r.variant for r in rows):
        sel = [r for r in rows if r.variant == name]
        out[name] = Metrics(float(np.median([r.base_acc for r in sel])), float(np.median([r.novel_acc for r in sel])),
                            float(np.median([r.hm for r in sel])), -1, name)
    return out


# ------------------------------------------------------------- attention ----

def bilinear_resize(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Half-pixel-centre bilinear upsampling with edge clamping."""
    gh, gw = grid.shape
    ys = np.clip((np.arange(h) + 0.5) * gh / h - 0.5, 0, gh - 1)
    xs = np.clip((np.arange(w) + 0.5) * gw / w - 0.5, 0, gw - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bot = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def heatmap(attn: np.ndarray, grid: tuple[int, int], size: tuple[int, int], min_range: float = 1e-6) -> np.ndarray:
    """(K, N) attention -> (H, W) map in [0, 1]; flat maps are left unscaled."""
    g = np.asarray(attn).mean(axis=0).reshape(grid)
    up = bilinear_resize(g, *size)
    lo, hi = up.min(), up.max()
    if hi - lo < min_range:
        return np.clip(up, 0.0, 1.0)
    return (up - lo) / (hi - lo)


@dataclass
class AttentionExport:
    phase_map: np.ndarray | None
    amp_map: np.ndarray | None
    phase_image: np.ndarray
    amp_image: np.ndarray
    attn_phase: np.ndarray | None
    attn_amp: np.ndarray | None


def export_attention(model: FarlModel, image: np.ndarray, variant="FULL") -> AttentionExport:
    """Stream attention heatmaps plus the raw phase-only and amplitude-only reconstructions."""
    v: VariantSpec = get_variant(variant)
    img = np.asarray(image, dtype=np.float64)
    streams = stream_images(img[None])
    with ad.no_grad():
        _, attn_p, attn_a = fused_tokens(model, streams, v)
    h, w = img.shape[-2:]
    grid = token_grid(h, w)
    ap = attn_p.data[0] if attn_p is not None else None
    aa = attn_a.data[0] if attn_a is not None else None
    return AttentionExport(
        heatmap(ap, grid, (h, w)) if ap is not None else None,
        heatmap(aa, grid, (h, w)) if aa is not None else None,
        fourier.phase_only(img), fourier.amp_only(img), ap, aa)
