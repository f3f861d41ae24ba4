"""Deterministic shapes-vs-styles benchmark.

Class identity lives in a binary shape mask; style (colour, texture family,
texture frequency) only changes pixel statistics inside and outside it. Base
classes are rendered with the train style families, novel classes with the
held-out families, so base-to-novel evaluation is also a style shift.

Every sample draws from its own RNG keyed by (seed, purpose, class, index),
so generation order never affects content.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm

SIZE = 32
SUPERSAMPLE = 4
SHAPE_RADIUS = 9.0
CLASS_NAMES = ("circle", "square", "triangle", "cross", "ring", "bar", "ell", "diamond")
STYLE_FAMILIES = ("solid", "stripes", "checker", "noise")

_PURPOSE = {"bench": 0, "pretrain": 1}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    base: tuple[int, ...] = (0, 1, 2, 3)
    novel: tuple[int, ...] = (4, 5, 6, 7)
    train_styles: tuple[str, ...] = ("solid", "stripes")
    shifted_styles: tuple[str, ...] = ("checker", "noise")

    def validate(self) -> None:
        if set(self.base) & set(self.novel):
            raise ConfigError(f"base and novel classes overlap: {sorted(set(self.base) & set(self.novel))}")
        if set(self.train_styles) & set(self.shifted_styles):
            raise ConfigError("train and shifted style families overlap")
        for s in self.train_styles + self.shifted_styles:
            if s not in STYLE_FAMILIES:
                raise ConfigError(f"unknown style family {s!r}")
        for c in self.base + self.novel:
            if not 0 <= c < len(CLASS_NAMES):
                raise ConfigError(f"unknown class id {c}")

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.base + self.novel))


@dataclass
class Dataset:
    images: np.ndarray            # (N, 3, H, W) in [0, 1], 8-bit quantised
    labels: np.ndarray            # class ids
    styles: list[str]
    splits: list[str]             # pretrain | train | test
    poses: np.ndarray             # (N, 4): dx, dy, rotation deg, scale
    split_spec: SplitSpec = field(default_factory=SplitSpec)

    def __len__(self) -> int:
        return len(self.labels)

    def indices(self, split: str, classes=None) -> np.ndarray:
        tags = np.asarray(self.splits)
        mask = tags == split
        if classes is not None:
            mask &= np.isin(self.labels, list(classes))
        return np.flatnonzero(mask)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], [self.styles[i] for i in idx],
                       [self.splits[i] for i in idx], self.poses[idx], self.split_spec)


# ----------------------------------------------------------------- shapes ----

def _inside(name: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Membership in shape-local unit coordinates (y points down)."""
    ax, ay = np.abs(x), np.abs(y)
    r = np.hypot(x, y)
    if name == "circle":
        return r <= 1.0
    if name == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if name == "square":
        return np.maximum(ax, ay) <= 0.8
    if name == "diamond":
        return ax + ay <= 1.1
    if name == "triangle":
        # apex up at (0, -1), base at y = 0.75
        return (y <= 0.75) & (y >= -1.0 + 1.75 * ax / 0.95)
    if name == "cross":
        return ((ax <= 0.22) & (ay <= 1.0)) | ((ay <= 0.22) & (ax <= 1.0))
    if name == "bar":
        return (ax <= 1.0) & (ay <= 0.3)
    if name == "ell":
        return ((x >= -0.8) & (x <= -0.25) & (ay <= 1.0)) | ((x >= -0.8) & (x <= 0.8) & (y >= 0.45) & (y <= 1.0))
    raise KeyError(name)


def shape_mask(name: str, dx: float = 0.0, dy: float = 0.0, rot_deg: float = 0.0, scale: float = 1.0,
               size: int = SIZE) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] by SUPERSAMPLE^2 point sampling."""
    s = SUPERSAMPLE
    t = (np.arange(size * s) + 0.5) / s
    yy, xx = np.meshgrid(t, t, indexing="ij")
    cx, cy = size / 2 + dx, size / 2 + dy
    th = math.radians(rot_deg)
    px, py = (xx - cx), (yy - cy)
    # rotate sample points by -theta into the shape frame
    ux = (math.cos(th) * px + math.sin(th) * py) / (SHAPE_RADIUS * scale)
    uy = (-math.sin(th) * px + math.cos(th) * py) / (SHAPE_RADIUS * scale)
    hit = _inside(name, ux, uy).astype(np.float64)
    return hit.reshape(size, s, size, s).mean(axis=(1, 3))


# ----------------------------------------------------------------- styles ----

def _smooth_noise(rng: np.random.Generator, size: int, cell: int) -> np.ndarray:
    coarse = rng.random((size // cell + 2, size // cell + 2))
    t = np.arange(size) / cell
    i0 = np.floor(t).astype(int)
    f = t - i0
    f = f * f * (3 - 2 * f)
    a = coarse[np.ix_(i0, i0)]
    b = coarse[np.ix_(i0, i0 + 1)]
    c = coarse[np.ix_(i0 + 1, i0)]
    d = coarse[np.ix_(i0 + 1, i0 + 1)]
    fy, fx = f[:, None], f[None, :]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def texture(family: str, rng: np.random.Generator, size: int = SIZE) -> np.ndarray:
    """Pattern in [0, 1] for one style family."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if family == "solid":
        return np.full((size, size), 0.5)
    if family == "stripes":
        freq = rng.uniform(0.12, 0.25)
        ang = rng.uniform(0, math.pi)
        ph = rng.uniform(0, 2 * math.pi)
        return 0.5 + 0.5 * np.sin(2 * math.pi * freq * (xx * math.cos(ang) + yy * math.sin(ang)) + ph)
    if family == "checker":
        period = rng.uniform(4.0, 8.0)
        ox, oy = rng.uniform(0, period, 2)
        cx = np.floor((xx + ox) / (period / 2)).astype(int)
        cy = np.floor((yy + oy) / (period / 2)).astype(int)
        return ((cx + cy) % 2).astype(np.float64)
    if family == "noise":
        return _smooth_noise(rng, size, int(rng.integers(2, 5)))
    raise KeyError(family)


def _palette(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(foreground, background) RGB with at least 0.35 luminance contrast."""
    light_fg = rng.random() < 0.5
    lo, hi = rng.uniform(0.1, 0.35), rng.uniform(0.65, 0.9)
    fg_l, bg_l = (hi, lo) if light_fg else (lo, hi)
    fg = np.clip(fg_l + rng.uniform(-0.1, 0.1, 3), 0, 1)
    bg = np.clip(bg_l + rng.uniform(-0.1, 0.1, 3), 0, 1)
    return fg, bg


def render(class_id: int, family: str, rng: np.random.Generator, jitter: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Returns ((3, H, W) image in [0,1], pose [dx, dy, rot, scale])."""
    if jitter:
        pose = np.array([rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-15, 15), rng.uniform(0.9, 1.1)])
    else:
        pose = np.array([0.0, 0.0, 0.0, 1.0])
    mask = shape_mask(CLASS_NAMES[class_id], *pose)
    fg, bg = _palette(rng)
    amp = rng.uniform(0.12, 0.2)
    tex_fg = texture(family, rng)
    tex_bg = texture(family, rng)
    fg_img = fg[:, None, None] + amp * (tex_fg - 0.5)
    bg_img = bg[:, None, None] + amp * (tex_bg - 0.5)
    img = mask * fg_img + (1 - mask) * bg_img
    img = np.rint(np.clip(img, 0.0, 1.0) * 255) / 255
    return img, pose


# --------------------------------------------------------------- generate ----

def _sample_rng(seed: int, purpose: str, class_id: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _PURPOSE[purpose], class_id, index])


def generate(seed: int, n_per_class: int, split: SplitSpec | None = None, pretrain_per_class: int = 0) -> Dataset:
    """Benchmark images for every class in ``split`` (+ optional backbone corpus).

    Base classes: first half of each class tagged ``train`` (few-shot pool),
    second half ``test``; styles from the train families. Novel classes: all
    ``test``, styles from the shifted families. The ``pretrain`` corpus
    covers every class in every style family.
    """
    split = split or SplitSpec()
    split.validate()
    if n_per_class < 0 or pretrain_per_class < 0:
        raise ConfigError("sample counts must be non-negative")
    imgs, labels, styles, tags, poses = [], [], [], [], []

    def add(img, c, fam, tag, pose):
        imgs.append(img)
        labels.append(c)
        styles.append(fam)
        tags.append(tag)
        poses.append(pose)

    for c in split.classes:
        base = c in split.base
        fams = split.train_styles if base else split.shifted_styles
        for i in range(n_per_class):
            rng = _sample_rng(seed, "bench", c, i)
            fam = fams[int(rng.integers(len(fams)))]
            img, pose = render(c, fam, rng)
            tag = ("train" if i < n_per_class // 2 else "test") if base else "test"
            add(img, c, fam, tag, pose)
    all_fams = split.train_styles + split.shifted_styles
    for c in split.classes:
        for i in range(pretrain_per_class):
            rng = _sample_rng(seed, "pretrain", c, i)
            fam = all_fams[i % len(all_fams)]
            img, pose = render(c, fam, rng)
            add(img, c, fam, "pretrain", pose)
    if not imgs:
        return Dataset(np.zeros((0, 3, SIZE, SIZE)), np.zeros(0, dtype=np.int64), [], [], np.zeros((0, 4)), split)
    return Dataset(np.stack(imgs), np.array(labels, dtype=np.int64), styles, tags, np.stack(poses), split)


def sample_16shot(ds: Dataset, seed: int, shots: int = 16) -> np.ndarray:
    """Indices of exactly ``shots`` train-pool images per base class (seeded, no replacement)."""
    rng = np.random.default_rng([seed, 16])
    picked = []
    for c in ds.split_spec.base:
        pool = ds.indices("train", [c])
        if len(pool) < shots:
            raise DataError(f"class {c} has {len(pool)} train samples, need {shots}")
        picked.append(np.sort(rng.choice(pool, size=shots, replace=False)))
    return np.concatenate(picked)


# ------------------------------------------------------------ persistence ----

MANIFEST = "manifest.tsv"
MANIFEST_FIELDS = ("path", "class_id", "class_name", "style", "split", "dx", "dy", "rot", "scale")


def save(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for i in range(len(ds)):
            rel = f"images/{i:05d}.ppm"
            netpbm.write_ppm(root / rel, netpbm.to_hwc(ds.images[i]))
            c = int(ds.labels[i])
            w.writerow((rel, c, CLASS_NAMES[c], ds.styles[i], ds.splits[i], *(repr(float(v)) for v in ds.poses[i])))
    spec = ds.split_spec
    (root / "split.txt").write_text(
        f"base={','.join(map(str, spec.base))}\nnovel={','.join(map(str, spec.novel))}\n"
        f"train_styles={','.join(spec.train_styles)}\nshifted_styles={','.join(spec.shifted_styles)}\n")


def load(root) -> Dataset:
    root = Path(root)
    man = root / MANIFEST
    if not man.exists():
        raise FileNotFoundError(f"missing dataset manifest: {man}")
    spec = SplitSpec()
    split_file = root / "split.txt"
    if split_file.exists():
        kv = dict(line.split("=", 1) for line in split_file.read_text().splitlines() if "=" in line)
        spec = SplitSpec(tuple(int(v) for v in kv["base"].split(",") if v),
                         tuple(int(v) for v in kv["novel"].split(",") if v),
                         tuple(v for v in kv["train_styles"].split(",") if v),
                         tuple(v for v in kv["shifted_styles"].split(",") if v))
    imgs, labels, styles, tags, poses = [], [], [], [], []
    with open(man, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            imgs.append(netpbm.to_chw(netpbm.read_ppm(root / row["path"])))
            labels.append(int(row["class_id"]))
            styles.append(row["style"])
            tags.append(row["split"])
            poses.append([float(row.get(k) or "nan") for k in ("dx", "dy", "rot", "scale")])
    if not imgs:
        return Dataset(np.zeros((0, 3, SIZE, SIZE)), np.zeros(0, dtype=np.int64), [], [], np.zeros((0, 4)), spec)
    return Dataset(np.stack(imgs), np.array(labels, dtype=np.int64), styles, tags, np.array(poses), spec)
