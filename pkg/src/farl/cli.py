"""Command-line entry point: ``farl <command> [flags]``.

Artifacts land in ``output_dir``::

    backbone.ckpt                       contrastively pre-trained backbone
    pretrain.csv                        epoch,loss
    adapted-<VARIANT>-s<seed>.ckpt      backbone + adapter
    adapt-<VARIANT>-s<seed>.csv         epoch,loss,base_acc,novel_acc,hm
    eval-<VARIANT>-s<seed>.csv          variant,seed,base_acc,novel_acc,hm
    ablation.csv                        one row per (variant, seed)
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, data, fourier, netpbm
from . import config as cfgmod
from .config import RunConfig
from .encoders import EncoderConfig, write_vocab
from .evaluate import EvalBench, Metrics, epoch_csv, export_attention, median_table, metrics_csv
from .model import ConfigError as ModelConfigError
from .model import FarlModel, get_variant

log = logging.getLogger("farl")

LUMA = np.array([0.299, 0.587, 0.114])


class DependencyError(FileNotFoundError):
    """An upstream artifact needed by this command does not exist."""


def require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing upstream artifact {path} (produce it with `farl {produced_by}`)")
    return path


# ------------------------------------------------------------ artifacts ----

def out_dir(cfg: RunConfig) -> Path:
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def backbone_path(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "backbone.ckpt"


def adapted_path(cfg: RunConfig, variant: str, seed: int) -> Path:
    return Path(cfg.output_dir) / f"adapted-{get_variant(variant).name}-s{seed}.ckpt"


def encoder_config(cfg: RunConfig) -> EncoderConfig:
    try:
        return EncoderConfig(k_tokens=cfg.k_tokens, inject_layer=cfg.inject_layer, propagate_rep=cfg.propagate_rep)
    except ValueError as exc:
        raise cfgmod.ConfigError(str(exc)) from None


def load_dataset(cfg: RunConfig) -> data.Dataset:
    root = Path(cfg.data_dir)
    require(root / data.MANIFEST, "gen-data")
    return data.load(root)


def load_model(cfg: RunConfig, path: Path, produced_by: str, with_adapter: bool) -> FarlModel:
    require(path, produced_by)
    state = checkpoint.load(path)
    model = FarlModel.create(encoder_config(cfg), cfg.seed, with_adapter=False)
    if with_adapter:
        model.init_adapter(cfg.seed, heads=cfg.heads, beta=cfg.beta)
    try:
        model.load_state(state, strict=True)
    except (KeyError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"{path} does not match the configured model: {exc}") from None
    return model


def to_gray(img: np.ndarray) -> np.ndarray:
    """(3, H, W) -> per-channel min-max to [0, 255], then luma; flat channels map to 0."""
    chans = []
    for ch in img:
        lo, hi = ch.min(), ch.max()
        chans.append((ch - lo) / (hi - lo) * 255.0 if hi - lo > 1e-12 else np.zeros_like(ch))
    return np.tensordot(LUMA, np.stack(chans), axes=1)


def read_image(path) -> np.ndarray:
    return netpbm.to_chw(netpbm.read_ppm(path))


# ------------------------------------------------------------- commands ----

def cmd_decompose(cfg: RunConfig, args) -> int:
    img = read_image(args.input)
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    netpbm.write_pgm(d / "phase.pgm", to_gray(fourier.phase_only(img)))
    netpbm.write_pgm(d / "amp.pgm", to_gray(fourier.amp_only(img)))
    netpbm.write_pgm(d / "spectrum-log-amp.pgm", to_gray(np.stack([fourier.log_amplitude(c) for c in img])))
    print(f"wrote {d / 'phase.pgm'}, {d / 'amp.pgm'}, {d / 'spectrum-log-amp.pgm'}")
    return 0


def cmd_gen_data(cfg: RunConfig, args) -> int:
    ds = data.generate(cfg.seed, cfg.n_per_class, pretrain_per_class=cfg.pretrain_per_class)
    root = Path(cfg.data_dir)
    data.save(ds, root)
    write_vocab(root / "vocab.txt", data.CLASS_NAMES)
    print(f"wrote {len(ds)} images to {root}")
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    from .train import PretrainConfig, pretrain_contrastive

    ds = load_dataset(cfg)
    model = FarlModel.create(encoder_config(cfg), cfg.seed, with_adapter=False)
    pcfg = PretrainConfig(epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, batch_size=cfg.pretrain_batch, seed=cfg.seed)
    losses = pretrain_contrastive(model, ds, pcfg)
    od = out_dir(cfg)
    checkpoint.save(backbone_path(cfg), model.backbone_state())
    (od / "pretrain.csv").write_text("epoch,loss\n" + "".join(f"{i + 1},{v:.6f}\n" for i, v in enumerate(losses)))
    bench = EvalBench(model, ds)
    base, novel = bench.accuracy(model, "base", zero_shot=True), bench.accuracy(model, "novel", zero_shot=True)
    print(f"pretrained backbone -> {backbone_path(cfg)}; zero-shot base {base:.2f} novel {novel:.2f}")
    return 0


def adapt_one(cfg: RunConfig, ds: data.Dataset, backbone: dict, bench: EvalBench | None, variant: str,
              seed: int) -> tuple[FarlModel, list[dict], Metrics | None]:
    from .train import AdaptConfig, LossConfig, train_adapt

    model = FarlModel.create(encoder_config(cfg), seed, with_adapter=False)
    model.load_state(backbone)
    model.init_adapter(seed, heads=cfg.heads, beta=cfg.beta)
    bench = bench or EvalBench(model, ds)
    kw = dict(base_weight=cfg.base_weight, conditioned=cfg.conditioned)

    def evaluate_fn(m):
        mt = bench.metrics(m, variant, seed, **kw)
        return mt.base_acc, mt.novel_acc, mt.hm
    acfg = AdaptConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=seed, variant=variant,
                       shots=cfg.shots, loss=LossConfig(alpha=cfg.alpha, lam=cfg.lam), eval_every=cfg.eval_every)
    res = train_adapt(model, ds, acfg, evaluate_fn=evaluate_fn)
    last = res.log_rows[-1]
    metrics = Metrics(last["base_acc"], last["novel_acc"], last["hm"], seed, get_variant(variant).name)
    return model, res.log_rows, metrics


def _backbone_state(cfg: RunConfig) -> dict:
    return checkpoint.load(require(backbone_path(cfg), "pretrain"))


def cmd_adapt(cfg: RunConfig, args) -> int:
    ds = load_dataset(cfg)
    backbone = _backbone_state(cfg)
    model, rows, mt = adapt_one(cfg, ds, backbone, None, cfg.variant, cfg.seed)
    od = out_dir(cfg)
    name = get_variant(cfg.variant).name
    checkpoint.save(adapted_path(cfg, name, cfg.seed), model.state())
    (od / f"adapt-{name}-s{cfg.seed}.csv").write_text(epoch_csv(rows))
    print(f"{name} seed {cfg.seed}: base {mt.base_acc:.2f} novel {mt.novel_acc:.2f} hm {mt.hm:.2f}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    ds = load_dataset(cfg)
    name = get_variant(cfg.variant).name
    if args.zero_shot:
        model = load_model(cfg, Path(args.checkpoint) if args.checkpoint else backbone_path(cfg), "pretrain", False)
    else:
        path = Path(args.checkpoint) if args.checkpoint else adapted_path(cfg, name, cfg.seed)
        model = load_model(cfg, path, "adapt", True)
    bench = EvalBench(model, ds)
    kw = dict(base_weight=cfg.base_weight, conditioned=cfg.conditioned, zero_shot=args.zero_shot)
    accs = {s: bench.accuracy(model, s, name, **kw) if args.split in (s, "both") else 0.0 for s in ("base", "novel")}
    mt = Metrics.of(accs["base"], accs["novel"], cfg.seed, "ZERO_SHOT" if args.zero_shot else name)
    tag = "ZERO_SHOT" if args.zero_shot else name
    (out_dir(cfg) / f"eval-{tag}-s{cfg.seed}.csv").write_text(metrics_csv([mt]))
    print(f"{tag} seed {cfg.seed}: base {mt.base_acc:.2f} novel {mt.novel_acc:.2f} hm {mt.hm:.2f}")
    return 0


def run_ablation(cfg: RunConfig, ds: data.Dataset, backbone: dict, variants, seeds, save_checkpoints: bool = False):
    """Every variant trains from the same backbone with the same seeds, data order and budget."""
    probe = FarlModel.create(encoder_config(cfg), 0, with_adapter=False)
    probe.load_state(backbone)
    bench = EvalBench(probe, ds)
    od = out_dir(cfg)
    rows = []
    for v in variants:
        for s in seeds:
            t0 = time.perf_counter()
            model, log_rows, mt = adapt_one(cfg, ds, backbone, bench, v, s)
            (od / f"adapt-{mt.variant}-s{s}.csv").write_text(epoch_csv(log_rows))
            if save_checkpoints:
                checkpoint.save(adapted_path(cfg, v, s), model.state())
            rows.append(mt)
            log.info("%s seed %d: base %.2f novel %.2f hm %.2f (%.1fs)", mt.variant, s, mt.base_acc, mt.novel_acc,
                     mt.hm, time.perf_counter() - t0)
    (od / "ablation.csv").write_text(metrics_csv(rows))
    return rows


def _print_medians(rows) -> None:
    print("variant            base    novel   hm    (median over seeds)")
    for name, m in median_table(rows).items():
        print(f"{name:<18} {m.base_acc:6.2f}  {m.novel_acc:6.2f}  {m.hm:6.2f}")


def cmd_ablate(cfg: RunConfig, args) -> int:
    variants = [get_variant(v).name for v in cfg.variant_list()]
    ds = load_dataset(cfg)
    rows = run_ablation(cfg, ds, _backbone_state(cfg), variants, cfg.seed_list(), args.save_checkpoints)
    _print_medians(rows)
    return 0


def cmd_attnmap(cfg: RunConfig, args) -> int:
    name = get_variant(cfg.variant).name
    path = Path(args.checkpoint) if args.checkpoint else adapted_path(cfg, name, cfg.seed)
    model = load_model(cfg, path, "adapt", True)
    img = read_image(args.input)
    ex = export_attention(model, img, name)
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for fname, hm in (("attn-phase.pgm", ex.phase_map), ("attn-amp.pgm", ex.amp_map)):
        if hm is not None:
            netpbm.write_pgm(d / fname, hm * 255.0)
            written.append(fname)
    netpbm.write_pgm(d / "phase.pgm", to_gray(ex.phase_image))
    netpbm.write_pgm(d / "amp.pgm", to_gray(ex.amp_image))
    print(f"wrote {', '.join(written + ['phase.pgm', 'amp.pgm'])} to {d}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .gradchecks import TOLERANCE, check_loss, check_ops

    seeds = tuple(range(cfg.seed, cfg.seed + args.points))
    results = {f"op:{k}": v for k, v in check_ops(seeds).items()}
    if not args.ops_only:
        results.update({f"loss:{k.rstrip('.')}": v for k, v in check_loss(seeds).items()})
    bad = 0
    for k, v in results.items():
        ok = v < TOLERANCE
        bad += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {k:<28} max rel err {v:.3e}")
    print(f"{len(results) - bad}/{len(results)} checks below {TOLERANCE:g}")
    return 0 if bad == 0 else 1


def cmd_pipeline(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    cmd_gen_data(cfg, args)
    cmd_pretrain(cfg, args)
    ds = load_dataset(cfg)
    variants = [get_variant(v).name for v in cfg.variant_list()]
    rows = run_ablation(cfg, ds, _backbone_state(cfg), variants, cfg.seed_list(), save_checkpoints=True)
    _print_medians(rows)
    print(f"pipeline finished in {time.perf_counter() - t0:.1f}s")
    return 0


# --------------------------------------------------------------- parser ----

# config keys exposed per command (flag spelling: --k-tokens, --lambda, ...)
MODEL_KEYS = ("k_tokens", "inject_layer", "propagate_rep", "heads", "beta")
ADAPT_KEYS = MODEL_KEYS + ("alpha", "lambda", "lr", "epochs", "batch_size", "shots", "variant", "base_weight",
                           "conditioned", "eval_every")
DATA_KEYS = ("data_dir", "n_per_class", "pretrain_per_class")
PRETRAIN_KEYS = MODEL_KEYS + ("data_dir", "output_dir", "pretrain_lr", "pretrain_epochs", "pretrain_batch")
COMMAND_KEYS = {
    "decompose": (),
    "gen-data": DATA_KEYS,
    "pretrain": PRETRAIN_KEYS,
    "adapt": ADAPT_KEYS + ("data_dir", "output_dir"),
    "eval": MODEL_KEYS + ("variant", "base_weight", "conditioned", "data_dir", "output_dir"),
    "ablate": ADAPT_KEYS + ("data_dir", "output_dir", "seeds", "variants"),
    "attnmap": MODEL_KEYS + ("variant", "output_dir"),
    "gradcheck": (),
    "pipeline": tuple(dict.fromkeys(DATA_KEYS + PRETRAIN_KEYS + ADAPT_KEYS + ("seeds", "variants"))),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--config", default=None, help="key = value config file")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="farl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "decompose": "write phase-only, amplitude-only and log-spectrum images of a PPM",
        "gen-data": "generate the synthetic shapes-vs-styles dataset",
        "pretrain": "contrastively pre-train the toy backbone",
        "adapt": "train the adapter of one variant on the 16-shot base split",
        "eval": "base/novel accuracy and harmonic mean of a checkpoint",
        "ablate": "train and evaluate every variant for every seed",
        "attnmap": "export stream attention heatmaps for one image",
        "gradcheck": "finite-difference check of every op and of the adaptation loss",
        "pipeline": "gen-data, pretrain, ablate in one go",
    }
    for name, keys in COMMAND_KEYS.items():
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        for key in keys:
            sp.add_argument("--" + key.replace("_", "-"), dest=cfgmod.key_to_field(key), default=None, metavar="V")
        if name in ("decompose", "attnmap"):
            sp.add_argument("--in", dest="input", required=True, help="input PPM image")
            sp.add_argument("--out-dir", required=True)
        if name in ("eval", "attnmap"):
            sp.add_argument("--checkpoint", default=None, help="checkpoint path (default: from output_dir)")
        if name == "eval":
            sp.add_argument("--split", choices=("base", "novel", "both"), default="both")
            sp.add_argument("--zero-shot", action="store_true", help="evaluate the backbone alone")
        if name == "ablate":
            sp.add_argument("--save-checkpoints", action="store_true")
        if name == "gradcheck":
            sp.add_argument("--points", type=int, default=3, help="seeded points per check")
            sp.add_argument("--ops-only", action="store_true")
    return p


HANDLERS = {
    "decompose": cmd_decompose, "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
    "eval": cmd_eval, "ablate": cmd_ablate, "attnmap": cmd_attnmap, "gradcheck": cmd_gradcheck,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    overrides = {k: getattr(args, k, None) for k in cfgmod.FIELD_TYPES}
    overrides["seed"] = args.seed
    try:
        cfg = cfgmod.load(args.config, overrides)
        return HANDLERS[args.command](cfg, args)
    except (DependencyError, FileNotFoundError, checkpoint.CheckpointError, netpbm.NetpbmError,
            cfgmod.ConfigError, ModelConfigError, data.ConfigError, data.DataError) as exc:
        print(f"farl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
