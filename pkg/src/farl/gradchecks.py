"""Finite-difference gradient checks for every differentiable op and for the adaptation loss."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TOLERANCE = 1e-4


def _weights(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(size=shape)


def _probe(op: Callable[[Tensor], Tensor], w: np.ndarray) -> Callable[[Tensor], Tensor]:
    """Scalar probe sum(op(x) * w); random w keeps the test from hiding behind symmetric cancellation."""
    return lambda x: ad.sum_(op(x) * Tensor(w))


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """name -> (scalar fn, point) for one seeded draw."""
    x34 = rng.normal(size=(3, 4))
    pos34 = rng.uniform(0.5, 2.0, size=(3, 4))
    away = np.where(rng.random((3, 4)) < 0.5, -1.0, 1.0) * rng.uniform(0.1, 2.0, size=(3, 4))
    c34 = rng.normal(size=(3, 4))
    a23 = rng.normal(size=(2, 3))
    b45 = rng.normal(size=(4, 5))
    imgs = rng.normal(size=(1, 5, 5, 2))
    labels = rng.integers(0, 4, size=3)
    gamma, beta = rng.normal(size=4), rng.normal(size=4)

    def w(shape):
        return _weights(rng, shape)

    cases = {
        "add": (_probe(lambda x: x + Tensor(c34), w((3, 4))), x34),
        "add_broadcast": (_probe(lambda x: ad.add(x, Tensor(c34)), w((3, 4))), rng.normal(size=(4,))),
        "sub": (_probe(lambda x: Tensor(c34) - x, w((3, 4))), x34),
        "mul": (_probe(lambda x: x * x, w((3, 4))), x34),
        "div": (_probe(lambda x: ad.div(Tensor(c34), x), w((3, 4))), pos34),
        "scale": (_probe(lambda x: ad.scale(x, -2.5), w((3, 4))), x34),
        "matmul_left": (_probe(lambda x: ad.matmul(Tensor(a23), x), w((2, 4))), rng.normal(size=(3, 4))),
        "matmul_right": (_probe(lambda x: ad.matmul(x, Tensor(b45)), w((3, 5))), x34),
        "matmul_batched": (_probe(lambda x: ad.matmul(x, ad.swapaxes(x, -1, -2)), w((2, 3, 3))),
                           rng.normal(size=(2, 3, 4))),
        "matmul_shared": (_probe(lambda x: ad.matmul(x, Tensor(b45)), w((2, 3, 5))), rng.normal(size=(2, 3, 4))),
        "exp": (_probe(ad.exp, w((3, 4))), x34),
        "log": (_probe(ad.log, w((3, 4))), pos34),
        "tanh": (_probe(ad.tanh, w((3, 4))), x34),
        "relu": (_probe(ad.relu, w((3, 4))), away),
        "gelu": (_probe(ad.gelu, w((3, 4))), x34),
        "sqrt": (_probe(ad.sqrt, w((3, 4))), pos34),
        "reshape": (_probe(lambda x: ad.reshape(x, (4, 3)), w((4, 3))), x34),
        "transpose": (_probe(ad.transpose, w((4, 3))), x34),
        "swapaxes": (_probe(lambda x: ad.swapaxes(x, 0, 2), w((4, 3, 2))), rng.normal(size=(2, 3, 4))),
        "getitem_slice": (_probe(lambda x: ad.getitem(x, (slice(1, 3), slice(None, None, 2))), w((2, 2))), x34),
        "getitem_fancy": (_probe(lambda x: ad.getitem(x, np.array([0, 2, 0])), w((3, 4))), x34),
        "broadcast_to": (_probe(lambda x: ad.broadcast_to(x, (3, 4)), w((3, 4))), rng.normal(size=(1, 4))),
        "concat": (_probe(lambda x: ad.concat([x, Tensor(c34), x], axis=1), w((3, 12))), x34),
        "stack": (_probe(lambda x: ad.stack([x, Tensor(c34)], axis=0), w((2, 3, 4))), x34),
        "sum": (_probe(lambda x: ad.sum_(x, axis=1), w((3,))), x34),
        "mean": (_probe(lambda x: ad.mean(x, axis=0, keepdims=True), w((1, 4))), x34),
        "mean_pool": (_probe(ad.mean_pool, w((4,))), x34),
        "softmax_rows": (_probe(ad.softmax_rows, w((3, 4))), x34),
        "log_softmax": (_probe(ad.log_softmax, w((3, 4))), x34),
        "layer_norm": (_probe(lambda x: ad.layer_norm(x, Tensor(gamma), Tensor(beta)), w((3, 4))), x34),
        "layer_norm_gamma": (_probe(lambda g: ad.layer_norm(Tensor(c34), g, Tensor(beta)), w((3, 4))), gamma),
        "l2_normalize": (_probe(ad.l2_normalize, w((3, 4))), x34),
        "cosine_similarity": (_probe(lambda x: ad.cosine_similarity(x, Tensor(c34)), w((3,))), x34),
        "cross_entropy": (lambda x: ad.cross_entropy(x, labels), x34),
        "im2col": (_probe(lambda x: ad.im2col(x, 3, 2, 1), w((1, 3, 3, 18))), imgs),
    }
    return cases


def check_ops(seeds=(0, 1, 2), eps: float = 1e-5) -> dict[str, float]:
    """Max relative error per op over the seeded points."""
    worst: dict[str, float] = {}
    for s in seeds:
        for name, (fn, point) in op_cases(np.random.default_rng([s, 11])).items():
            worst[name] = max(worst.get(name, 0.0), ad.gradcheck(fn, point, eps))
    return worst


def gradcheck_coords(loss_fn: Callable[[], Tensor], param: Tensor, coords, eps: float = 1e-5,
                     richardson: bool = False) -> float:
    """gradcheck restricted to selected flat coordinates of a parameter living inside a model."""
    for p in _all_leaves(loss_fn):
        p.grad = None
    was = param.requires_grad
    param.requires_grad = True
    out = loss_fn()
    ad.backward(out)
    analytic = np.zeros_like(param.data) if param.grad is None else param.grad.copy()
    param.grad = None
    flat = param.data.reshape(-1)
    worst = 0.0

    def central(i, h):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn().item()
        flat[i] = orig - h
        fm = loss_fn().item()
        flat[i] = orig
        return (fp - fm) / (2 * h)

    with ad.no_grad():
        for i in coords:
            if richardson:
                # cancels the O(h^2) truncation term of the central difference
                num = (4.0 * central(i, eps / 2) - central(i, eps)) / 3.0
            else:
                num = central(i, eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    param.requires_grad = was
    return worst


def _all_leaves(loss_fn) -> list[Tensor]:
    return list(getattr(loss_fn, "leaves", []))


def loss_setup(seed: int, batch: int = 2, n_classes: int = 2, variant: str = "FULL"):
    """A randomly initialised model, a random batch and a closure evaluating the adaptation loss."""
    from .data import CLASS_NAMES
    from .encoders import EncoderConfig
    from .model import FarlModel, build_image_cache, build_text_cache, forward, get_variant
    from .train import LossConfig, farl_loss

    rng = np.random.default_rng([seed, 12])
    model = FarlModel.create(EncoderConfig(), seed)
    model.backbone.requires_grad_(False)
    # move the residual MLP and REP tokens off their init so every branch carries gradient
    for p in model.adapter.parameters():
        p.data = p.data + 0.05 * rng.normal(size=p.shape)
    images = rng.uniform(0, 1, size=(batch, 3, 32, 32))
    labels = rng.integers(0, n_classes, size=batch)
    cache = build_image_cache(model, images)
    text = build_text_cache(model, tuple(range(n_classes)), CLASS_NAMES)
    v = get_variant(variant)
    cfg = LossConfig()

    def loss_fn() -> Tensor:
        out = forward(model, cache, text, v)
        return farl_loss(out, labels, cache.f_v_frozen, text.f_t_frozen, cfg)[0]
    loss_fn.leaves = model.adapter.parameters()
    return model, loss_fn


LOSS_GROUPS = ("fusion.R", "stream_phase.", "stream_amp.", "fusion.attn_phase.", "fusion.attn_amp.", "fusion.mlp.",
               "bank.", "rep_head.")


LOSS_EPS = 4e-3


def check_loss(seeds=(0, 1, 2), coords_per_tensor: int = 4, eps: float = LOSS_EPS) -> dict[str, float]:
    """Max relative error of the adaptation loss gradient per trainable group, on sampled coordinates.

    Query/key gradients are ~1e-7 at init (near-uniform attention), so a step of 1e-5 leaves
    central differences dominated by round-off. A larger step with Richardson extrapolation
    keeps both round-off and truncation error small.
    """
    worst = {g: 0.0 for g in LOSS_GROUPS}
    for s in seeds:
        model, loss_fn = loss_setup(s)
        pick = np.random.default_rng([s, 13])
        for name, p in model.adapter.named_parameters().items():
            group = next(g for g in LOSS_GROUPS if name.startswith(g))
            coords = pick.choice(p.data.size, size=min(coords_per_tensor, p.data.size), replace=False)
            worst[group] = max(worst[group], gradcheck_coords(loss_fn, p, coords, eps, richardson=True))
    return worst
