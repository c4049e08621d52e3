"""Finite-difference verification suite for every layer type and the full loss.

All checks run in float64 with central differences; each returns the max
relative gradient error, which should sit well below 1e-4.
"""
from __future__ import annotations

import numpy as np

from .model import CPVModel, LossWeights, total_loss
from .nn import (
    Tensor,
    conv2d,
    grad_check,
    linear,
    mean,
    parameter,
    relu,
    softmax_cross_entropy,
)
from .planner import generate_dataset
from .trainer import make_batch

EPS = 1e-5


def _randp(rng, *shape) -> Tensor:
    return parameter(rng.standard_normal(shape))


def _mul_const(a: Tensor, const: np.ndarray) -> Tensor:
    # fixed elementwise weighting, so a scalar loss still exercises every output
    from .nn.autodiff import _op

    def bwd(g):
        a.grad += g * const

    return _op(a.data * const, (a,), bwd)


def check_conv2d(seed: int = 0, eps: float = EPS, n_coords: int = 120) -> float:
    rng = np.random.default_rng(seed)
    x = _randp(rng, 2, 3, 9, 8)
    w = _randp(rng, 4, 3, 3, 3)
    b = _randp(rng, 4)
    proj = rng.standard_normal((2, 4, 5, 4))

    def f():
        return mean(_mul_const(conv2d(x, w, b), proj))

    return grad_check(f, [x, w, b], eps=eps, n_coords=n_coords, seed=seed)


def check_linear(seed: int = 0, eps: float = EPS, n_coords: int = 80) -> float:
    rng = np.random.default_rng(seed)
    x = _randp(rng, 4, 7)
    w = _randp(rng, 7, 5)
    b = _randp(rng, 5)
    proj = rng.standard_normal((4, 5))

    def f():
        return mean(_mul_const(linear(x, w, b), proj))

    return grad_check(f, [x, w, b], eps=eps, n_coords=n_coords, seed=seed)


def check_relu_mlp(seed: int = 0, eps: float = EPS, n_coords: int = 80) -> float:
    rng = np.random.default_rng(seed)
    x = _randp(rng, 5, 6)
    w1, b1 = _randp(rng, 6, 8), _randp(rng, 8)
    w2, b2 = _randp(rng, 8, 3), _randp(rng, 3)

    def f():
        return mean(linear(relu(linear(x, w1, b1)), w2, b2))

    return grad_check(f, [x, w1, b1, w2, b2], eps=eps, n_coords=n_coords, seed=seed)


def check_softmax_ce(seed: int = 0, eps: float = EPS, n_coords: int = 30) -> float:
    rng = np.random.default_rng(seed)
    logits = _randp(rng, 5, 6)
    labels = rng.integers(0, 6, size=5)

    def f():
        return softmax_cross_entropy(logits, labels)

    return grad_check(f, [logits], eps=eps, n_coords=n_coords, seed=seed)


def microbatch(seed: int = 7, dtype=np.float64, batch_size: int = 4) -> dict:
    """A 2-pair batch with valid negatives, for whole-model gradient checks."""
    ds = generate_dataset(seed, n_pairs=2, k_min=1, k_max=2, noise=0.0)
    for attempt in range(100):
        batch = make_batch(ds.pairs, np.random.default_rng(seed + attempt),
                           batch_size, dtype=dtype)
        if not np.any(batch["neg"] < 0):
            return batch
    raise RuntimeError("could not draw a batch with two distinct pairs")


def check_total_loss(seed: int = 0, eps: float = EPS, n_coords: int = 120) -> float:
    """CPV-Full total loss on a 2-pair microbatch, float64."""
    batch = microbatch(dtype=np.float64)
    model = CPVModel("cpv", dim=16, seed=seed, dtype=np.float64)
    weights = LossWeights(1.0, 1.0)

    def f():
        loss, _ = total_loss(model, batch, weights)
        return loss

    return grad_check(f, model.params(), eps=eps, n_coords=n_coords, seed=seed)


def run_all(seed: int = 0, eps: float = EPS, n_coords: int = 120) -> dict[str, float]:
    return {
        "conv2d": check_conv2d(seed, eps, n_coords),
        "linear": check_linear(seed, eps, min(n_coords, 80)),
        "relu_mlp": check_relu_mlp(seed, eps, min(n_coords, 80)),
        "softmax_ce": check_softmax_ce(seed, eps, min(n_coords, 30)),
        "total_loss": check_total_loss(seed, eps, n_coords),
    }
