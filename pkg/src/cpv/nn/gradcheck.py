"""Central finite-difference verification of analytic gradients.

Checks a random subsample of parameter coordinates. Coordinates whose +/- eps
perturbation flips any ReLU pre-activation sign are discarded and resampled:
the loss is not differentiable across the kink, so the comparison is
meaningless there. Run models in float64 when checking; eps=1e-5 against
float32 round-off proves nothing.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, trace_relu_signs


def _masks_equal(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    f,
    params: list[Tensor],
    eps: float = 1e-5,
    n_coords: int = 150,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and numeric gradients of f().

    `f` must rebuild the scalar loss from `params` on every call and be
    deterministic. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
    denominator.
    """
    base_masks: list = []
    with trace_relu_signs(base_masks):
        loss = f()
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(coords))

    max_rel = 0.0
    checked = 0
    for pos in order:
        if checked >= n_coords:
            break
        pi, j = coords[pos]
        p = params[pi]
        orig = p.data.flat[j]

        p.data.flat[j] = orig + eps
        masks_p: list = []
        with trace_relu_signs(masks_p):
            f_plus = float(f().data)
        p.data.flat[j] = orig - eps
        masks_m: list = []
        with trace_relu_signs(masks_m):
            f_minus = float(f().data)
        p.data.flat[j] = orig

        if not (_masks_equal(base_masks, masks_p) and _masks_equal(base_masks, masks_m)):
            continue  # kink crossed; this coordinate is not checkable
        numeric = (f_plus - f_minus) / (2.0 * eps)
        ana = float(analytic[pi].flat[j])
        rel = abs(numeric - ana) / max(abs(numeric), abs(ana), 1e-8)
        max_rel = max(max_rel, rel)
        checked += 1
    return max_rel
