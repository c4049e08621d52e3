"""Trajectory encoder, conditioned policy, and training losses.

The encoder g maps a (first, last) observation pair, concatenated channel-wise,
through four stride-2 convs (16/32/64/64 channels) and a linear projection to a
D-dimensional plan vector. The policy runs the current observation through its
own conv stack and concatenates the features with a conditioning vector before
a 4x64 fully connected stack and a 6-way action head.

Conditioning modes:
    cpv    policy consumes g(ref_first, ref_last) - g(obs_first, obs_now)
    te     policy consumes g(ref_first, ref_last) unchanged
    naive  no encoder; the policy conv sees all four images stacked (12 ch)

In cpv mode the subtraction happens inside policy_logits, so the logits depend
on the two embeddings only through their difference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import seeding
from .craftworld import OBS_H, OBS_W, Action
from .nn import (
    Tensor,
    add,
    add_const,
    concat,
    conv2d,
    flatten,
    gather_rows,
    l2_rows,
    linear,
    mean,
    parameter,
    relu,
    rows,
    scale,
    softmax_cross_entropy,
    sub,
)
from .nn.autodiff import as_tensor

CONV_CHANNELS = (16, 32, 64, 64)
CONV_FEATURES = 64 * 3 * 2  # four stride-2 convs collapse 33x30 to 3x2
FC_HIDDEN = 64
N_FC = 4
N_ACTIONS = len(Action)
DEFAULT_DIM = 512
MARGIN = 1.0


class Mode(Enum):
    CPV = "cpv"
    TE = "te"
    NAIVE = "naive"


@dataclass
class LossWeights:
    lambda_hom: float = 0.0
    lambda_pair: float = 0.0

    @classmethod
    def variant(cls, name: str) -> "LossWeights":
        table = {"plain": (0.0, 0.0), "pair": (0.0, 1.0), "hom": (1.0, 0.0), "full": (1.0, 1.0)}
        return cls(*table[name])


def obs_to_input(obs: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 HWC observation(s) -> float CHW in [0, 1]."""
    arr = np.asarray(obs)
    if arr.ndim == 3:
        arr = arr[None]
    return arr.transpose(0, 3, 1, 2).astype(dtype) / dtype(255)


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _ConvStack:
    def __init__(self, rng, in_channels: int, dtype):
        self.layers = []
        c = in_channels
        for out_c in CONV_CHANNELS:
            w = parameter(_kaiming_uniform(rng, (out_c, c, 3, 3), c * 9, dtype))
            b = parameter(np.zeros(out_c, dtype=dtype))
            self.layers.append((w, b))
            c = out_c

    def __call__(self, x: Tensor) -> Tensor:
        for w, b in self.layers:
            x = relu(conv2d(x, w, b))
        return flatten(x)

    def params(self):
        return [t for wb in self.layers for t in wb]


class CPVModel:
    """Encoder + policy with one of the three conditioning modes."""

    def __init__(self, mode, dim: int = DEFAULT_DIM, seed: int = 0, dtype=np.float32):
        self.mode = Mode(mode)
        self.dim = int(dim)
        self.dtype = np.dtype(dtype).type
        self.seed = seed
        self._build(seeding.rng_for(seed, seeding.INIT))

    def _build(self, rng):
        dtype = self.dtype
        if self.mode is Mode.NAIVE:
            self.enc_conv = None
            self.enc_w = None
            self.enc_b = None
        else:
            self.enc_conv = _ConvStack(rng, 6, dtype)
            self.enc_w = parameter(_kaiming_uniform(rng, (CONV_FEATURES, self.dim), CONV_FEATURES, dtype))
            self.enc_b = parameter(np.zeros(self.dim, dtype=dtype))
        self.pol_conv = _ConvStack(rng, 12 if self.mode is Mode.NAIVE else 3, dtype)
        fc_in = CONV_FEATURES + (0 if self.mode is Mode.NAIVE else self.dim)
        self.fcs = []
        for _ in range(N_FC):
            w = parameter(_kaiming_uniform(rng, (fc_in, FC_HIDDEN), fc_in, dtype))
            b = parameter(np.zeros(FC_HIDDEN, dtype=dtype))
            self.fcs.append((w, b))
            fc_in = FC_HIDDEN
        self.out_w = parameter(_kaiming_uniform(rng, (FC_HIDDEN, N_ACTIONS), FC_HIDDEN, dtype))
        self.out_b = parameter(np.zeros(N_ACTIONS, dtype=dtype))

    def params(self) -> list[Tensor]:
        ps: list[Tensor] = []
        if self.enc_conv is not None:
            ps += self.enc_conv.params() + [self.enc_w, self.enc_b]
        ps += self.pol_conv.params()
        for w, b in self.fcs:
            ps += [w, b]
        ps += [self.out_w, self.out_b]
        return ps

    def astype(self, dtype) -> "CPVModel":
        """Same weights in another precision (for gradient checking)."""
        other = CPVModel(self.mode, self.dim, self.seed, dtype)
        for dst, src in zip(other.params(), self.params()):
            dst.data = src.data.astype(dtype)
        return other

    def embed_stacked(self, x6) -> Tensor:
        """Plan vectors for observation pairs already stacked to 6 channels."""
        if self.enc_conv is None:
            raise ValueError("naive mode has no encoder")
        return linear(self.enc_conv(as_tensor(x6)), self.enc_w, self.enc_b)

    def embed(self, obs_a, obs_b) -> Tensor:
        """Plan vector of the trajectory whose first/last observations are given."""
        if self.enc_conv is None:
            raise ValueError("naive mode has no encoder")
        return self.embed_stacked(concat((as_tensor(obs_a), as_tensor(obs_b)), axis=1))

    def policy_logits(self, obs_t, context) -> Tensor:
        """Action logits for the current observation under the mode's context.

        cpv:   context = (v_ref, v_progress), combined strictly as a difference
        te:    context = v_ref
        naive: context = (ref_first, ref_last, obs_first) raw images
        """
        obs_t = as_tensor(obs_t)
        if self.mode is Mode.NAIVE:
            ref0, ref_t, obs0 = (as_tensor(c) for c in context)
            h = self.pol_conv(concat((ref0, ref_t, obs0, obs_t), axis=1))
        else:
            if self.mode is Mode.CPV:
                v_ref, v_prog = context
                cond = sub(as_tensor(v_ref), as_tensor(v_prog))
            else:
                cond = as_tensor(context)
            h = concat((self.pol_conv(obs_t), cond), axis=1)
        for w, b in self.fcs:
            h = relu(linear(h, w, b))
        return linear(h, self.out_w, self.out_b)


def triplet_margin(anchor, positive, negative) -> Tensor:
    """max(||a-p|| - ||a-n|| + 1, 0), averaged over rows of (B, D) inputs."""
    a, p, n = as_tensor(anchor), as_tensor(positive), as_tensor(negative)
    d_pos = l2_rows(sub(a, p))
    d_neg = l2_rows(sub(a, n))
    return mean(relu(add_const(sub(d_pos, d_neg), MARGIN)))


def _batch_arrays(batch, dtype):
    return {
        k: np.ascontiguousarray(batch[k], dtype=dtype)
        for k in ("ref0", "refT", "demo0", "demoT", "obs_t", "split_obs")
    }


def _check_negatives(batch):
    if np.any(np.asarray(batch["neg"]) < 0):
        raise ValueError(
            "hom/pair losses need a batch with at least two distinct pairs (j != i)"
        )


class _LossGraph:
    """Shared forward passes for whichever loss terms a caller needs.

    prepare() runs the encoder once on all requested observation pairs stacked
    along the batch axis, which is far cheaper than one pass per pair role.
    """

    _PAIR_SPECS = {
        "ref": ("ref0", "refT"),
        "prog": ("demo0", "obs_t"),
        "first": ("demo0", "split_obs"),
        "second": ("split_obs", "demoT"),
        "demo": ("demo0", "demoT"),
    }
    _IL_KEYS = {Mode.CPV: ("ref", "prog"), Mode.TE: ("ref",), Mode.NAIVE: ()}
    HOM_KEYS = ("first", "second", "demo")
    PAIR_KEYS = ("demo", "ref")

    def __init__(self, model: CPVModel, batch):
        self.model = model
        self.batch = batch
        self.arrays = _batch_arrays(batch, model.dtype)
        self._cache: dict[str, Tensor] = {}

    def prepare(self, keys) -> None:
        keys = [k for k in dict.fromkeys(keys) if k not in self._cache]
        if not keys or self.model.mode is Mode.NAIVE:
            return
        blocks = [
            np.concatenate([self.arrays[a], self.arrays[b]], axis=1)
            for a, b in (self._PAIR_SPECS[k] for k in keys)
        ]
        n = blocks[0].shape[0]
        emb = self.model.embed_stacked(np.concatenate(blocks, axis=0))
        for i, k in enumerate(keys):
            self._cache[k] = rows(emb, i * n, (i + 1) * n)

    def _embed(self, key: str) -> Tensor:
        if key not in self._cache:
            self.prepare([key])
        return self._cache[key]

    def il(self) -> Tensor:
        m = self.model
        self.prepare(self._IL_KEYS[m.mode])
        if m.mode is Mode.NAIVE:
            context = (self.arrays["ref0"], self.arrays["refT"], self.arrays["demo0"])
        elif m.mode is Mode.TE:
            context = self._embed("ref")
        else:
            context = (self._embed("ref"), self._embed("prog"))
        logits = m.policy_logits(self.arrays["obs_t"], context)
        return softmax_cross_entropy(logits, self.batch["action"])

    def hom(self) -> Tensor:
        if self.model.mode is Mode.NAIVE:
            raise ValueError("naive mode has no encoder for the homomorphism loss")
        _check_negatives(self.batch)
        self.prepare(self.HOM_KEYS)
        anchor = add(self._embed("first"), self._embed("second"))
        whole = self._embed("demo")
        negative = gather_rows(whole, self.batch["neg"])
        return triplet_margin(anchor, whole, negative)

    def pair(self) -> Tensor:
        if self.model.mode is Mode.NAIVE:
            raise ValueError("naive mode has no encoder for the pair loss")
        _check_negatives(self.batch)
        self.prepare(self.PAIR_KEYS)
        demo = self._embed("demo")
        ref = self._embed("ref")
        negative = gather_rows(ref, self.batch["neg"])
        return triplet_margin(demo, ref, negative)

    def keys_for(self, weights: "LossWeights"):
        keys = list(self._IL_KEYS[self.model.mode])
        if weights.lambda_hom != 0:
            keys += self.HOM_KEYS
        if weights.lambda_pair != 0:
            keys += self.PAIR_KEYS
        return keys


def il_loss(model: CPVModel, batch) -> Tensor:
    return _LossGraph(model, batch).il()


def hom_loss(model: CPVModel, batch) -> Tensor:
    return _LossGraph(model, batch).hom()


def pair_loss(model: CPVModel, batch) -> Tensor:
    return _LossGraph(model, batch).pair()


def total_loss(model: CPVModel, batch, weights: LossWeights):
    """L_IL + lambda_hom * L_Hom + lambda_pair * L_Pair, with shared forwards.

    Returns (loss Tensor, {"il", "hom", "pair", "total"} floats). Terms whose
    weight is zero are skipped (their reported value is nan); naive mode
    requires both weights to be zero.
    """
    if model.mode is Mode.NAIVE and (weights.lambda_hom != 0 or weights.lambda_pair != 0):
        raise ValueError("naive mode cannot optimize embedding losses")
    g = _LossGraph(model, batch)
    g.prepare(g.keys_for(weights))
    total = g.il()
    parts = {"il": float(total.data), "hom": math.nan, "pair": math.nan}
    if weights.lambda_hom != 0:
        hom = g.hom()
        parts["hom"] = float(hom.data)
        total = add(total, scale(hom, weights.lambda_hom))
    if weights.lambda_pair != 0:
        pair = g.pair()
        parts["pair"] = float(pair.data)
        total = add(total, scale(pair, weights.lambda_pair))
    parts["total"] = float(total.data)
    return total, parts


def loss_report(model: CPVModel, batch, weights: LossWeights) -> dict:
    """Forward-only evaluation of all three losses (regardless of weights)."""
    g = _LossGraph(model, batch)
    negatives_ok = not np.any(np.asarray(batch["neg"]) < 0)
    if model.mode is not Mode.NAIVE and negatives_ok:
        g.prepare(g._IL_KEYS[g.model.mode] + g.HOM_KEYS + g.PAIR_KEYS)
    out = {"il": float(g.il().data), "hom": math.nan, "pair": math.nan}
    if model.mode is not Mode.NAIVE and negatives_ok:
        out["hom"] = float(g.hom().data)
        out["pair"] = float(g.pair().data)

    def term(lam, val):
        return 0.0 if lam == 0 else lam * val  # nan propagates only if weighted

    out["total"] = out["il"] + term(weights.lambda_hom, out["hom"]) + term(
        weights.lambda_pair, out["pair"]
    )
    return out
