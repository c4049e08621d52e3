import math

import numpy as np
import pytest

from cpv.model import (
    CONV_FEATURES,
    CPVModel,
    LossWeights,
    Mode,
    hom_loss,
    il_loss,
    obs_to_input,
    pair_loss,
    total_loss,
    triplet_margin,
)
from cpv.nn import Tensor
from cpv.planner import generate_dataset
from cpv.trainer import make_batch


@pytest.fixture(scope="module")
def tiny_batch():
    ds = generate_dataset(seed=55, n_pairs=4, k_min=1, k_max=2, noise=0.0)
    for seed in range(100):
        batch = make_batch(ds.pairs, np.random.default_rng(seed), 6)
        if not np.any(batch["neg"] < 0):
            return batch
    raise AssertionError("no batch with two distinct pairs")


def zeroed(model):
    for p in model.params():
        p.data[...] = 0
    return model


# --- triplet margin: the three analytic cases -------------------------------


def test_triplet_anchor_equals_positive_far_negative():
    a = Tensor(np.array([[0.0, 0.0]]))
    n = Tensor(np.array([[3.0, 0.0]]))
    assert float(triplet_margin(a, a, n).data) == 0.0


def test_triplet_all_equal():
    a = Tensor(np.array([[1.0, 2.0]]))
    assert float(triplet_margin(a, a, a).data) == 1.0


def test_triplet_one_dimensional():
    a = Tensor(np.array([[0.0]]))
    p = Tensor(np.array([[2.0]]))
    n = Tensor(np.array([[1.0]]))
    assert float(triplet_margin(a, p, n).data) == 2.0


def test_triplet_nonnegative_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, p, n = (Tensor(rng.standard_normal((4, 8))) for _ in range(3))
        val = float(triplet_margin(a, p, n).data)
        assert val >= 0.0


# --- encoder ----------------------------------------------------------------


def test_embed_dimension_and_determinism():
    model = CPVModel("cpv", dim=64, seed=3)
    obs = obs_to_input(np.zeros((2, 33, 30, 3), np.uint8))
    v1 = model.embed(obs, obs)
    v2 = model.embed(obs, obs)
    assert v1.data.shape == (2, 64)
    assert np.array_equal(v1.data, v2.data)


def test_zero_encoder_embeds_to_zero():
    model = zeroed(CPVModel("cpv", dim=32, seed=0))
    obs = obs_to_input(np.full((1, 33, 30, 3), 77, np.uint8))
    assert np.all(model.embed(obs, obs).data == 0)


def test_default_dim_is_512():
    assert CPVModel("te", seed=0).dim == 512


# --- policy difference invariance --------------------------------------------


def dyadic(rng, shape, scale=2.0):
    # multiples of 2^-8 with |x| <= scale: float32 addition/subtraction exact
    return (rng.integers(-256 * scale, 256 * scale + 1, size=shape) / 256.0).astype(
        np.float32
    )


def test_difference_invariance_bitwise():
    rng = np.random.default_rng(9)
    model = CPVModel("cpv", dim=16, seed=2)
    for _ in range(10):
        obs = obs_to_input(rng.integers(0, 256, (1, 33, 30, 3)).astype(np.uint8))
        v_ref = dyadic(rng, (1, 16))
        v_prog = dyadic(rng, (1, 16))
        c = dyadic(rng, (1, 16))
        base = model.policy_logits(obs, (v_ref, v_prog)).data
        shifted = model.policy_logits(obs, (v_ref + c, v_prog + c)).data
        assert np.array_equal(base, shifted)


def test_equal_embeddings_give_zero_conditioning():
    model = CPVModel("cpv", dim=8, seed=1)
    obs = obs_to_input(np.zeros((1, 33, 30, 3), np.uint8))
    v = np.random.default_rng(0).standard_normal((1, 8)).astype(np.float32)
    same = model.policy_logits(obs, (v, v)).data
    explicit = model.policy_logits(obs, (np.zeros((1, 8), np.float32),
                                          np.zeros((1, 8), np.float32))).data
    assert np.array_equal(same, explicit)


# --- losses -------------------------------------------------------------------


def test_zero_model_loss_values(tiny_batch):
    model = zeroed(CPVModel("cpv", dim=16, seed=0))
    assert float(il_loss(model, tiny_batch).data) == pytest.approx(math.log(6), abs=1e-6)
    assert float(hom_loss(model, tiny_batch).data) == 1.0
    assert float(pair_loss(model, tiny_batch).data) == 1.0
    total, parts = total_loss(model, tiny_batch, LossWeights(1.0, 1.0))
    assert float(total.data) == pytest.approx(math.log(6) + 2.0, abs=1e-6)
    assert parts["il"] == pytest.approx(math.log(6), abs=1e-6)


def test_total_loss_plain_equals_il(tiny_batch):
    model = CPVModel("cpv", dim=16, seed=4)
    total, parts = total_loss(model, tiny_batch, LossWeights(0.0, 0.0))
    assert float(total.data) == float(il_loss(model, tiny_batch).data)
    assert math.isnan(parts["hom"]) and math.isnan(parts["pair"])


def test_hom_pair_need_two_distinct_pairs():
    ds = generate_dataset(seed=56, n_pairs=1, k_min=1, k_max=1, noise=0.0)
    batch = make_batch(ds.pairs, np.random.default_rng(0), 3)
    assert np.all(batch["neg"] == -1)
    model = CPVModel("cpv", dim=8, seed=0)
    with pytest.raises(ValueError):
        hom_loss(model, batch)
    with pytest.raises(ValueError):
        pair_loss(model, batch)
    il_loss(model, batch)  # imitation term never needs a negative


def test_naive_mode_has_no_embedding_losses(tiny_batch):
    model = CPVModel("naive", dim=16, seed=0)
    with pytest.raises(ValueError):
        model.embed(None, None)
    with pytest.raises(ValueError):
        total_loss(model, tiny_batch, LossWeights(1.0, 0.0))
    total, parts = total_loss(model, tiny_batch, LossWeights(0.0, 0.0))
    assert math.isfinite(parts["il"])


def test_te_mode_uses_reference_only(tiny_batch):
    model = CPVModel("te", dim=16, seed=0)
    total, parts = total_loss(model, tiny_batch, LossWeights(1.0, 1.0))
    assert math.isfinite(float(total.data))
    assert model.mode is Mode.TE


def test_policy_fc_width(tiny_batch):
    cpv = CPVModel("cpv", dim=32, seed=0)
    assert cpv.fcs[0][0].data.shape == (CONV_FEATURES + 32, 64)
    naive = CPVModel("naive", dim=32, seed=0)
    assert naive.fcs[0][0].data.shape == (CONV_FEATURES, 64)
    assert naive.pol_conv.layers[0][0].data.shape[1] == 12


def test_loss_order_invariance(tiny_batch):
    # batch mean: permuting items leaves the il loss unchanged
    model = CPVModel("cpv", dim=16, seed=5)
    perm = np.random.default_rng(1).permutation(len(tiny_batch["action"]))
    shuffled = {}
    for k, v in tiny_batch.items():
        arr = np.asarray(v)
        shuffled[k] = arr[perm] if arr.ndim else arr
    shuffled["neg"] = np.argsort(perm)[tiny_batch["neg"][perm]]
    a = float(il_loss(model, tiny_batch).data)
    b = float(il_loss(model, shuffled).data)
    assert a == pytest.approx(b, rel=1e-6)
