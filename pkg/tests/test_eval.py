import math

import numpy as np
import pytest

from cpv.craftworld import Skill
from cpv.evalharness import (
    HORIZONS,
    EvalResult,
    eval_composition,
    eval_generalization,
    hom_gap,
    horizon_for,
    reference_context,
    rollout,
    score,
    write_results_csv,
)
from cpv.model import CPVModel
from cpv.planner import generate_dataset, plan_task, sample_task
from cpv.craftworld import sample_env


# --- scoring -----------------------------------------------------------------


def test_score_exact_and_containment():
    task = [Skill.CHOP_TREE, Skill.EAT_BREAD]
    events = [Skill.CHOP_TREE, Skill.EAT_BREAD]
    assert score(events, task, "contain") and score(events, task, "exact")
    extra = events + [Skill.EAT_BREAD]
    assert score(extra, [Skill.CHOP_TREE], "contain")
    assert not score(extra, [Skill.CHOP_TREE], "exact")
    assert not score([Skill.CHOP_TREE], [Skill.CHOP_TREE, Skill.CHOP_TREE], "contain")
    assert not score([Skill.CHOP_TREE], [Skill.CHOP_TREE, Skill.CHOP_TREE], "exact")


def test_score_order_insensitive():
    task = [Skill.CHOP_TREE, Skill.EAT_BREAD]
    assert score([Skill.EAT_BREAD, Skill.CHOP_TREE], task, "exact")


def test_score_containment_monotone():
    rng = np.random.default_rng(0)
    for _ in range(50):
        task = [Skill(int(rng.integers(0, 5))) for _ in range(3)]
        events = [Skill(int(rng.integers(0, 5))) for _ in range(4)]
        before = score(events, task, "contain")
        more = events + [Skill(int(rng.integers(0, 5)))]
        if before:
            assert score(more, task, "contain")


def test_score_rejects_unknown_criterion():
    with pytest.raises(ValueError):
        score([], [], "sometimes")


# --- horizons -----------------------------------------------------------------


def test_pinned_horizons():
    assert horizon_for(4) == 160
    assert horizon_for(8) == 280
    assert horizon_for(16) == 550
    assert HORIZONS == {4: 160, 8: 280, 16: 550}


def test_probe_horizon_reasonable_and_cached():
    h2 = horizon_for(2)
    assert 20 <= h2 <= 120
    assert horizon_for(2) == h2


# --- rollout ------------------------------------------------------------------


def test_rollout_horizon_semantics():
    model = CPVModel("cpv", dim=8, seed=0)
    task = [Skill.CHOP_TREE]
    state0 = sample_env(3, task)
    ref = plan_task(4, task, 0.0)
    ctx = reference_context(model, [ref])
    with pytest.raises(ValueError):
        rollout(model, state0, ctx, horizon=0)
    rr = rollout(model, state0, ctx, horizon=1)
    assert rr.steps == 1


def test_rollout_deterministic():
    model = CPVModel("te", dim=8, seed=1)
    task = [Skill.EAT_BREAD]
    state0 = sample_env(5, task)
    ref = plan_task(6, task, 0.0)
    ctx = reference_context(model, [ref])
    a = rollout(model, state0, ctx, horizon=30, task=task)
    b = rollout(model, state0, ctx, horizon=30, task=task)
    assert a.events == b.events and a.steps == b.steps


def test_naive_context_averages_observations():
    model = CPVModel("naive", dim=8, seed=0)
    r1 = plan_task(7, [Skill.EAT_BREAD], 0.0)
    r2 = plan_task(8, [Skill.CHOP_TREE], 0.0)
    first, last = reference_context(model, [r1, r2])
    assert first.shape == (1, 3, 33, 30)
    lone = reference_context(model, [r1])
    assert np.allclose(
        first, (lone[0] + reference_context(model, [r2])[0]) / 2, atol=1e-7
    )


def test_cpv_context_sums_vectors():
    model = CPVModel("cpv", dim=8, seed=0)
    r1 = plan_task(7, [Skill.EAT_BREAD], 0.0)
    r2 = plan_task(8, [Skill.CHOP_TREE], 0.0)
    v = reference_context(model, [r1, r2])
    assert np.allclose(v, reference_context(model, [r1]) + reference_context(model, [r2]),
                       atol=1e-5)


# --- expert upper bound (small) -------------------------------------------------


def test_expert_as_policy_succeeds():
    res = eval_generalization(None, 4, episodes=6, seed=11, expert=True)
    assert res.successes == 6
    assert res.rate == 1.0
    assert res.mean_steps <= 160


def test_expert_deterministic_across_worker_counts():
    r1 = eval_generalization(None, 4, episodes=4, seed=13, expert=True, workers=1)
    r2 = eval_generalization(None, 4, episodes=4, seed=13, expert=True, workers=2)
    assert (r1.successes, r1.mean_steps) == (r2.successes, r2.mean_steps)


# --- composition harness ---------------------------------------------------------


def test_composition_runs_untrained_model():
    model = CPVModel("cpv", dim=8, seed=2)
    res = eval_composition(model, (1, 1), episodes=3, seed=17)
    assert res.episodes == 3
    assert res.condition == "1+1"
    assert 0.0 <= res.rate <= 1.0


def test_composition_empty_second_arm_self_test():
    model = CPVModel("cpv", dim=8, seed=2)
    res = eval_composition(model, (1, 0), episodes=3, seed=19)
    assert res.episodes == 3


def test_composition_naive_uses_averaging():
    model = CPVModel("naive", dim=8, seed=2)
    res = eval_composition(model, (1, 1), episodes=2, seed=23)
    assert res.episodes == 2


def test_composition_rejects_bad_arm():
    model = CPVModel("cpv", dim=8, seed=2)
    with pytest.raises(ValueError):
        eval_composition(model, (0, 1), episodes=1, seed=0)


# --- hom gap ----------------------------------------------------------------------


def test_hom_gap_zero_encoder_is_zero():
    ds = generate_dataset(seed=61, n_pairs=4, k_min=1, k_max=2, noise=0.0)
    model = CPVModel("cpv", dim=16, seed=0)
    for p in model.params():
        p.data[...] = 0
    assert hom_gap(model, ds.pairs, range(4)) == 0.0


def test_hom_gap_random_encoder_positive():
    ds = generate_dataset(seed=61, n_pairs=4, k_min=1, k_max=2, noise=0.0)
    model = CPVModel("cpv", dim=16, seed=3)
    assert hom_gap(model, ds.pairs, range(4)) > 0.0


# --- results csv --------------------------------------------------------------------


def test_write_results_csv(tmp_path):
    path = str(tmp_path / "r.csv")
    rows = [EvalResult("4-skills", 10, 7, 0.7, 42.5, seed=1, criterion="contain")]
    write_results_csv(path, rows)
    text = open(path).read()
    assert text.splitlines()[0] == "condition,episodes,successes,rate,mean_steps"
    assert "4-skills,10,7,0.7,42.5" in text
