"""Closed-loop evaluation: rollouts, success scoring, generalization, composition.

Episodes are independent and all randomness derives from (seed, episode index),
so results are identical for any worker count. Agent environments are sampled
with rejection until the expert can finish the task from that start within the
horizon; failures then reflect the policy, not impossible worlds. The expert
itself can be run through the same scoring path as an upper-bound sanity check.

Composition conditions the policy on the sum of two references' plan vectors
(cpv/te) or on the element-wise average of their observations (naive).
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import seeding
from .craftworld import Action, GridState, Skill, render, sample_env, step
from .model import CPVModel, Mode, obs_to_input
from .planner import PlanningError, plan_in_env, plan_task, sample_task

HORIZONS = {4: 160, 8: 280, 16: 550}
PROBE_EPISODES = 200
_PROBE_ROOT = 51966  # fixed root so probe-derived horizons are global constants
_ENV_ATTEMPTS = 50

_horizon_cache: dict[int, int] = {}


def expert_steps_probe(n_skills: int, episodes: int = PROBE_EPISODES) -> float:
    """Mean expert demonstration length for tasks of `n_skills` skills."""
    total = 0
    for ep in range(episodes):
        task = sample_task(seeding.derive_seed(_PROBE_ROOT, n_skills, ep, 0), n_skills, n_skills)
        total += plan_task(seeding.derive_seed(_PROBE_ROOT, n_skills, ep, 1), task, 0.0).n_steps
    return total / episodes


def horizon_for(n_skills: int) -> int:
    """160/280/550 for 4/8/16 skills; 3x mean expert steps otherwise."""
    if n_skills in HORIZONS:
        return HORIZONS[n_skills]
    if n_skills not in _horizon_cache:
        _horizon_cache[n_skills] = math.ceil(3.0 * expert_steps_probe(n_skills))
    return _horizon_cache[n_skills]


def score(events, task, criterion: str = "contain") -> bool:
    """Success of emitted `events` against `task`, both as multisets."""
    have, want = Counter(events), Counter(task)
    if criterion == "contain":
        return all(have[s] >= c for s, c in want.items())
    if criterion == "exact":
        return have == want
    raise ValueError(f"unknown criterion {criterion!r} (use 'contain' or 'exact')")


@dataclass
class RolloutResult:
    events: list[Skill]
    steps: int
    final_state: GridState


def rollout(model: CPVModel, state0: GridState, context, horizon: int,
            task=None, criterion: str = "contain") -> RolloutResult:
    """Greedy closed-loop episode from state0.

    context: summed reference plan vector (1, D) for cpv/te; a pair of
    (averaged) reference observations as float (1, 3, H, W) arrays for naive.
    Stops at the horizon, or earlier once `task` already scores successful.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    o0 = obs_to_input(render(state0), model.dtype)
    state = state0
    events: list[Skill] = []
    steps = 0
    for _ in range(horizon):
        obs = obs_to_input(render(state), model.dtype)
        if model.mode is Mode.NAIVE:
            ref0, ref_t = context
            logits = model.policy_logits(obs, (ref0, ref_t, o0))
        elif model.mode is Mode.TE:
            logits = model.policy_logits(obs, np.asarray(context))
        else:
            v_prog = model.embed(o0, obs).data
            logits = model.policy_logits(obs, (np.asarray(context), v_prog))
        action = Action(int(logits.data.argmax()))
        out = step(state, action)
        state = out.next_state
        events.extend(out.events)
        steps += 1
        if task is not None and score(events, task, criterion):
            break
    return RolloutResult(events, steps, state)


def reference_context(model: CPVModel, refs: list) -> object:
    """Rollout context from one or more reference trajectories.

    Multiple references mean composition: plan vectors are summed; for the
    naive model the references' observations are averaged instead.
    """
    if model.mode is Mode.NAIVE:
        first = np.mean([obs_to_input(r.observations[0], model.dtype) for r in refs], axis=0)
        last = np.mean([obs_to_input(r.observations[-1], model.dtype) for r in refs], axis=0)
        return (first.astype(model.dtype), last.astype(model.dtype))
    total = None
    for r in refs:
        v = model.embed(
            obs_to_input(r.observations[0], model.dtype),
            obs_to_input(r.observations[-1], model.dtype),
        ).data
        total = v if total is None else total + v
    return total


def _solvable_env(key: tuple, task, horizon: int):
    """Env where the expert finishes `task` within `horizon`; rejection-sampled."""
    for attempt in range(_ENV_ATTEMPTS):
        env_seed = seeding.derive_seed(*key, attempt, 0)
        state0 = sample_env(env_seed, task)
        out = plan_in_env(state0, task, seeding.rng_for(*key, attempt, 1), 0.0)
        if out is not None and len(out.actions) <= horizon:
            return state0, out.actions
    raise PlanningError(f"no expert-solvable environment for task {task}")


def _replay_scored(state0, actions, horizon, task, criterion):
    state = state0
    events: list[Skill] = []
    steps = 0
    for a in actions[:horizon]:
        out = step(state, a)
        state = out.next_state
        events.extend(out.events)
        steps += 1
        if score(events, task, criterion):
            break
    return events, steps


def _gen_episode(model, skill_count, horizon, seed, ep, criterion, expert):
    task = sample_task(seeding.derive_seed(seed, seeding.EPISODE, ep, 0), skill_count, skill_count)
    state0, expert_actions = _solvable_env((seed, seeding.EPISODE, ep, 2), task, horizon)
    if expert:
        events, steps = _replay_scored(state0, expert_actions, horizon, task, criterion)
        return score(events, task, criterion), steps
    ref = plan_task(seeding.derive_seed(seed, seeding.EPISODE, ep, 1), task, 0.0)
    context = reference_context(model, [ref])
    rr = rollout(model, state0, context, horizon, task, criterion)
    return score(rr.events, task, criterion), rr.steps


def _comp_episode(model, k1, k2, horizon, seed, ep, criterion):
    task_i = sample_task(seeding.derive_seed(seed, seeding.EPISODE, ep, 0), k1, k1)
    ref_i = plan_task(seeding.derive_seed(seed, seeding.EPISODE, ep, 1), task_i, 0.0)
    refs = [ref_i]
    task_j: list[Skill] = []
    if k2 > 0:
        task_j = sample_task(seeding.derive_seed(seed, seeding.EPISODE, ep, 2), k2, k2)
        refs.append(plan_task(seeding.derive_seed(seed, seeding.EPISODE, ep, 3), task_j, 0.0))
    else:
        # harness self-test arm: an empty second reference, v = g(o, o)
        if model.mode is Mode.NAIVE:
            raise ValueError("empty-arm self-test needs an encoder")
        o = ref_i.observations[0]
        empty = type(ref_i)(
            observations=np.stack([o, o]), actions=np.zeros(0, np.uint8),
            events=[], start_state_seed=0, n_steps=0,
        )
        refs.append(empty)
    union = list(task_i) + list(task_j)
    state0, _ = _solvable_env((seed, seeding.EPISODE, ep, 4), union, horizon)
    context = reference_context(model, refs)
    rr = rollout(model, state0, context, horizon, union, criterion)
    return score(rr.events, union, criterion), rr.steps


@dataclass
class EvalResult:
    condition: str
    episodes: int
    successes: int
    rate: float
    mean_steps: float
    seed: int
    criterion: str


_WORKER_MODEL = None


def _init_worker(model):
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _gen_job(args):
    return _gen_episode(_WORKER_MODEL, *args)


def _comp_job(args):
    return _comp_episode(_WORKER_MODEL, *args)


def _run_jobs(model, jobs, job_fn, inline_fn, workers: int):
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(workers, initializer=_init_worker,
                                         initargs=(model,)) as pool:
            return pool.map(job_fn, jobs)
    return [inline_fn(model, *j) for j in jobs]


def _summarize(condition, outcomes, seed, criterion) -> EvalResult:
    successes = sum(1 for ok, _ in outcomes if ok)
    steps = [s for ok, s in outcomes if ok]
    return EvalResult(
        condition=condition,
        episodes=len(outcomes),
        successes=successes,
        rate=successes / len(outcomes) if outcomes else 0.0,
        mean_steps=float(np.mean(steps)) if steps else math.nan,
        seed=seed,
        criterion=criterion,
    )


def eval_generalization(model, skill_count: int, episodes: int, seed: int,
                        criterion: str = "contain", expert: bool = False,
                        workers: int = 1) -> EvalResult:
    """Success rate on freshly sampled tasks of a fixed skill count."""
    horizon = horizon_for(skill_count)
    jobs = [(skill_count, horizon, seed, ep, criterion, expert) for ep in range(episodes)]
    outcomes = _run_jobs(model, jobs, _gen_job, _gen_episode, workers)
    label = f"{skill_count}-skills" + ("-expert" if expert else "")
    return _summarize(label, outcomes, seed, criterion)


def eval_composition(model, arm: tuple[int, int], episodes: int, seed: int,
                     criterion: str = "contain", workers: int = 1) -> EvalResult:
    """Success on the union of two tasks, conditioning on combined references."""
    k1, k2 = arm
    if k1 < 1 or k2 < 0:
        raise ValueError(f"bad composition arm {arm}")
    horizon = horizon_for(k1 + k2)
    jobs = [(k1, k2, horizon, seed, ep, criterion) for ep in range(episodes)]
    outcomes = _run_jobs(model, jobs, _comp_job, _comp_episode, workers)
    return _summarize(f"{k1}+{k2}", outcomes, seed, criterion)


def hom_gap(model: CPVModel, pairs, indices, seed: int = 0) -> float:
    """Mean ||g(o_0,o_t) + g(o_t,o_T) - g(o_0,o_T)||_2 over demos, random split t."""
    rng = seeding.rng_for(seed, seeding.PROBE)
    items = []
    for i in indices:
        h = pairs[i].demo.n_steps
        items.append((int(i), int(rng.integers(1, h)) if h >= 2 else 0))
    residuals = []
    for lo in range(0, len(items), 64):
        chunk = items[lo : lo + 64]
        dt = model.dtype
        o0 = obs_to_input(np.stack([pairs[i].demo.observations[0] for i, _ in chunk]), dt)
        ot = obs_to_input(np.stack([pairs[i].demo.observations[t] for i, t in chunk]), dt)
        oT = obs_to_input(np.stack([pairs[i].demo.observations[-1] for i, _ in chunk]), dt)
        first = model.embed(o0, ot).data
        second = model.embed(ot, oT).data
        whole = model.embed(o0, oT).data
        residuals.extend(np.linalg.norm(first + second - whole, axis=1).tolist())
    return float(np.mean(residuals))


def write_results_csv(path: str, results: list[EvalResult]) -> None:
    import os

    text = "condition,episodes,successes,rate,mean_steps\n"
    for r in results:
        text += f"{r.condition},{r.episodes},{r.successes},{r.rate:.8g},{r.mean_steps:.8g}\n"
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)
