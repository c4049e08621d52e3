"""Search-based expert for the crafting world and demonstration generation.

The expert decomposes a task into its skills in list order. For each skill it
(1) drops a wrong tool on the nearest empty cell, (2) walks to and picks up the
required tool, (3) walks into the nearest target object to trigger the
transform. Navigation is BFS over agent positions; cells whose entry would fire
an unintended transform (bread always, logs while holding a hammer, wheat while
holding an axe) are treated as walls.

Action noise replaces the intended action with a uniformly random one at rate
`noise`, and the plan is recomputed from whatever state results. Failed
executions (unintended event, unreachable target, step cap) make the whole
trajectory invalid; plan_task resamples the environment with a derived seed.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .craftworld import (
    GRID_H,
    GRID_W,
    MOVE_DELTA,
    SKILL_TARGET,
    SKILL_TOOL,
    Action,
    Cell,
    GridState,
    Skill,
    render,
    sample_env,
    step,
)

DEFAULT_STEP_CAP = 100
DEFAULT_MAX_RETRIES = 50

_MOVE_ORDER = (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT)


class PlanningError(RuntimeError):
    """Raised when a task cannot be demonstrated within the retry budget."""


def sample_task(seed: int, k_min: int, k_max: int) -> list[Skill]:
    """Uniform task length in [k_min, k_max], skills i.i.d. with replacement."""
    if not 1 <= k_min <= k_max:
        raise ValueError(f"need 1 <= k_min <= k_max, got [{k_min}, {k_max}]")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(k_min, k_max + 1))
    return [Skill(int(s)) for s in rng.integers(0, len(Skill), size=k)]


def _safe_to_enter(cell: Cell, held) -> bool:
    # True when walking in is a plain move: no block, no transform fired.
    if cell in (Cell.EMPTY, Cell.HAMMER, Cell.AXE):
        return True
    if cell == Cell.LOGS:
        return held != Cell.HAMMER
    if cell == Cell.WHEAT:
        return held != Cell.AXE
    return False  # Tree, Rock, House block; Bread would be eaten


def shortest_path(state: GridState, goal, *, accept_current: bool = False):
    """BFS for a minimal move sequence whose final entry attempt hits a goal cell.

    `goal(r, c)` is a predicate over grid positions. Intermediate cells must be
    safe to walk through given the held object; the goal cell itself need not be
    (walking into it may trigger a transform). With accept_current, returns []
    when the agent already stands on a goal cell. Returns None when unreachable.
    Ties break by the fixed action order Up < Down < Left < Right.
    """
    if accept_current and goal(*state.agent):
        return []
    grid = state.grid
    held = state.held
    came: dict[tuple[int, int], tuple[tuple[int, int], Action]] = {}
    seen = {state.agent}
    queue = deque([state.agent])

    def backtrack(pos, last):
        path = [last]
        while pos != state.agent:
            pos, act = came[pos]
            path.append(act)
        path.reverse()
        return path

    while queue:
        pos = queue.popleft()
        for act in _MOVE_ORDER:
            dr, dc = MOVE_DELTA[act]
            nxt = (pos[0] + dr, pos[1] + dc)
            if not (0 <= nxt[0] < GRID_H and 0 <= nxt[1] < GRID_W):
                continue
            if goal(*nxt):
                return backtrack(pos, act)
            if nxt not in seen and _safe_to_enter(Cell(grid[nxt]), held):
                seen.add(nxt)
                came[nxt] = (pos, act)
                queue.append(nxt)
    return None


def _cell_goal(grid: np.ndarray, cell: Cell):
    return lambda r, c: Cell(grid[r, c]) == cell


def _next_action(state: GridState, skill: Skill):
    """Next expert action toward `skill` from `state`; None when stuck."""
    tool = SKILL_TOOL[skill]
    under = Cell(state.grid[state.agent])
    if tool is not None and state.held != tool:
        if state.held is not None:
            # wrong object in hand: shed it on the nearest empty cell
            if under == Cell.EMPTY:
                return Action.DROP
            path = shortest_path(state, _cell_goal(state.grid, Cell.EMPTY), accept_current=True)
        else:
            if under == tool:
                return Action.PICKUP
            path = shortest_path(state, _cell_goal(state.grid, tool), accept_current=True)
        return path[0] if path else None
    path = shortest_path(state, _cell_goal(state.grid, SKILL_TARGET[skill]))
    return path[0] if path else None


@dataclass
class PlanOutcome:
    actions: list[Action]
    events: list[Skill]
    states: list[GridState]


def plan_in_env(
    state: GridState,
    task: list[Skill],
    rng: np.random.Generator,
    noise: float,
    step_cap: int = DEFAULT_STEP_CAP,
):
    """Execute all skills of `task` from `state`; None if the attempt is invalid.

    Valid means every skill emitted exactly its own event (no unintended
    transforms, even from noise) within `step_cap` steps per skill.
    """
    actions: list[Action] = []
    events: list[Skill] = []
    states = [state]
    for skill in task:
        done = False
        for _ in range(step_cap):
            if noise > 0.0 and rng.random() < noise:
                act = Action(int(rng.integers(0, len(Action))))
            else:
                act = _next_action(state, skill)
                if act is None:
                    return None
            out = step(state, act)
            state = out.next_state
            actions.append(act)
            states.append(state)
            if out.events:
                if out.events != [skill]:
                    return None
                events.append(out.events[0])
                done = True
                break
        if not done:
            return None
    return PlanOutcome(actions, events, states)


def plan_skill(state: GridState, skill: Skill, seed: int, noise: float,
               step_cap: int = DEFAULT_STEP_CAP):
    """Plan and execute a single skill; (actions, final state) or None on failure."""
    out = plan_in_env(state, [skill], np.random.default_rng(seed), noise, step_cap)
    if out is None:
        return None
    return out.actions, out.states[-1]


@dataclass
class Trajectory:
    """One executed episode.

    Demonstrations carry every observation and action; references are trimmed
    to their first and last observations (actions dropped) before storage.
    Replaying `actions` from sample_env(start_state_seed, task) reproduces
    `observations` and `events` exactly.
    """

    observations: np.ndarray  # (n_steps + 1, 33, 30, 3) uint8, or (2, ...) for references
    actions: np.ndarray  # (n_steps,) uint8, empty for references
    events: list[Skill]
    start_state_seed: int
    n_steps: int

    def as_reference(self) -> "Trajectory":
        return Trajectory(
            observations=np.stack([self.observations[0], self.observations[-1]]),
            actions=np.zeros(0, dtype=np.uint8),
            events=list(self.events),
            start_state_seed=self.start_state_seed,
            n_steps=self.n_steps,
        )


@dataclass
class DemoPair:
    task: list[Skill]
    reference: Trajectory
    demo: Trajectory


@dataclass
class Dataset:
    pairs: list[DemoPair]
    seed: int
    k_min: int
    k_max: int
    noise: float

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)


def plan_task(
    seed: int,
    task: list[Skill],
    noise: float,
    step_cap: int = DEFAULT_STEP_CAP,
    max_retries: int = DEFAULT_MAX_RETRIES,
) -> Trajectory:
    """Demonstrate `task` in a freshly sampled environment, retrying on failure."""
    if len(task) == 0:
        raise ValueError("task must be nonempty")
    for attempt in range(max_retries):
        env_seed = seeding.derive_seed(seed, seeding.ENV, attempt)
        state0 = sample_env(env_seed, task)
        rng = seeding.rng_for(seed, attempt)
        out = plan_in_env(state0, task, rng, noise, step_cap)
        if out is not None:
            obs = np.stack([render(s) for s in out.states])
            return Trajectory(
                observations=obs,
                actions=np.array([int(a) for a in out.actions], dtype=np.uint8),
                events=out.events,
                start_state_seed=env_seed,
                n_steps=len(out.actions),
            )
    raise PlanningError(f"no successful demonstration after {max_retries} attempts (task={task})")


def _make_pair(args) -> DemoPair:
    seed, index, k_min, k_max, noise = args
    task = sample_task(seeding.derive_seed(seed, seeding.TASK, index), k_min, k_max)
    ref = plan_task(seeding.derive_seed(seed, seeding.REF, index), task, noise)
    demo = plan_task(seeding.derive_seed(seed, seeding.DEMO, index), task, noise)
    return DemoPair(task=task, reference=ref.as_reference(), demo=demo)


def generate_dataset(
    seed: int,
    n_pairs: int,
    k_min: int,
    k_max: int,
    noise: float,
    workers: int = 1,
) -> Dataset:
    """Paired demonstrations of shared tasks in independently sampled envs.

    Pair i depends only on (seed, i), so any worker count produces the
    identical dataset.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    jobs = [(seed, i, k_min, k_max, noise) for i in range(n_pairs)]
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(workers) as pool:
            pairs = pool.map(_make_pair, jobs, chunksize=max(1, n_pairs // (workers * 8)))
    else:
        pairs = [_make_pair(j) for j in jobs]
    return Dataset(pairs=pairs, seed=seed, k_min=k_min, k_max=k_max, noise=noise)
