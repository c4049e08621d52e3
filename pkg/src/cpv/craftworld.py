"""Deterministic crafting grid-world.

A 10x10 grid of objects, an agent that can hold at most one tool, six actions
(four moves plus pickup/drop), and five skills triggered by walking into the
right object with the right tool:

    ChopTree:   axe    + tree  -> logs   (agent stays put)
    BreakRock:  hammer + rock  -> empty  (agent stays put)
    BuildHouse: hammer + logs  -> house  (agent stays put)
    MakeBread:  axe    + wheat -> bread  (agent stays put)
    EatBread:   anything + bread -> empty (agent walks in)

Transitions are pure functions of (state, action); there is no hidden state and
no randomness. Rendering is a fixed-palette 33x30 RGB image: the 30x30 grid at
3px per cell plus a 3px indicator strip whose left square turns white while an
object is held.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np

GRID_H = 10
GRID_W = 10
CELL_PX = 3
OBS_H = GRID_H * CELL_PX + CELL_PX  # 33: grid rows plus the held-indicator strip
OBS_W = GRID_W * CELL_PX  # 30


class Cell(IntEnum):
    EMPTY = 0
    TREE = 1
    ROCK = 2
    LOGS = 3
    WHEAT = 4
    BREAD = 5
    HAMMER = 6
    AXE = 7
    HOUSE = 8


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    PICKUP = 4
    DROP = 5


class Skill(IntEnum):
    CHOP_TREE = 0
    BREAK_ROCK = 1
    BUILD_HOUSE = 2
    MAKE_BREAD = 3
    EAT_BREAD = 4


BLOCKING = frozenset({Cell.TREE, Cell.ROCK, Cell.HOUSE})
PICKUPABLE = frozenset({Cell.LOGS, Cell.HAMMER, Cell.AXE})

MOVE_DELTA = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}

# 8-bit palette; any injective map works but this one is pinned for reproducibility.
PALETTE = np.array(
    [
        (0, 0, 0),  # Empty
        (0, 128, 0),  # Tree
        (128, 128, 128),  # Rock
        (139, 69, 19),  # Logs
        (218, 165, 32),  # Wheat
        (255, 220, 100),  # Bread
        (80, 80, 255),  # Hammer
        (200, 60, 60),  # Axe
        (255, 140, 0),  # House
    ],
    dtype=np.uint8,
)
AGENT_COLOR = np.array((255, 255, 255), dtype=np.uint8)
HELD_COLOR = np.array((255, 255, 255), dtype=np.uint8)


@dataclass(eq=False)
class GridState:
    """Full environment state: cell grid, agent position, held object."""

    grid: np.ndarray  # (GRID_H, GRID_W) uint8 of Cell values
    agent: tuple[int, int]
    held: Optional[Cell] = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.uint8)
        assert self.grid.shape == (GRID_H, GRID_W)
        r, c = self.agent
        assert 0 <= r < GRID_H and 0 <= c < GRID_W
        assert Cell(self.grid[r, c]) not in BLOCKING

    def copy(self) -> "GridState":
        return GridState(self.grid.copy(), self.agent, self.held)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GridState):
            return NotImplemented
        return (
            self.agent == other.agent
            and self.held == other.held
            and np.array_equal(self.grid, other.grid)
        )


@dataclass
class StepOutcome:
    next_state: GridState
    events: list[Skill]


def step(state: GridState, action: Action) -> StepOutcome:
    """Apply one action. Total: invalid moves and pickups are no-ops, never errors."""
    action = Action(action)
    grid = state.grid.copy()
    agent = state.agent
    held = state.held
    events: list[Skill] = []

    if action in MOVE_DELTA:
        dr, dc = MOVE_DELTA[action]
        tr, tc = agent[0] + dr, agent[1] + dc
        if 0 <= tr < GRID_H and 0 <= tc < GRID_W:
            tgt = Cell(grid[tr, tc])
            if tgt == Cell.TREE:
                if held == Cell.AXE:
                    grid[tr, tc] = Cell.LOGS
                    events.append(Skill.CHOP_TREE)
            elif tgt == Cell.ROCK:
                if held == Cell.HAMMER:
                    grid[tr, tc] = Cell.EMPTY
                    events.append(Skill.BREAK_ROCK)
            elif tgt == Cell.HOUSE:
                pass  # terminal product, blocks forever
            elif tgt == Cell.LOGS and held == Cell.HAMMER:
                grid[tr, tc] = Cell.HOUSE
                events.append(Skill.BUILD_HOUSE)
            elif tgt == Cell.WHEAT and held == Cell.AXE:
                grid[tr, tc] = Cell.BREAD
                events.append(Skill.MAKE_BREAD)
            elif tgt == Cell.BREAD:
                grid[tr, tc] = Cell.EMPTY
                events.append(Skill.EAT_BREAD)
                agent = (tr, tc)
            else:
                agent = (tr, tc)  # plain move onto a passable cell
    elif action == Action.PICKUP:
        under = Cell(grid[agent])
        if held is None and under in PICKUPABLE:
            held = under
            grid[agent] = Cell.EMPTY
    else:  # DROP
        if held is not None and Cell(grid[agent]) == Cell.EMPTY:
            grid[agent] = held
            held = None

    return StepOutcome(GridState(grid, agent, held), events)


def render(state: GridState) -> np.ndarray:
    """Render to a (33, 30, 3) uint8 RGB image; pure function of the state."""
    img = np.zeros((OBS_H, OBS_W, 3), dtype=np.uint8)
    cells = PALETTE[state.grid]  # (10, 10, 3)
    img[: GRID_H * CELL_PX] = np.repeat(np.repeat(cells, CELL_PX, axis=0), CELL_PX, axis=1)
    r, c = state.agent
    img[r * CELL_PX + 1, c * CELL_PX + 1] = AGENT_COLOR  # center pixel of the agent cell
    if state.held is not None:
        img[GRID_H * CELL_PX :, :CELL_PX] = HELD_COLOR
    return img


@dataclass
class ObjectCounts:
    counts: dict[Cell, int]
    held: Optional[Cell]

    def __getitem__(self, cell: Cell) -> int:
        return self.counts[cell]


def count_objects(state: GridState) -> ObjectCounts:
    bins = np.bincount(state.grid.ravel(), minlength=len(Cell))
    return ObjectCounts({cell: int(bins[cell]) for cell in Cell}, state.held)


# Objects a task consumes, per skill, plus the tool it needs on the grid.
SKILL_TARGET = {
    Skill.CHOP_TREE: Cell.TREE,
    Skill.BREAK_ROCK: Cell.ROCK,
    Skill.BUILD_HOUSE: Cell.LOGS,
    Skill.MAKE_BREAD: Cell.WHEAT,
    Skill.EAT_BREAD: Cell.BREAD,
}
SKILL_TOOL = {
    Skill.CHOP_TREE: Cell.AXE,
    Skill.BREAK_ROCK: Cell.HAMMER,
    Skill.BUILD_HOUSE: Cell.HAMMER,
    Skill.MAKE_BREAD: Cell.AXE,
    Skill.EAT_BREAD: None,
}

_SAMPLEABLE = (Cell.TREE, Cell.ROCK, Cell.LOGS, Cell.WHEAT, Cell.BREAD, Cell.HAMMER, Cell.AXE)


def required_objects(task: list[Skill]) -> dict[Cell, int]:
    """Object counts that make every skill in `task` doable without chaining."""
    need: dict[Cell, int] = {cell: 0 for cell in _SAMPLEABLE}
    for skill in task:
        need[SKILL_TARGET[Skill(skill)]] += 1
    tools = {SKILL_TOOL[Skill(s)] for s in task} - {None}
    for tool in tools:
        need[tool] = max(need[tool], 1)
    return need


def sample_env(seed: int, task: list[Skill]) -> GridState:
    """Sample a start state where `task` is feasible, fully determined by `seed`.

    Places the required objects plus 0-2 random extras of each object type on
    distinct cells, and the agent on a free cell. Raises ValueError when the
    task needs more objects than the grid has cells.
    """
    if len(task) < 1:
        raise ValueError("task must contain at least one skill")
    rng = np.random.default_rng(seed)
    need = required_objects(task)
    objects: list[Cell] = []
    for cell in _SAMPLEABLE:
        objects.extend([cell] * (need[cell] + int(rng.integers(0, 3))))
    if len(objects) + 1 > GRID_H * GRID_W:
        raise ValueError(
            f"task needs {len(objects)} objects but the grid has {GRID_H * GRID_W} cells"
        )
    spots = rng.choice(GRID_H * GRID_W, size=len(objects) + 1, replace=False)
    grid = np.zeros((GRID_H, GRID_W), dtype=np.uint8)
    for obj, flat in zip(objects, spots[:-1]):
        grid[flat // GRID_W, flat % GRID_W] = obj
    agent = (int(spots[-1]) // GRID_W, int(spots[-1]) % GRID_W)
    return GridState(grid, agent, None)


def write_ppm(img: np.ndarray, path: str) -> None:
    """Binary PPM (P6) dump of a rendered observation; written atomically."""
    import os

    h, w, _ = img.shape
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.astype(np.uint8).tobytes())
    os.replace(tmp, path)
