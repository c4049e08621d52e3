"""Crafting grid-world, expert demonstrations, and one-shot imitation learning
with composable plan-vector embeddings."""

from .craftworld import Action, Cell, GridState, Skill, render, sample_env, step
from .model import CPVModel, LossWeights, Mode
from .planner import DemoPair, Dataset, Trajectory, generate_dataset, plan_task, sample_task

__version__ = "0.1.0"

__all__ = [
    "Action",
    "Cell",
    "GridState",
    "Skill",
    "render",
    "sample_env",
    "step",
    "CPVModel",
    "LossWeights",
    "Mode",
    "DemoPair",
    "Dataset",
    "Trajectory",
    "generate_dataset",
    "plan_task",
    "sample_task",
    "__version__",
]
