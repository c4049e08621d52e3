"""Binary dataset file format and integrity checks.

Layout (all little-endian):

    magic "CPVD" | u32 version | u64 n_pairs | u8 k_min | u8 k_max | f32 noise | u64 seed
    per pair:
        u8 task_len | task_len x u8 skill ids
        reference:  u64 start_seed | u32 length | 2 observations (no actions)
        demo:       u64 start_seed | u32 length | length x u8 actions | length+1 observations

Observations are stored as raw uint8 RGB planes: three 33x30 row-major planes
(R, then G, then B) per observation. Writes go to a temp file and are renamed
into place, so interrupted runs never leave a parseable truncated file.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from . import seeding
from .craftworld import OBS_H, OBS_W, Action, Skill, render, sample_env, step
from .planner import Dataset, DemoPair, Trajectory

MAGIC = b"CPVD"
VERSION = 1
_OBS_BYTES = 3 * OBS_H * OBS_W


class DatasetFormatError(ValueError):
    pass


def _obs_to_planes(obs: np.ndarray) -> bytes:
    # (n, H, W, 3) uint8 -> channel-planar bytes
    return np.ascontiguousarray(obs.transpose(0, 3, 1, 2)).tobytes()


def _planes_to_obs(buf: bytes, n: int) -> np.ndarray:
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(n, 3, OBS_H, OBS_W)
    return arr.transpose(0, 2, 3, 1).copy()


def _write_trajectory(out, traj: Trajectory, is_reference: bool) -> None:
    out.append(struct.pack("<QI", traj.start_state_seed, traj.n_steps))
    if is_reference:
        if traj.observations.shape[0] != 2:
            raise DatasetFormatError("reference must carry exactly 2 observations")
    else:
        out.append(traj.actions.astype(np.uint8).tobytes())
        if traj.observations.shape[0] != traj.n_steps + 1:
            raise DatasetFormatError("demo observation count must be n_steps + 1")
    out.append(_obs_to_planes(traj.observations))


def save_dataset(dataset: Dataset, path: str) -> None:
    chunks = [
        MAGIC,
        struct.pack(
            "<IQBBfQ",
            VERSION,
            dataset.n_pairs,
            dataset.k_min,
            dataset.k_max,
            dataset.noise,
            dataset.seed,
        ),
    ]
    for pair in dataset.pairs:
        chunks.append(struct.pack("<B", len(pair.task)))
        chunks.append(bytes(int(s) for s in pair.task))
        _write_trajectory(chunks, pair.reference, is_reference=True)
        _write_trajectory(chunks, pair.demo, is_reference=False)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise DatasetFormatError("truncated dataset file")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_trajectory(r: _Reader, is_reference: bool, task: list[Skill]) -> Trajectory:
    start_seed, n_steps = r.unpack("<QI")
    if is_reference:
        actions = np.zeros(0, dtype=np.uint8)
        n_obs = 2
    else:
        actions = np.frombuffer(r.take(n_steps), dtype=np.uint8).copy()
        n_obs = n_steps + 1
    obs = _planes_to_obs(r.take(n_obs * _OBS_BYTES), n_obs)
    return Trajectory(
        observations=obs,
        actions=actions,
        events=list(task),
        start_state_seed=start_seed,
        n_steps=n_steps,
    )


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic, not a dataset file")
    version, n_pairs, k_min, k_max, noise, seed = r.unpack("<IQBBfQ")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    pairs = []
    for _ in range(n_pairs):
        (task_len,) = r.unpack("<B")
        task = [Skill(b) for b in r.take(task_len)]
        ref = _read_trajectory(r, True, task)
        demo = _read_trajectory(r, False, task)
        pairs.append(DemoPair(task=task, reference=ref, demo=demo))
    if r.off != len(r.blob):
        raise DatasetFormatError(f"{path}: {len(r.blob) - r.off} trailing bytes")
    return Dataset(pairs=pairs, seed=seed, k_min=k_min, k_max=k_max, noise=float(noise))


def split_indices(n_pairs: int, dataset_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """90/10 train/validation split, a pure function of the dataset seed."""
    perm = seeding.rng_for(dataset_seed, seeding.SPLIT).permutation(n_pairs)
    n_val = max(1, n_pairs // 10)
    return perm[:-n_val].copy(), perm[-n_val:].copy()


def replay_demo(pair: DemoPair) -> str | None:
    """Re-execute a demo from its seed; returns an error description or None."""
    state = sample_env(pair.demo.start_state_seed, pair.task)
    if not np.array_equal(render(state), pair.demo.observations[0]):
        return "initial observation mismatch"
    events: list[Skill] = []
    for t, a in enumerate(pair.demo.actions):
        out = step(state, Action(int(a)))
        state = out.next_state
        events.extend(out.events)
        if not np.array_equal(render(state), pair.demo.observations[t + 1]):
            return f"observation mismatch at step {t + 1}"
    if events != list(pair.task):
        return f"event sequence {events} != task {list(pair.task)}"
    return None


def replay_check(dataset: Dataset) -> list[tuple[int, str]]:
    """Replay every demo; list of (pair index, problem) for the ones that fail."""
    failures = []
    for i, pair in enumerate(dataset.pairs):
        try:
            err = replay_demo(pair)
        except Exception as exc:  # corrupt bytes can surface anywhere
            err = f"replay raised {type(exc).__name__}: {exc}"
        if err is not None:
            failures.append((i, err))
    return failures
