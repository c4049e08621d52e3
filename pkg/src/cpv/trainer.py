"""Minibatch training loop: sampling, optimization, metrics, checkpoints.

An epoch is ceil(total train-split demo timesteps / batch_size) Adam steps, so
one epoch visits the trainable (pair, timestep) population once in expectation.
Metrics are recomputed at each cadence on batches rebuilt from fixed derived
seeds, which keeps the CSV bitwise reproducible; wall-clock time goes to the
log only. Validation pairs are used for metrics and model selection, never for
gradients.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import seeding
from .checkpoint import save_checkpoint
from .dataset import load_dataset, split_indices
from .model import CPVModel, LossWeights, Mode, obs_to_input, total_loss, loss_report
from .nn import Adam

log = logging.getLogger("cpv.trainer")

METRIC_COLUMNS = (
    "epoch",
    "train_il",
    "train_hom",
    "train_pair",
    "train_total",
    "val_il",
    "val_hom",
    "val_pair",
    "val_total",
    "train_acc",
    "val_acc",
)
_EVAL_BATCHES = 8
_ACC_CAP = 4096


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dataset: str
    checkpoint: str
    metrics: str
    mode: str = "cpv"
    lambda_hom: float = 1.0
    lambda_pair: float = 1.0
    dim: int = 512
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        Mode(self.mode)  # reject unknown modes early
        for name in ("dim", "lr", "batch_size", "epochs", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        if self.lambda_hom < 0 or self.lambda_pair < 0:
            raise ValueError("loss weights must be >= 0")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            ftype = fields[key].type
            if ftype == "int":
                kwargs[key] = int(value)
            elif ftype == "float":
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        missing = {"dataset", "checkpoint", "metrics"} - kwargs.keys()
        if missing:
            raise ValueError(f"config missing required keys: {sorted(missing)}")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        with open(path) as f:
            return cls.from_text(f.read())


def make_batch(pairs, rng, batch_size: int, indices=None, dtype=np.float32) -> dict:
    """Sample (pair, timestep) tuples plus hom split points and negative indices.

    `neg[k]` is a batch position whose dataset pair differs from item k's
    (-1 when the batch contains a single distinct pair).
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    pool = np.arange(len(pairs)) if indices is None else np.asarray(indices)
    sel = pool[rng.integers(0, len(pool), size=batch_size)]
    ts = np.empty(batch_size, dtype=np.int64)
    splits = np.empty(batch_size, dtype=np.int64)
    for k, i in enumerate(sel):
        h = pairs[i].demo.n_steps
        ts[k] = rng.integers(0, h)
        splits[k] = rng.integers(1, h) if h >= 2 else 0
    neg = np.empty(batch_size, dtype=np.int64)
    for k in range(batch_size):
        cands = np.flatnonzero(sel != sel[k])
        neg[k] = cands[rng.integers(0, len(cands))] if len(cands) else -1

    def grab(getter):
        return obs_to_input(np.stack([getter(pairs[i], t) for i, t in zip(sel, ts)]), dtype)

    batch = {
        "ref0": grab(lambda p, t: p.reference.observations[0]),
        "refT": grab(lambda p, t: p.reference.observations[-1]),
        "demo0": grab(lambda p, t: p.demo.observations[0]),
        "demoT": grab(lambda p, t: p.demo.observations[-1]),
        "obs_t": grab(lambda p, t: p.demo.observations[t]),
        "action": np.array([pairs[i].demo.actions[t] for i, t in zip(sel, ts)], dtype=np.int64),
        "neg": neg,
        "pair": sel,
        "t": ts,
        "split": splits,
    }
    batch["split_obs"] = obs_to_input(
        np.stack([pairs[i].demo.observations[s] for i, s in zip(sel, splits)]), dtype
    )
    return batch


def _logits_for_items(model: CPVModel, pairs, items) -> np.ndarray:
    """Teacher-forced logits for explicit (pair index, timestep) items."""
    refs0, refsT, demos0, obs_t = [], [], [], []
    for i, t in items:
        p = pairs[i]
        refs0.append(p.reference.observations[0])
        refsT.append(p.reference.observations[-1])
        demos0.append(p.demo.observations[0])
        obs_t.append(p.demo.observations[t])
    dt = model.dtype
    ref0 = obs_to_input(np.stack(refs0), dt)
    refT = obs_to_input(np.stack(refsT), dt)
    demo0 = obs_to_input(np.stack(demos0), dt)
    o_t = obs_to_input(np.stack(obs_t), dt)
    if model.mode is Mode.NAIVE:
        context = (ref0, refT, demo0)
    elif model.mode is Mode.TE:
        context = model.embed(ref0, refT)
    else:
        context = (model.embed(ref0, refT), model.embed(demo0, o_t))
    return model.policy_logits(o_t, context).data


def teacher_forced_accuracy(model: CPVModel, pairs, indices, cap: int = _ACC_CAP) -> float:
    """Fraction of expert timesteps whose argmax logit equals the expert action."""
    items = [(int(i), t) for i in indices for t in range(pairs[i].demo.n_steps)]
    if len(items) > cap:
        stride = math.ceil(len(items) / cap)
        items = items[::stride][:cap]
    correct = 0
    for lo in range(0, len(items), 64):
        chunk = items[lo : lo + 64]
        logits = _logits_for_items(model, pairs, chunk)
        actions = np.array([pairs[i].demo.actions[t] for i, t in chunk])
        correct += int((logits.argmax(axis=1) == actions).sum())
    return correct / len(items)


def _eval_losses(model, pairs, indices, weights, batch_size, seed_key) -> dict:
    reports = []
    for b in range(_EVAL_BATCHES):
        rng = np.random.default_rng(seeding.derive_seed(*seed_key, b))
        batch = make_batch(pairs, rng, batch_size, indices, dtype=model.dtype)
        reports.append(loss_report(model, batch, weights))
    out = {}
    for key in ("il", "hom", "pair", "total"):
        vals = [r[key] for r in reports if not math.isnan(r[key])]
        out[key] = sum(vals) / len(vals) if vals else math.nan
    return out


def _fmt(v) -> str:
    return f"{v:.8g}" if isinstance(v, float) else str(v)


def _write_metrics(path: str, rows: list[dict]) -> None:
    text = ",".join(METRIC_COLUMNS) + "\n"
    for row in rows:
        text += ",".join(_fmt(row[c]) for c in METRIC_COLUMNS) + "\n"
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def best_checkpoint_path(path: str) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}.best{ext or '.cpvm'}"


@dataclass
class TrainResult:
    checkpoint: str
    best_checkpoint: str
    metrics: str
    rows: list[dict]


def train(config: TrainConfig) -> TrainResult:
    ds = load_dataset(config.dataset)
    train_idx, val_idx = split_indices(ds.n_pairs, ds.seed)
    log.info("dataset %s: %d pairs (%d train / %d val)",
             config.dataset, ds.n_pairs, len(train_idx), len(val_idx))
    model = CPVModel(config.mode, config.dim, seed=config.seed)
    weights = LossWeights(config.lambda_hom, config.lambda_pair)
    opt = Adam(model.params(), lr=config.lr, beta1=config.beta1, beta2=config.beta2,
               eps=config.adam_eps)
    batch_rng = seeding.rng_for(config.seed, seeding.BATCH)

    total_ts = int(sum(ds.pairs[i].demo.n_steps for i in train_idx))
    steps_per_epoch = max(1, math.ceil(total_ts / config.batch_size))
    log.info("training %s dim=%d: %d epochs x %d steps, lr=%g",
             config.mode, config.dim, config.epochs, steps_per_epoch, config.lr)

    rows: list[dict] = []
    best_val = math.inf
    best_path = best_checkpoint_path(config.checkpoint)
    for epoch in range(1, config.epochs + 1):
        t0 = time.monotonic()
        for step_i in range(steps_per_epoch):
            batch = make_batch(ds.pairs, batch_rng, config.batch_size, train_idx)
            loss, parts = total_loss(model, batch, weights)
            if not math.isfinite(parts["total"]):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step_i}: {parts}"
                )
            loss.backward()
            opt.step()
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            row = {"epoch": epoch}
            tr = _eval_losses(model, ds.pairs, train_idx, weights, config.batch_size,
                              (config.seed, seeding.EVAL_BATCH, 0))
            va = _eval_losses(model, ds.pairs, val_idx, weights, config.batch_size,
                              (config.seed, seeding.EVAL_BATCH, 1))
            for k, v in tr.items():
                row[f"train_{k}"] = v
            for k, v in va.items():
                row[f"val_{k}"] = v
            row["train_acc"] = teacher_forced_accuracy(model, ds.pairs, train_idx)
            row["val_acc"] = teacher_forced_accuracy(model, ds.pairs, val_idx)
            rows.append(row)
            _write_metrics(config.metrics, rows)
            if row["val_il"] < best_val:
                best_val = row["val_il"]
                save_checkpoint(best_path, model)
            log.info(
                "epoch %d: train il=%.4f acc=%.3f | val il=%.4f acc=%.3f (%.1fs)",
                epoch, row["train_il"], row["train_acc"],
                row["val_il"], row["val_acc"], time.monotonic() - t0,
            )
    save_checkpoint(config.checkpoint, model, opt)
    if not math.isfinite(best_val):
        save_checkpoint(best_path, model)
    return TrainResult(config.checkpoint, best_path, config.metrics, rows)
