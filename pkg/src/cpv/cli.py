"""Command-line entry point.

Subcommands: gen-data, train, eval, compose, grad-check, render, replay-check.
Every run echoes its resolved configuration first. Exit code 0 means the
operation fully succeeded; 1 an operational failure; 2 a usage error. Set
CPV_LOG={error|info|debug} to control log verbosity (stderr).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .craftworld import Skill, render, sample_env, write_ppm
from .dataset import load_dataset, replay_check, save_dataset
from .planner import generate_dataset

_SKILL_BY_NAME = {
    "choptree": Skill.CHOP_TREE,
    "breakrock": Skill.BREAK_ROCK,
    "buildhouse": Skill.BUILD_HOUSE,
    "makebread": Skill.MAKE_BREAD,
    "eatbread": Skill.EAT_BREAD,
}


def parse_task(text: str) -> list[Skill]:
    skills = []
    for name in text.split(","):
        key = name.strip().lower().replace("_", "")
        if key not in _SKILL_BY_NAME:
            raise ValueError(f"unknown skill {name!r}; choose from "
                             + ", ".join(sorted(_SKILL_BY_NAME)))
        skills.append(_SKILL_BY_NAME[key])
    return skills


def parse_arm(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"arm must be 'k1,k2', got {text!r}")
    return int(parts[0]), int(parts[1])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a paired demonstration dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--kmin", type=int, default=2)
    p.add_argument("--kmax", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval", help="success rate on n-skill tasks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--skills", type=int, choices=(4, 8, 16), required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--criterion", choices=("contain", "exact"), default="contain")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("compose", help="success when two references are combined")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arm", type=parse_arm, required=True, metavar="K1,K2")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--criterion", choices=("contain", "exact"), default="contain")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=120)

    p = sub.add_parser("render", help="dump a sampled start state as binary PPM")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--task", type=parse_task, default=[Skill.CHOP_TREE],
                   help="comma-separated skill names, e.g. ChopTree,EatBread")
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay-check", help="re-execute every stored demo and verify it")
    p.add_argument("--data", required=True)
    return parser


def _echo_config(args: argparse.Namespace) -> None:
    items = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    rendered = " ".join(f"{k}={v}" for k, v in items.items())
    print(f"config: command={args.command} {rendered}")


def _cmd_gen_data(args) -> int:
    ds = generate_dataset(args.seed, args.pairs, args.kmin, args.kmax,
                          args.noise, workers=args.workers)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n_pairs} pairs to {args.out} ({os.path.getsize(args.out)} bytes)")
    return 0


def _cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    config = TrainConfig.from_file(args.config)
    print("resolved train config:")
    print(config.to_text(), end="")
    result = train(config)
    last = result.rows[-1]
    print(f"final: epoch={last['epoch']} train_acc={last['train_acc']:.4f} "
          f"val_il={last['val_il']:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"best checkpoint: {result.best_checkpoint}")
    print(f"metrics: {result.metrics}")
    return 0


def _load_model(path: str):
    from .checkpoint import load_checkpoint

    model, _ = load_checkpoint(path)
    return model


def _cmd_eval(args) -> int:
    from .evalharness import eval_generalization, write_results_csv

    model = _load_model(args.checkpoint)
    result = eval_generalization(model, args.skills, args.episodes, args.seed,
                                 criterion=args.criterion, workers=args.workers)
    write_results_csv(args.out, [result])
    print(f"{result.condition}: {result.successes}/{result.episodes} "
          f"({100 * result.rate:.1f}%) -> {args.out}")
    return 0


def _cmd_compose(args) -> int:
    from .evalharness import eval_composition, write_results_csv

    model = _load_model(args.checkpoint)
    result = eval_composition(model, args.arm, args.episodes, args.seed,
                              criterion=args.criterion, workers=args.workers)
    write_results_csv(args.out, [result])
    print(f"{result.condition}: {result.successes}/{result.episodes} "
          f"({100 * result.rate:.1f}%) -> {args.out}")
    return 0


def _cmd_grad_check(args) -> int:
    from .checks import run_all

    errors = run_all(seed=args.seed, eps=args.eps, n_coords=args.coords)
    worst = 0.0
    for name, err in errors.items():
        print(f"{name}: max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"worst: {worst:.3e} (tolerance 1e-4)")
    return 0 if worst <= 1e-4 else 1


def _cmd_render(args) -> int:
    state = sample_env(args.seed, args.task)
    write_ppm(render(state), args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_replay_check(args) -> int:
    ds = load_dataset(args.data)
    failures = replay_check(ds)
    if ds.n_pairs == 0:
        print("warning: dataset contains 0 pairs")
    for idx, why in failures:
        print(f"pair {idx}: {why}")
    print(f"replay-check: {ds.n_pairs - len(failures)}/{ds.n_pairs} pairs pass")
    return 0 if not failures else 1


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "compose": _cmd_compose,
    "grad-check": _cmd_grad_check,
    "render": _cmd_render,
    "replay-check": _cmd_replay_check,
}


def main(argv=None) -> int:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("CPV_LOG", "info").lower(), logging.INFO
    )
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    _echo_config(args)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
