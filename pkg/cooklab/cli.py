"""Command-line interface for the dough manipulation toolkit."""

import argparse
import logging
import sys

from .bench import SUITES
from .errors import CookLabError
from .main import CookLab
from .tasks import TASKS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cooklab",
        description="Learned dough manipulation: simulate, train, plan and evaluate",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Record press episodes (90 x 3 by default) and train its dynamics
  cooklab gen-data --tool press_circle
  cooklab train-dynamics --data data/press_circle

  # Policy from synthetic triples rolled out by the dynamics model
  cooklab train-policy --data data/press_circle --dynamics models/dyn_press_circle.ckpt

  # Tool classifier over several datasets
  cooklab train-toolsel --data data/press_circle data/gripper_two_rod

  # Scripted task, then closed-loop planning toward its subgoals
  cooklab gen-task press_grip --seed 3 --out runs/tasks/pg3
  cooklab plan --task runs/tasks/pg3 --planner cem --out runs/pg3_cem

  # Metrics between two clouds, timings
  cooklab eval --pair a.ply b.ply
  cooklab bench --suite emd --suite neighbors

Exit codes: 0 success, 2 usage error, 3 data/format error,
4 plan INCOMPLETE, 1 unexpected error.
        """
    )

    parser.add_argument(
        "-c", "--config",
        default="config.yaml",
        help="Configuration file (default: config.yaml)"
    )
    parser.add_argument(
        "-v", "--verbose",
        action="store_true",
        help="Debug logging"
    )
    parser.add_argument(
        "--version",
        action="version",
        version="%(prog)s 0.1.0"
    )

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Record random-action episodes of one tool")
    p.add_argument("--tool", required=True, help="Tool id")
    p.add_argument("--episodes", type=int, help="Episodes (default per tool type)")
    p.add_argument("--seq-per-episode", type=int, help="Sequences per episode (default per tool type)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="Dataset directory (default: <data_dir>/<tool>)")
    p.add_argument("--force", action="store_true", help="Overwrite an existing output")

    for name, helptext in (
        ("train-dynamics", "Train a dynamics model"),
        ("train-policy", "Train a multi-bin policy"),
        ("train-toolsel", "Train the tool classifier"),
    ):
        p = sub.add_parser(name, help=helptext)
        if name == "train-toolsel":
            p.add_argument("--data", nargs="+", required=True, help="Dataset directories, one per tool")
        else:
            p.add_argument("--data", required=name == "train-dynamics", help="Dataset directory")
        if name == "train-policy":
            p.add_argument("--dynamics", help="Dynamics checkpoint used to synthesize triples")
            p.add_argument("--triples", help="Existing triples file (skips synthesis)")
        p.add_argument("--out", help="Checkpoint path (default under models_dir)")
        p.add_argument("--seed", type=int)
        p.add_argument("--resume", action="store_true", help="Continue from the checkpoint at --out")
        p.add_argument("--force", action="store_true", help="Overwrite an existing checkpoint")

    p = sub.add_parser("plan", help="Closed-loop planning in a fresh simulated world")
    p.add_argument("--task", help="Task directory written by gen-task")
    p.add_argument("--target", help="Final target PLY")
    p.add_argument("--subgoals", nargs="*", help="Intermediate subgoal PLYs, in order")
    p.add_argument("--planner", choices=["policy", "cem", "gd", "random"], help="Action synthesis (default from config)")
    p.add_argument("--models", help="Models directory (default: models_dir)")
    p.add_argument("--out", help="Run directory (default: <runs_dir>/plan)")
    p.add_argument("--seed", type=int)
    p.add_argument("--perturb-after", type=int, help="Deform the dough after this many actions")
    p.add_argument("--perturb-kind", default="squash", choices=["squash", "bulge"])
    p.add_argument("--force", action="store_true", help="Overwrite an existing run directory")

    p = sub.add_parser("eval", help="Metric report for a trace or a pair of PLYs")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--trace", help="trace.jsonl of a planning run")
    group.add_argument("--pair", nargs=2, metavar=("A", "B"), help="Two PLY files")
    p.add_argument("--out", help="Report JSON path")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("bench", help="Median-of-10 timings as CSV")
    p.add_argument("--suite", action="append", choices=list(SUITES), help="Suite to run (repeatable; default all)")
    p.add_argument("--out", help="CSV path")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-task", help="Record a scripted task's subgoals")
    p.add_argument("name", choices=sorted(TASKS))
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float, help="Per-stage satisfaction threshold")
    p.add_argument("--out", help="Task directory")
    p.add_argument("--force", action="store_true")

    return parser


def main(argv=None):
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    # Initialize orchestrator
    try:
        lab = CookLab(config_path=args.config)
    except CookLabError as e:
        print(f"Error initializing: {e}", file=sys.stderr)
        return e.exit_code

    if args.command == "gen-data":
        result = lab.gen_data(args.tool, args.episodes, args.seq_per_episode, args.seed, args.out, args.force)
    elif args.command == "train-dynamics":
        result = lab.train_dynamics(args.data, args.out, args.seed, args.resume, args.force)
    elif args.command == "train-policy":
        result = lab.train_policy(args.data, args.dynamics, args.triples, args.out, args.seed, args.resume, args.force)
    elif args.command == "train-toolsel":
        result = lab.train_toolsel(args.data, args.out, args.seed, args.resume, args.force)
    elif args.command == "plan":
        result = lab.plan(
            task=args.task,
            target=args.target,
            subgoals=args.subgoals,
            planner=args.planner,
            models=args.models,
            out=args.out,
            seed=args.seed,
            perturb_after=args.perturb_after,
            perturb_kind=args.perturb_kind,
            force=args.force,
        )
    elif args.command == "eval":
        result = lab.eval(trace=args.trace, pair=args.pair, out=args.out, seed=args.seed)
    elif args.command == "bench":
        result = lab.bench(args.suite or SUITES, args.out, args.seed)
    else:
        result = lab.gen_task(args.name, args.seed, args.out, args.epsilon, args.force)

    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
