"""Command-line entry point: ``aejoint {synth,mix,train,eval,report,all}``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from . import runner
from .errors import AEJointError
from .strategies import STRATEGIES
from .tasks import TASKS

log = logging.getLogger("aejoint")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML experiment config (defaults are used without one)")
    common.add_argument("--seed", type=int, metavar="N", help="run a single seed instead of the configured list")
    common.add_argument("--task", choices=sorted(TASKS), help="override the configured task")
    common.add_argument("--strategy", choices=STRATEGIES, metavar="NAME",
                        help=f"restrict to one strategy ({', '.join(STRATEGIES)})")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    common.add_argument("--device", choices=("cpu", "accelerator"), default="cpu")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="aejoint", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, text in (
        ("synth", "render or index the clean and interference corpora"),
        ("mix", "write the fixed-SNR evaluation mixture listing"),
        ("train", "train the configured strategies for each seed"),
        ("eval", "score checkpoints on the SNR grid"),
        ("report", "render the results table from the stored grid"),
        ("all", "synth, mix, train, eval and report in one go"),
    ):
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _run(args) -> int:
    cfg = runner.load_config(args.config, task=args.task, seed=args.seed, strategy=args.strategy,
                             output_dir=args.out)
    device = runner.select_device(args.device)
    out = runner.resolve_output_dir(cfg)
    if args.command == "synth":
        clean, noise = runner.synth(cfg, out)
        print(f"clean corpus: {len(clean)} items, noise corpus: {len(noise)} items under {out / 'corpus'}")
    elif args.command == "mix":
        print(runner.mix(cfg, out))
    elif args.command == "train":
        for strategy in cfg.strategies:
            for seed in cfg.seeds:
                print(runner.train(cfg, out, strategy, seed, device))
    elif args.command == "eval":
        runner.evaluate_checkpoints(cfg, out, device=device)
        print(runner.grid_path(out))
    elif args.command == "report":
        path = runner.report(out)
        sys.stdout.write(path.read_text(encoding="utf-8"))
    else:
        outcome = runner.run_experiment(cfg, args.device)
        sys.stdout.write((outcome.output_dir / "results" / "results.txt").read_text(encoding="utf-8"))
        return outcome.exit_code
    return runner.EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _run(args)
    except AEJointError as exc:
        print(f"aejoint {args.command}: error: {exc}", file=sys.stderr)
        return runner.exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
