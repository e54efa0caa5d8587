"""``idcap`` command line.

Exit codes: 0 success, 2 bad config or arguments, 3 a required artifact
(dataset, checkpoint) is missing, 4 numerical divergence.
"""

import argparse
import logging
import sys

from . import experiments as E
from .baselines import eval_workers
from .models import TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4

COMMANDS = ("gen-data", "train", "evaluate", "degrade-sweep", "data-efficiency", "ood",
            "ablate-no-identity", "recalibrate")


def build_parser():
    p = argparse.ArgumentParser(prog="idcap", description="Identity-cap uncertainty toy experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="INI experiment config")
        s.add_argument("--seed", type=int, default=None, help="override the config's master seed")
        s.add_argument("--out", default=None, help="override the config's output directory")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            s.add_argument("--role", default="all", choices=E.ROLES + ("all",))
        if name == "evaluate":
            s.add_argument("--split", default=None, choices=("train", "val", "test"))
        if name == "recalibrate":
            s.add_argument("--model", default="all", choices=("scratch-gauss", "scratch-ggd", "cap", "all"))
    return p


def run(args):
    cfg = E.load_config(args.config, args.seed, args.out)
    try:
        eval_workers()
    except ValueError as exc:
        raise E.ConfigError(str(exc)) from None
    cmd = args.command
    if cmd == "gen-data":
        E.cmd_gen_data(cfg)
    elif cmd == "train":
        E.cmd_train(cfg, args.role)
    elif cmd == "evaluate":
        E.cmd_evaluate(cfg, args.split)
    elif cmd == "degrade-sweep":
        E.cmd_degrade_sweep(cfg)
    elif cmd == "data-efficiency":
        E.cmd_data_efficiency(cfg)
    elif cmd == "ood":
        res = E.cmd_ood(cfg)
        for (det, comp), v in res.auroc.items():
            if comp == "A-vs-BC":
                print(f"AUROC {det}: {v:.4f}")
    elif cmd == "ablate-no-identity":
        E.cmd_ablate_no_identity(cfg)
    elif cmd == "recalibrate":
        E.cmd_recalibrate(cfg, args.model)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except E.ConfigError as exc:
        print(f"idcap: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except E.MissingArtifact as exc:
        print(f"idcap: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"idcap: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
