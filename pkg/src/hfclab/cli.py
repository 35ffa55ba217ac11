"""
Command-line entry point: ``hfclab <command> [--config PATH] [--seed N] [--force] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 precondition or degenerate-data error.
"""
import argparse
import json
import logging
import sys

from . import experiments as E
from .errors import ConfigError, DegenerateDataError, MissingPairError, NotPDError, PreconditionError, ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION = 0, 2, 3

COMMANDS = {
    "train": ("train the classifier, build the splits, report clean accuracy / AUC", E.cmd_train),
    "attack": ("run the attack grid on AdvTest (add --hfc for the constrained variant)", None),
    "detect": ("fit detectors on AdvTrain, score every attack with and without HFC", E.cmd_detect),
    "stress": ("push each hidden layer's mean activation up and down", E.cmd_stress),
    "sweep": ("detector AUC of BIM with / without HFC over the sweep budgets", E.cmd_sweep),
    "baselines": ("adaptive baselines next to HFC at the potent budget", E.cmd_baselines),
    "semiwhitebox": ("AEs crafted on a shadow model, scored on the victim", E.cmd_semiwhitebox),
    "project": ("2-D PCA of penultimate features for clean and adversarial inputs", E.cmd_project),
    "report": ("collect the CSV outputs of a run directory into report.txt", None),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON configuration (overrides the defaults)")
    common.add_argument("--seed", type=int, metavar="N", help="set every seed to N (shadow training uses N + 1)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--out", metavar="DIR", default="runs/default", help="run directory (default: runs/default)")
    common.add_argument("--workers", type=int, metavar="W", help="attack worker processes (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="hfclab", description="Feature-space camouflage of adversarial examples, desk scale.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (help_, _) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        if name == "attack":
            sp.add_argument("--hfc", action="store_true", help="add the hierarchical feature constraint")
    sub.add_parser("show-config", parents=[common], help="print the effective configuration as JSON")
    return p


def load_config(args):
    cfg = E.ExperimentConfig.from_file(args.config) if args.config else E.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.workers is not None:
        cfg = cfg.with_overrides({"runtime": {"workers": args.workers}})
    return cfg


def run(args):
    if args.command == "report":
        return E.cmd_report(args.out, force=args.force)
    cfg = load_config(args)
    if args.command == "show-config":
        print(json.dumps({"config_hash": cfg.hash, "config": cfg.to_dict()}, indent=1))
        return []
    pipe = E.Pipeline(cfg, args.out, force=args.force)
    if args.command == "attack":
        return E.cmd_attack(pipe, with_hfc=args.hfc)
    return COMMANDS[args.command][1](pipe)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        for path in run(args):
            print(path)
    except (ConfigError, ShapeError) as exc:
        print(f"hfclab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PreconditionError, DegenerateDataError, MissingPairError, NotPDError) as exc:
        print(f"hfclab: cannot proceed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
