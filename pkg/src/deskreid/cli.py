"""Command-line interface.

Subcommands: train, eval, ablate, export-ranking, gen-synthetic.  Config
values come from (in rising precedence) built-in defaults, a named preset,
a config file, and repeated ``--set section.key=value`` flags.  On failure
the process exits nonzero after printing a single machine-readable
``ERROR {...}`` line to stderr.
"""

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .data import ImageFormatError, ManifestError
from .harness import (TrainingDiverged, export_ranking, run_ablation,
                      ablation_table, run_evaluation, run_training)
from .rten import TensorFileError
from .synthetic import generate_dataset


def _add_config_args(sub):
    sub.add_argument("--config", help="config file (sectioned key=value)")
    sub.add_argument("--preset", help="preset name: desk or paper")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="SECTION.KEY=VALUE", help="override one config key")


def _config_from(args):
    return load_config(path=args.config, preset=args.preset, overrides=args.overrides)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deskreid",
        description="Train, evaluate, and ablate a small re-identification baseline.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train", help="train a model and write checkpoints")
    _add_config_args(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the run's existing checkpoint")

    p = subs.add_parser("eval", help="evaluate a checkpoint with CMC/mAP")
    _add_config_args(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: the run's)")

    p = subs.add_parser("ablate", help="train/evaluate every ablation row")
    _add_config_args(p)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (default 5)")

    p = subs.add_parser("export-ranking", help="write per-query top-k gallery listings")
    _add_config_args(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: the run's)")
    p.add_argument("-k", type=int, default=10, help="entries per query (default 10)")
    p.add_argument("--out", help="output file (default: <run dir>/ranking.txt)")

    p = subs.add_parser("gen-synthetic", help="generate a synthetic dataset + manifest")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ids", type=int, default=10, help="training identities")
    p.add_argument("--train-per-id", type=int, default=20)
    p.add_argument("--eval-ids", type=int, default=15, help="held-out identities")
    p.add_argument("--query-per-id", type=int, default=2)
    p.add_argument("--gallery-per-id", type=int, default=3)
    p.add_argument("--distractors", type=int, default=40,
                   help="single-camera gallery-only identities")
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=32)
    return parser


def cmd_train(args):
    cfg = _config_from(args)
    _, history = run_training(cfg, resume=args.resume, log=print)
    print(f"TRAIN done run_dir={cfg.run_dir()} epochs={len(history)}")
    return 0


def cmd_eval(args):
    cfg = _config_from(args)
    report = run_evaluation(cfg, checkpoint=args.checkpoint)
    print(report.summary_line())
    print(f"report written to {cfg.run_dir() / 'report.txt'}")
    return 0


def cmd_ablate(args):
    cfg = _config_from(args)
    base_seed = cfg.get("train", "seed")
    seeds = list(range(base_seed, base_seed + args.seeds))
    results = run_ablation(cfg, seeds, log=print)
    table = ablation_table(results)
    out_path = Path(cfg.get("out", "dir"))
    out_path.mkdir(parents=True, exist_ok=True)
    (out_path / "ablation.txt").write_text(table)
    print(table, end="")
    print(f"table written to {out_path / 'ablation.txt'}")
    return 0


def cmd_export_ranking(args):
    cfg = _config_from(args)
    listing = export_ranking(cfg, k=args.k, checkpoint=args.checkpoint)
    out = Path(args.out) if args.out else cfg.run_dir() / "ranking.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(listing)
    print(f"ranking written to {out}")
    return 0


def cmd_gen_synthetic(args):
    manifest = generate_dataset(
        args.out, seed=args.seed, num_train_ids=args.ids,
        train_per_id=args.train_per_id, num_eval_ids=args.eval_ids,
        query_per_id=args.query_per_id, gallery_per_id=args.gallery_per_id,
        num_distractors=args.distractors, num_cameras=args.cameras,
        height=args.height, width=args.width)
    print(f"manifest written to {manifest}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-ranking": cmd_export_ranking,
    "gen-synthetic": cmd_gen_synthetic,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ManifestError, ImageFormatError, TensorFileError,
            TrainingDiverged, ValueError, OSError) as exc:
        print("ERROR " + json.dumps({"command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
