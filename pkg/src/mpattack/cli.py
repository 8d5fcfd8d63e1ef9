"""Command-line entry point: ``mpattack {config,train,attack,sweep,metrics}``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from mpattack import harness
from mpattack.classifier import accuracy, load_checkpoint, save_checkpoint


def _split(value):
    return [v.strip() for v in value.split(",") if v.strip()] if value else None


def _load(args):
    overrides = {"seed": args.seed}
    if getattr(args, "victims", None):
        overrides["victims"] = _split(args.victims)
    return harness.load_config(args.config, **overrides)


def cmd_config(args):
    json.dump(harness.default_config(), sys.stdout, indent=2)
    sys.stdout.write("\n")


def cmd_train(args):
    cfg = _load(args)
    train, test = harness.dataset_from_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in cfg["victims"]:
        model = harness.train_victim(name, train, cfg)
        path = out / f"{name}.json"
        save_checkpoint(model, path)
        acc = accuracy(model, test.x, test.y)
        print(f"{name}: clean test accuracy {acc:.4f} -> {path}")


def cmd_attack(args):
    cfg = _load(args)
    rows = harness.run_attack_matrix(
        cfg, attacks=_split(args.attacks), jobs=args.jobs, cache_dir=Path(args.out) / "victims"
    )
    paths = harness.emit_reports(rows, args.out, "results")
    for r in rows:
        print(f"{r.victim:>10} {r.attack:>10}  clean {r.clean_accuracy:.3f}  robust {r.robust_accuracy:.3f}")
    print("wrote", *paths)


def cmd_sweep(args):
    cfg = _load(args)
    rows = harness.run_sweep(cfg, jobs=args.jobs, cache_dir=Path(args.out) / "victims")
    paths = harness.emit_reports(rows, args.out, "sweep")
    for r in rows:
        print(f"tau={r.tau:<6g} n_inner={r.n_inner:<3d} reuse={str(r.reuse):<5}  robust {r.robust_accuracy:.3f}  psnr {r.psnr:.2f}")
    print("wrote", *paths)


def cmd_metrics(args):
    cfg = _load(args)
    cfg["metrics"] = True
    model = load_checkpoint(args.checkpoint)
    name = Path(args.checkpoint).stem
    _, test = harness.dataset_from_config(cfg)
    test = test.head(cfg["n_eval"])
    rows = []
    for attack, (kind, atk) in harness.attack_configs(cfg, _split(args.attacks)).items():
        stats = harness.evaluate_attack(model, test, kind, atk, cfg, jobs=args.jobs)
        rows.append(harness.ResultRow(victim=name, attack=attack, **stats))
        print(f"{attack:>10}  n={stats['n_evaluated']:<4d} psnr {stats['psnr']:.3f}  ssim {stats['ssim']:.4f}  "
              f"wd {stats['wasserstein']:.4f}")
    print("wrote", *harness.emit_reports(rows, args.out, "metrics"))


def build_parser():
    parser = argparse.ArgumentParser(prog="mpattack", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, victims=True, attacks=False):
        p.add_argument("--config", help="JSON config; missing keys fall back to `mpattack config`")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="results", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        if victims:
            p.add_argument("--victims", help="comma-separated victim names")
        if attacks:
            p.add_argument("--attacks", help="comma-separated attack names from the config")

    sub.add_parser("config", help="print the default config").set_defaults(func=cmd_config)
    p = sub.add_parser("train", help="train victims and write checkpoints")
    common(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("attack", help="robust-accuracy matrix over victims x attacks")
    common(p, attacks=True)
    p.set_defaults(func=cmd_attack)
    p = sub.add_parser("sweep", help="MPA hyperparameter sweep")
    common(p, victims=False)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("metrics", help="success-filtered imperceptibility metrics for one checkpoint")
    common(p, victims=False, attacks=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
