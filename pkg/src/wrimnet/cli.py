"""Command-line entry point: ``wrimnet {train,evaluate,flops,generate-synth}``.

Exit codes: 0 success, 1 usage error (bad flags, unreadable or invalid
config), 2 runtime failure (training diverged, checkpoint mismatch, I/O).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("wrimnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract here says 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _load(path):
    from .config import load_config

    try:
        return load_config(path)
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"config {path}: {exc}") from None


def cmd_train(args):
    from .training import train

    cfg = _load(args.config)
    if not cfg.data.train_manifest:
        raise UsageError("config has no data.train_manifest")
    _, summary = train(cfg)
    print(json.dumps({k: summary[k] for k in ("steps", "epochs", "checkpoints", "log")}, indent=2))
    return EXIT_OK


def cmd_evaluate(args):
    import torch

    from .checkpoint import load_checkpoint
    from .data import load_manifest
    from .evaluation import evaluate_model, format_table, write_report
    from .training import DTYPES

    cfg = _load(args.config)
    if not cfg.data.test_manifest:
        raise UsageError("config has no data.test_manifest")
    dtype = DTYPES[cfg.precision]
    model, ck_cfg = load_checkpoint(args.checkpoint, map_dtype=dtype)
    # everything but the class count (set from the training manifest) must agree
    want = dataclasses.replace(cfg.network, num_classes=model.cfg.num_classes, pretrained_weights_path=None)
    have = dataclasses.replace(model.cfg, pretrained_weights_path=None)
    if want != have:
        diff = sorted(k for k, v in want.to_dict().items() if have.to_dict()[k] != v)
        raise RuntimeError(f"checkpoint {args.checkpoint} does not match the config network section: {diff}")
    records, _ = load_manifest(cfg.data.test_manifest)
    torch.manual_seed(cfg.seed)
    result = evaluate_model(model, records, cfg.eval, seed=cfg.seed, batch_size=cfg.data.batch_size_eval,
                            dtype=dtype)
    out_dir = args.out or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    write_report(os.path.join(out_dir, "report.json"), cfg.eval, result)
    table = format_table(cfg.eval, result)
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(table)
    print(table, end="")
    return EXIT_OK


def cmd_flops(args):
    from .backbone import build_wrimnet
    from .complexity import count_flops_params

    cfg = _load(args.config)
    net_cfg = dataclasses.replace(cfg.network, pretrained_weights_path=None)
    report = count_flops_params(build_wrimnet(net_cfg))
    if not args.totals_only:
        print(report.table())
    print(f"params {report.params / 1e6:.2f}M  MACs {report.macs / 1e9:.3f}B  flops {report.flops / 1e9:.3f}B")
    return EXIT_OK


def cmd_generate_synth(args):
    from .data import generate_synthetic_dataset

    if args.ids < 1 or args.per_id < 1:
        raise UsageError("--ids and --per-id must be positive")
    path = generate_synthetic_dataset(args.ids, args.per_id, image_size=tuple(args.size), seed=args.seed,
                                      out_dir=args.out)
    if args.holdout:
        from .data import load_manifest, read_manifest_header, split_records, write_manifest

        records, _ = load_manifest(path)
        header = read_manifest_header(path)
        train, test = split_records(records, args.holdout)
        write_manifest(os.path.join(args.out, "train.jsonl"), train, header=header)
        write_manifest(os.path.join(args.out, "test.jsonl"), test, header=header)
    print(path)
    return EXIT_OK


def build_parser():
    p = _Parser(prog="wrimnet", description="WRIM-Net visible-infrared re-identification toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on the config's test manifest")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", help="report directory (default: the config's output_dir)")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("flops", help="per-layer params and flops of the configured network")
    f.add_argument("--config", required=True)
    f.add_argument("--totals-only", action="store_true")
    f.set_defaults(func=cmd_flops)

    g = sub.add_parser("generate-synth", help="render a synthetic paired VIS/IR dataset")
    g.add_argument("--ids", type=int, required=True)
    g.add_argument("--per-id", type=int, required=True, help="images per identity per modality")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, nargs=2, default=(96, 48), metavar=("H", "W"))
    g.add_argument("--holdout", type=int, default=0,
                   help="also write train.jsonl/test.jsonl holding out this many images per id and modality")
    g.set_defaults(func=cmd_generate_synth)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
