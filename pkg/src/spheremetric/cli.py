"""Command line entry point: ``spheremetric <subcommand> [flags]``.

Exit codes: 0 success, 1 contract/config/IO error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from spheremetric.errors import ContractError, NumericalError
from spheremetric.harness import (
    ExperimentConfig,
    ablate_margin,
    build_dataset,
    compare_losses,
    dumps_report,
    evaluate,
    export_embeddings,
    metrics_document,
    prepare_data,
    save_run,
    train,
)
from spheremetric.layers import load_checkpoint, save_checkpoint
from spheremetric.data import save_dataset
from spheremetric.optim import PAPER_EPOCHS

log = logging.getLogger("spheremetric")


def _csv(cast):
    return lambda s: [cast(v) for v in s.split(",") if v.strip()]


def _add_experiment_flags(p):
    g = p.add_argument_group("experiment")
    g.add_argument("--config", help="JSON file whose keys override the flags below")
    g.add_argument("--manifest", help="dataset manifest; default is a synthetic dataset")
    g.add_argument("--n-classes", type=int, default=3)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--samples-per-class", type=int, default=200)
    g.add_argument("--separation", type=float, default=4.0)
    g.add_argument("--spread", type=float, default=1.0)
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--hidden", type=_csv(int), default=[64], help="MLP widths, e.g. 64,64")
    g.add_argument("--conv-channels", type=_csv(int), help="use a depthwise-separable conv backbone")
    g.add_argument("--embedding-dim", type=int, default=256)
    g.add_argument("--dropout", type=float, default=0.2)
    g.add_argument("--loss", default="sphereface",
                   choices=["softmax", "modified-softmax", "sphereface", "triplet"])
    g.add_argument("--m", type=int, default=5)
    g.add_argument("--s", type=float, default=30.0)
    g.add_argument("--triplet-margin", type=float, default=0.2)
    g.add_argument("--epochs", type=int, default=200)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--lr-rates", type=_csv(float), default=None)
    g.add_argument("--paper-faithful", action="store_true",
                   help="275 epochs with the 1e-4/1e-5/1e-6 schedule at epochs 125/175")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-fraction", type=float, default=0.7)
    g.add_argument("--swap-split", action="store_true", help="train on the held-out partition instead")
    g.add_argument("--k", type=int, default=1)
    g.add_argument("--k-max", type=int, default=30)


def config_from_args(args) -> ExperimentConfig:
    if args.manifest:
        dataset = {"kind": "manifest", "path": os.path.abspath(args.manifest), "seed": args.data_seed}
    else:
        dataset = {"kind": "synthetic", "n_classes": args.n_classes, "dim": args.dim,
                   "samples_per_class": args.samples_per_class, "center_separation": args.separation,
                   "spread": args.spread, "seed": args.data_seed}
    backbone = {"kind": "conv", "channels": args.conv_channels} if args.conv_channels \
        else {"kind": "mlp", "hidden": args.hidden}
    d = dict(dataset=dataset, backbone=backbone, embedding_dim=args.embedding_dim, dropout=args.dropout,
             loss=args.loss, m=args.m, s=args.s, triplet_margin=args.triplet_margin, epochs=args.epochs,
             batch_size=args.batch_size, seed=args.seed, train_fraction=args.train_fraction,
             swap_split=args.swap_split, k=args.k, k_max=args.k_max)
    if args.paper_faithful:
        d.update(epochs=PAPER_EPOCHS, lr_rates=(1e-4, 1e-5, 1e-6), lr_breakpoints=(125, 175))
    if args.lr_rates:
        d["lr_rates"] = tuple(args.lr_rates)
    if args.config:
        try:
            with open(args.config) as fh:
                d.update(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ContractError(f"{args.config}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(d)


def _write(text: str, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def cmd_gen_data(args):
    cfg = config_from_args(args)
    dataset = build_dataset(cfg)
    path = save_dataset(dataset, args.out)
    log.info("wrote %d samples to %s", len(dataset), path)


def cmd_train(args):
    cfg = config_from_args(args)
    train_set, _ = prepare_data(cfg)
    model, record, _ = train(cfg, train_set)
    save_checkpoint(model, args.out, extra={"experiment": cfg.to_dict()})
    save_run(record, args.out, train_set.class_names)
    log.info("trained %d epochs, final loss %s; checkpoint in %s", cfg.epochs,
             record.loss_history[-1] if record.loss_history else "n/a", args.out)


def _load(args):
    model, manifest = load_checkpoint(args.checkpoint)
    cfg = ExperimentConfig.from_dict(manifest["experiment"])
    if args.manifest:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "dataset": {
            "kind": "manifest", "path": os.path.abspath(args.manifest), "seed": cfg.dataset.get("seed", 0)}})
    return model, cfg


def cmd_evaluate(args):
    model, cfg = _load(args)
    train_set, test_set = prepare_data(cfg)
    sweep = cfg.k_max if args.k_max is None else args.k_max
    ev = evaluate(model, train_set, test_set, args.k or cfg.k, sweep=sweep)
    doc = metrics_document(ev.report, test_set.class_names)
    doc["separation"] = ev.separation
    if sweep:
        doc["best_k"], doc["knn_curve"] = ev.best_k, ev.knn_curve
    _write(dumps_report(doc), args.out)


def cmd_export(args):
    model, cfg = _load(args)
    train_set, test_set = prepare_data(cfg)
    dataset = {"train": train_set, "test": test_set}.get(args.split) or build_dataset(cfg)
    export_embeddings(model, dataset, args.out, normalized=not args.raw)


def cmd_compare(args):
    cfg = config_from_args(args)
    _write(dumps_report(compare_losses(cfg, args.losses)), args.out)


def cmd_ablate(args):
    cfg = config_from_args(args)
    _write(dumps_report(ablate_margin(cfg, args.margins)), args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spheremetric", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic Gaussian-cluster dataset")
    _add_experiment_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    _add_experiment_flags(p)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "k-NN metrics for a checkpoint"),
                                 ("export-embeddings", cmd_export, "write embeddings as CSV")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", help="override the dataset recorded in the checkpoint")
        p.set_defaults(func=func)
        if name == "evaluate":
            p.add_argument("--k", type=int, default=None)
            p.add_argument("--k-max", type=int, default=None,
                           help="largest k in the sweep (default: the trained config's); 0 disables it")
            p.add_argument("--out", default="-")
        else:
            p.add_argument("--split", choices=["train", "test", "all"], default="test")
            p.add_argument("--raw", action="store_true", help="skip L2 normalization")
            p.add_argument("--out", required=True)

    p = sub.add_parser("compare-losses", help="one run per loss function")
    _add_experiment_flags(p)
    p.add_argument("--losses", type=_csv(str), default=["softmax", "modified-softmax", "triplet", "sphereface"])
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate-margin", help="one sphereface run per angular margin")
    _add_experiment_flags(p)
    p.add_argument("--margins", type=_csv(int), default=[4, 5, 6])
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ContractError, OSError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
