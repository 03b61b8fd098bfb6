"""Command-line entry point: ``geocsp <subcommand> [--config FILE] [--set k=v] [--seed N] --out DIR``."""

from __future__ import annotations

import argparse
import os
import sys

from . import data as geodata
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config
from .errors import GeoCSPError, UsageError
from . import pipeline


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geocsp", description="Contrastive location-encoder pre-training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic train and eval datasets")
    _common(p)

    p = sub.add_parser("pretrain", help="pre-train a location encoder on unlabeled data")
    _common(p)
    p.add_argument("--data", help="training dataset (default: generate from config)")
    p.add_argument("--model", help="named model, e.g. csp-mc-bld or mse (default: config objective)")

    p = sub.add_parser("finetune", help="fine-tune on a stratified labeled subset")
    _common(p)
    p.add_argument("--data", help="training dataset (default: generate from config)")
    p.add_argument("--checkpoint", help="pre-trained checkpoint; omit for a random encoder")
    p.add_argument("--ratio", type=float, help="percent of labels per class (default: first config ratio)")

    p = sub.add_parser("eval", help="Top-1 of a fine-tuned checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="eval dataset (default: generate from config)")

    p = sub.add_parser("export-grid", help="embed a regular lon/lat grid")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=float, default=1.0, help="cell size in degrees")

    p = sub.add_parser("cluster", help="Ward-cluster an embedding table")
    _common(p)
    p.add_argument("--table", required=True, help="table written by export-grid")
    p.add_argument("--k", type=int, required=True, help="number of clusters")

    p = sub.add_parser("run-experiment", help="data, pre-training, fine-tuning and evaluation for every model and ratio")
    _common(p)
    return parser


def _train_data(args, cfg: TrainConfig) -> geodata.Dataset:
    return geodata.load(args.data) if args.data else pipeline.make_datasets(cfg)[0]


def _eval_data(args, cfg: TrainConfig) -> geodata.Dataset:
    return geodata.load(args.data) if args.data else pipeline.make_datasets(cfg)[1]


def run(args: argparse.Namespace) -> str:
    """Execute one parsed command; returns a one-line summary."""
    cfg = load_config(args.config, args.set, args.seed)
    out = args.out
    cmd = args.command

    if cmd == "gen-data":
        train, held_out = pipeline.make_datasets(cfg)
        os.makedirs(out, exist_ok=True)
        geodata.save(os.path.join(out, "train.txt"), train)
        geodata.save(os.path.join(out, "eval.txt"), held_out)
        return f"wrote {len(train)} train and {len(held_out)} eval examples to {out}"

    if cmd == "pretrain":
        mcfg = cfg.for_model(args.model) if args.model else cfg
        if args.model and not args.model.startswith(("csp-", "mse")):
            raise UsageError(f"model {args.model!r} has no pre-training stage")
        train = _train_data(args, mcfg)
        ckpt, losses = pipeline.pretrain(mcfg, train.unlabeled())
        os.makedirs(out, exist_ok=True)
        save_checkpoint(os.path.join(out, "pretrain.ckpt"), ckpt)
        report = pipeline.RunReport(args.model or mcfg.objective, 100.0, cfg.seed, mcfg.hash(),
                                    n_train=len(train), pretrain_loss=tuple(losses))
        report.save(os.path.join(out, "pretrain.report"))
        return f"final pre-training loss {losses[-1] if losses else float('nan'):.6f}"

    if cmd == "finetune":
        ratio = args.ratio if args.ratio is not None else cfg.ratios[0]
        pretrained = load_checkpoint(args.checkpoint) if args.checkpoint else None
        train = _train_data(args, cfg)
        labeled = pipeline.labeled_subset(cfg, train, ratio)
        ckpt, curves = pipeline.finetune(cfg, pretrained, labeled, ratio)
        os.makedirs(out, exist_ok=True)
        save_checkpoint(os.path.join(out, "finetune.ckpt"), ckpt)
        report = pipeline.RunReport("finetune", float(ratio), cfg.seed, cfg.hash(), n_train=len(train),
                                    n_labeled=len(labeled), finetune_loss=tuple(curves["location"]),
                                    head_loss=tuple(curves["head"]))
        report.save(os.path.join(out, "finetune.report"))
        return f"fine-tuned on {len(labeled)} labeled examples"

    if cmd == "eval":
        ckpt = load_checkpoint(args.checkpoint)
        held_out = _eval_data(args, cfg)
        acc = pipeline.evaluate(ckpt, held_out)
        os.makedirs(out, exist_ok=True)
        report = pipeline.RunReport("eval", float(ckpt.meta.get("ratio", float("nan"))), cfg.seed,
                                    cfg.hash(), n_eval=len(held_out), **acc)
        report.save(os.path.join(out, "eval.report"))
        return " ".join(f"{k}={v:.4f}" for k, v in acc.items())

    if cmd == "export-grid":
        ckpt = load_checkpoint(args.checkpoint)
        pipeline.grid_points(args.resolution)
        os.makedirs(out, exist_ok=True)
        emb = pipeline.export_grid_embeddings(ckpt, args.resolution, os.path.join(out, "grid_embeddings.txt"))
        return f"wrote {len(emb)} grid embeddings"

    if cmd == "cluster":
        lonlat, emb = pipeline.read_table(args.table)
        labels = pipeline.ward_clusters(emb, args.k)
        os.makedirs(out, exist_ok=True)
        pipeline.write_table(os.path.join(out, "clusters.txt"), lonlat, labels[:, None], ["cluster"])
        return f"wrote {len(labels)} rows in {args.k} clusters"

    reports = pipeline.run_experiment(cfg, out)
    return "\n".join(
        f"{r.model} ratio={r.ratio:g} image={r.image_top1:.4f} location={r.location_top1:.4f} "
        f"combined={r.combined_top1:.4f}"
        for r in reports
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        print(run(args))
    except (GeoCSPError, OSError) as exc:
        print(f"geocsp {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
