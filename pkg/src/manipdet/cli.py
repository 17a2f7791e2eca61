"""Operator entry point: dataset generation, training, evaluation, single-pair
inspection, gradient checking, and report pretty-printing.

Logs go to stderr; every artifact (datasets, checkpoints, reports, dumps) is
written to the path the caller names. All subcommands are deterministic under
a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import collate, generate_pool, load_pool, save_pool, validate_sample
from .metrics import MetricsReport, format_report
from .training import (
    TrainConfig,
    Trainer,
    gradient_check_suite,
    load_checkpoint,
    parse_config_file,
    save_checkpoint,
)

log = logging.getLogger("manipdet")

DATA_FILENAME = "data.jsonl"


def _data_file(directory: str) -> Path:
    return Path(directory) / DATA_FILENAME


def cmd_gen_data(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool = generate_pool(args.num, args.seed, pristine_frac=args.pristine_frac)
    for sample in pool:
        validate_sample(sample)
    save_pool(pool, out_dir / DATA_FILENAME, perturb_fraction=args.perturb_frac,
              seed=args.seed)
    counts = Counter("+".join(sorted(s.fake_cls)) or "original" for s in pool)
    stats = {
        "num_samples": len(pool),
        "seed": args.seed,
        "pristine_frac": args.pristine_frac,
        "perturb_frac": args.perturb_frac,
        "class_counts": dict(sorted(counts.items())),
    }
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d samples to %s", len(pool), out_dir / DATA_FILENAME)
    return 0


def _load_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return parse_config_file(path)


def cmd_train(args) -> int:
    config = _load_config(args.config)
    pool = load_pool(_data_file(args.data))
    trainer = Trainer(config)
    steps_per_epoch = max(1, len(pool) // config.batch_size)

    def log_entry(entry):
        if entry["step"] % args.log_every == 0 or entry["step"] == 1:
            parts = " ".join(f"{k}={entry[k]:.4f}" for k in ("total", "lr") if k in entry)
            log.info("step %d/%d %s", entry["step"],
                     steps_per_epoch * (args.epochs or config.epochs), parts)

    trainer.train(pool, epochs=args.epochs, log_fn=log_entry)
    save_checkpoint(trainer, args.ckpt)
    log.info("checkpoint written to %s", args.ckpt)
    return 0


def _restore(args) -> Trainer:
    config = _load_config(args.config)
    trainer = Trainer(config)
    load_checkpoint(trainer, args.ckpt)
    return trainer


def cmd_eval(args) -> int:
    trainer = _restore(args)
    pool = load_pool(_data_file(args.data))
    report = trainer.evaluate(pool)
    Path(args.report).write_text(report.to_json() + "\n")
    log.info("report written to %s", args.report)
    print(format_report(report), file=sys.stderr)
    return 0


def cmd_infer(args) -> int:
    trainer = _restore(args)
    pool = load_pool(_data_file(args.data))
    if not 0 <= args.index < len(pool):
        raise ValueError(f"sample index {args.index} outside [0, {len(pool)})")
    sample = pool[args.index]
    batch = collate([sample])
    out = trainer.model.forward(batch["images"], batch["tokens"], batch["pad_mask"])
    payload = {
        "id": sample.id,
        "fake_prob": float(ad.softmax(out.binary_logits).data[0, 1]),
        "type_probs": [float(v) for v in ad.sigmoid(out.type_logits).data[0]],
        "box": [float(v) for v in ad.sigmoid(out.box_logits).data[0]],
        "token_probs": [float(v) for v in ad.softmax(out.token_logits).data[0, :, 1]],
        "ground_truth": {
            "y_bin": int(sample.y_bin),
            "y_mul": [int(v) for v in sample.y_mul],
            "y_box": [float(v) for v in sample.y_box],
            "y_tok": [int(v) for v in sample.y_tok],
        },
        # raw cross-attention weights: image-over-text fusion block and the
        # box-feature aggregation query over patch tokens
        "fusion_attention": out.fusion_weights.data[0].tolist(),
        "pool_attention": out.pool_weights.data[0].tolist(),
    }
    Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    log.info("inference dump written to %s", args.out)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradient_check_suite(coords_per_tensor=args.coords, seed=args.seed)
    failed = False
    for term, err in results.items():
        ok = err < 1e-4
        failed = failed or not ok
        print(f"{term:>6}: max rel err {err:.3e} {'PASS' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_report(args) -> int:
    payload = json.loads(Path(args.report_file).read_text())
    report = MetricsReport(**payload)
    print(format_report(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="manipdet",
        description="train and evaluate a multi-modal manipulation detector on glyph-world data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--num", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pristine-frac", type=float, default=0.3)
    p.add_argument("--perturb-frac", type=float, default=0.5,
                   help="fraction of samples noised at write time")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", help="key=value config file (defaults apply if omitted)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint output path")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.add_argument("--log-every", type=int, default=25)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a metrics report")
    p.add_argument("--config", help="config file used at train time")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="report JSON output path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="predict one sample and dump attention weights")
    p.add_argument("--config", help="config file used at train time")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True, help="JSON output path")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=3,
                   help="coordinates sampled per parameter tensor")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="pretty-print a report file")
    p.add_argument("report_file")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surfaced as a diagnostic, not a traceback
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
