"""Command line entry point: ``cekd <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import harness, model
from .augment import MixMethod
from .numerics import RngStream

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULT_ALPHA = {"mixup": 5.0, "cutmix": 3.0, "snapmix": 5.0}


def _read_json(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise harness.ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise harness.ConfigError(f"{path}: expected a JSON object")
    return raw


def cmd_generate_data(args) -> int:
    raw = _read_json(args.spec) if args.spec else {}
    unknown = set(raw) - set(data_mod.DatasetSpec().to_dict())
    if unknown:
        raise harness.ConfigError(f"unknown dataset spec keys: {sorted(unknown)}")
    try:
        spec = data_mod.DatasetSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise harness.ConfigError(str(exc)) from exc
    ds, manifest = data_mod.generate_synthetic(spec)
    data_mod.save_dataset(args.out, ds, manifest, spec)
    print(json.dumps({"out": str(args.out), "train": len(manifest.train_ids), "test": len(manifest.test_ids)}))
    return EXIT_OK


def cmd_train(args) -> int:
    config = harness.ExperimentConfig.load(args.config)
    out = harness.run_experiment(config, args.out)
    print((out / "summary.json").read_text(), end="")
    return EXIT_OK


def _test_split(data_dir):
    ds, manifest = data_mod.load_dataset(data_dir)
    return data_mod.split(ds, manifest)


def cmd_eval(args) -> int:
    params, _ = model.load_checkpoint(args.checkpoint)
    _, test = _test_split(args.data)
    acc = harness.evaluate(params, test)
    print(json.dumps({"checkpoint": str(args.checkpoint), "test_size": len(test), "accuracy": acc}))
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    train, _ = _test_split(args.data)
    n = min(args.count, len(train))
    rows = np.random.default_rng(args.seed).choice(len(train), size=n, replace=False)
    alpha = args.alpha if args.alpha is not None else DEFAULT_ALPHA[args.method]
    method = MixMethod(args.method, alpha, args.prob)
    if args.checkpoint:
        params, _ = model.load_checkpoint(args.checkpoint)
    elif args.method == "snapmix":
        # an untrained network still yields valid (if uninformative) CAMs
        hw, pools = train.images.shape[-1], []
        for _ in model.NetConfig().conv_channels:
            pools.append(hw % 2 == 0 and hw >= 4)
            hw //= 2 if pools[-1] else 1
        cfg = model.NetConfig(input_channels=train.images.shape[1], input_hw=train.images.shape[-1], pool_after=tuple(pools), num_classes=train.num_classes)
        params = model.init_params(cfg, RngStream(args.seed))
    else:
        params = None
    ids = [train.ids[i] for i in rows]
    batch = harness.augment_preview(method, train.images[rows], train.labels[rows], ids, args.out, args.seed, params)
    print(json.dumps({"out": str(args.out), "samples": len(batch), "mixed": int(batch.mixed.sum())}))
    return EXIT_OK


def cmd_cam(args) -> int:
    ds, manifest = data_mod.load_dataset(args.data)
    _, test = data_mod.split(ds, manifest)
    n = min(args.count, len(test)) if args.count else len(test)
    records = harness.emit_cam(args.checkpoint, test.images[:n], test.ids[:n], args.out)
    worst = max(r["gap_identity_error"] for r in records)
    print(json.dumps({"out": str(args.out), "heatmaps": len(records), "max_gap_identity_error": worst}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = harness.ExperimentConfig.load(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    report = harness.sweep(config, args.out, vary=args.vary, ablation=args.ablation, seeds=seeds)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cekd", description="Cross ensemble distillation experiments on synthetic fine-grained data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic fine-grained dataset")
    g.add_argument("--spec", help="JSON file with DatasetSpec fields (defaults if omitted)")
    g.add_argument("--out", required=True, type=Path)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="run one experiment")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, type=Path)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("augment-preview", help="write mixed images and their label records")
    a.add_argument("--method", required=True, choices=sorted(DEFAULT_ALPHA))
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True, type=Path)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--count", type=int, default=16)
    a.add_argument("--alpha", type=float)
    a.add_argument("--prob", type=float, default=1.0)
    a.add_argument("--checkpoint", help="network used for SnapMix CAMs")
    a.set_defaults(func=cmd_augment_preview)

    c = sub.add_parser("cam", help="emit CAM heatmaps for test images")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True, type=Path)
    c.add_argument("--count", type=int, default=0, help="limit to the first N test images")
    c.set_defaults(func=cmd_cam)

    s = sub.add_parser("sweep", help="grid over one coefficient and/or the ablation set")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--vary", help="e.g. lambda1=0.1,0.3,0.5,0.7,0.9")
    s.add_argument("--ablation", action="store_true", help="full model, only_cd, only_ce and single-network baseline")
    s.add_argument("--seeds", help="comma-separated seed offsets, e.g. 0,1,2,3,4")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except harness.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
