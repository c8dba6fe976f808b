"""Command-line front end.

Subcommands: ``synth | analyze | oracle | train | refine | eval | bench``
with global flags ``--config PATH --seed N --out DIR --jobs K`` (given before
the subcommand). Reports are JSON lines; every run echoes its resolved
configuration into the output directory. Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, DataError, load_config, write_resolved
from .detector import Detector, detect_oracle, train_detector
from .masks import load_pgm, mask_at_level, save_pgm
from .metrics import (
    AttentionCost,
    EvalRecord,
    boundary_iou,
    default_band_distance,
    flops_mlp,
    flops_model,
    incoherence_stats,
    mask_iou,
    memory_model,
    oracle_fill_study,
)
from .quadtree import build
from .refiner import (
    MLPRefiner,
    Refiner,
    RefinerConfig,
    TrainConfig,
    refine_sample,
    train_refiner,
)
from .synth import (
    FeatureConfig,
    GenConfig,
    NoiseConfig,
    generate_dataset,
    load_sample,
    read_manifest,
)
from .tensorio import load_checkpoint, save_checkpoint

TOTAL_GRID = 28 * 28 + 56 * 56 + 112 * 112


def _jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def _map_ordered(fn, items, jobs: int):
    """Apply fn over items, optionally in a worker pool; results keep order."""
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _records(manifest: str, split: str = "all"):
    path = Path(manifest)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records = read_manifest(path)
    if split != "all":
        records = [r for r in records if r.split == split]
    return records


def _mean(rows, key) -> float | None:
    vals = [r[key] for r in rows if r.get(key) is not None]
    return float(np.mean(vals)) if vals else None


def cmd_synth(cfg, args) -> int:
    out = Path(args.out)
    gen = GenConfig(
        noise=NoiseConfig(p=cfg["noise_p"], radius=cfg["noise_radius"]),
        features=FeatureConfig(channels=cfg["channels"], texture_amp=cfg["texture_amp"],
                               sdt_noise_px=cfg["sdt_noise_px"]),
        train_fraction=cfg["train_fraction"],
    )
    manifest = generate_dataset(out, count=cfg["count"], config=gen, seed=args.seed)
    write_resolved(cfg, out, args.seed)
    print(manifest)
    return 0


def cmd_analyze(cfg, args) -> int:
    records = _records(args.manifest)
    out = Path(args.out)

    def one(rec):
        try:
            sample = load_sample(rec)
        except (OSError, ValueError) as e:
            return {"id": rec.id, "error": str(e)}
        stats = incoherence_stats(sample.gt, sample.coarse)
        return {"id": rec.id, **stats}

    rows = _map_ordered(one, records, args.jobs)
    good = [r for r in rows if "error" not in r]
    skipped = [r for r in rows if "error" in r]
    aggregate = {
        "aggregate": True,
        "count": len(good),
        "skipped": len(skipped),
        "area_fraction": _mean(good, "area_fraction"),
        "err_recall": _mean(good, "err_recall"),
        "err_acc": _mean(good, "err_acc"),
    }
    _jsonl(out / "analysis.jsonl", rows + [aggregate])
    write_resolved(cfg, out, args.seed)
    for r in skipped:
        print(f"skipped {r['id']}: {r['error']}", file=sys.stderr)
    print(json.dumps(aggregate))
    return 2 if skipped else 0


def _load_model_checkpoint(path: Path):
    path = Path(path)
    meta_path = path / "meta.cfg"
    if not meta_path.exists():
        raise DataError(f"checkpoint meta not found: {meta_path}")
    meta = dict(line.split("=", 1) for line in meta_path.read_text().splitlines() if line)
    arrays = load_checkpoint(path)
    kind = meta["kind"]
    rcfg = RefinerConfig(channels=int(meta["model_channels"]), heads=int(meta["heads"]),
                         layers=int(meta["layers"]), feature_channels=int(meta["channels"]))
    if kind == "detector":
        model = Detector(int(meta["channels"]), guidance=meta.get("guidance", "1") == "1")
        model.load_state(arrays)
    elif kind == "refiner":
        model = Refiner(rcfg)
        model.load_state({k: v for k, v in arrays.items() if not k.startswith("detector:")})
    elif kind == "mlp":
        model = MLPRefiner(rcfg)
        model.load_state({k: v for k, v in arrays.items() if not k.startswith("detector:")})
    else:
        raise DataError(f"unknown checkpoint kind {kind!r}")
    detector = None
    det_arrays = {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith("detector:")}
    if det_arrays:
        detector = Detector(int(meta["channels"]), guidance=meta.get("guidance", "1") == "1")
        detector.load_state(det_arrays)
    return model, detector, meta


def _save_model_checkpoint(out: Path, kind: str, cfg, model, detector=None) -> Path:
    arrays = dict(model.state_arrays())
    if detector is not None:
        arrays.update({f"detector:{k}": v for k, v in detector.state_arrays().items()})
    ckpt = out / "checkpoint"
    save_checkpoint(ckpt, arrays)
    meta = {
        "kind": kind,
        "channels": cfg["channels"],
        "model_channels": cfg["model_channels"],
        "heads": cfg["heads"],
        "layers": cfg["layers"],
        "guidance": int(bool(cfg["guidance"])),
    }
    (ckpt / "meta.cfg").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return ckpt


def cmd_oracle(cfg, args) -> int:
    records = _records(args.manifest)
    out = Path(args.out)
    detector = None
    if args.use_detector:
        model, _, _ = _load_model_checkpoint(Path(args.use_detector))
        if not isinstance(model, Detector):
            raise DataError(f"{args.use_detector} is not a detector checkpoint")
        detector = model

    def one(rec):
        try:
            sample = load_sample(rec)
        except (OSError, ValueError) as e:
            return {"id": rec.id, "error": str(e)}
        detection = None
        if detector is not None:
            detection = detector.detect(sample.pyramid, sample.coarse)
        study = oracle_fill_study(sample.gt, sample.coarse, detection=detection)
        return {"id": rec.id, **study}

    rows = _map_ordered(one, records, args.jobs)
    good = [r for r in rows if "error" not in r]
    skipped = [r for r in rows if "error" in r]
    aggregate = {
        "aggregate": True,
        "count": len(good),
        "skipped": len(skipped),
        "iou_coarse": _mean(good, "iou_coarse"),
        "iou_filled": _mean(good, "iou_filled"),
        "source": "detector" if detector is not None else "oracle",
    }
    _jsonl(out / "oracle.jsonl", rows + [aggregate])
    write_resolved(cfg, out, args.seed)
    print(json.dumps(aggregate))
    return 2 if skipped else 0


def cmd_train(cfg, args) -> int:
    if not cfg["manifest"]:
        raise ConfigError("train requires the 'manifest' config key")
    out = Path(args.out)
    train_recs = _records(cfg["manifest"], "train")
    test_recs = _records(cfg["manifest"], "test")
    train_samples = [load_sample(r) for r in train_recs]
    target = cfg["train_target"]
    if target == "detector":
        try:
            result = train_detector(train_samples, epochs=cfg["epochs"], seed=args.seed,
                                    guidance=cfg["guidance"], lr=cfg["lr"],
                                    momentum=cfg["momentum"], weight_decay=cfg["weight_decay"])
        except FloatingPointError as e:
            raise FloatingPointError(f"detector training diverged: {e}") from e
        ckpt = _save_model_checkpoint(out, "detector", cfg, result.model)
        log = [{"epoch": i, "refine_l1": None, "inc_bce": v, "val_biou": None}
               for i, v in enumerate(result.epoch_losses)]
        _jsonl(out / "log.jsonl", log)
    elif target in ("refiner", "mlp"):
        tcfg = TrainConfig(
            epochs=cfg["epochs"], lr=cfg["lr"], momentum=cfg["momentum"],
            weight_decay=cfg["weight_decay"], seed=args.seed,
            cap_per_level=cfg["cap_per_level"], joint_detector=cfg["joint_detector"],
            model=target, val_limit=cfg["val_limit"],
            refiner=RefinerConfig(channels=cfg["model_channels"], heads=cfg["heads"],
                                  layers=cfg["layers"], feature_channels=cfg["channels"]),
        )
        val_samples = [load_sample(r) for r in test_recs[: cfg["val_limit"]]]
        result = train_refiner(train_samples, val_samples, tcfg)
        ckpt = _save_model_checkpoint(out, target, cfg, result.model, result.detector)
        _jsonl(out / "log.jsonl", result.log)
        if result.diverged:
            write_resolved(cfg, out, args.seed)
            print(f"training diverged; last good checkpoint at {ckpt}", file=sys.stderr)
            return 3
    else:
        raise ConfigError(f"unknown train_target {target!r}")
    write_resolved(cfg, out, args.seed)
    print(ckpt)
    return 0


def cmd_refine(cfg, args) -> int:
    model, bundled_detector, _ = _load_model_checkpoint(Path(args.checkpoint))
    if isinstance(model, Detector):
        raise DataError("refine needs a refiner or mlp checkpoint, got a detector")
    detector = bundled_detector
    if args.detector_checkpoint:
        det, _, _ = _load_model_checkpoint(Path(args.detector_checkpoint))
        if not isinstance(det, Detector):
            raise DataError(f"{args.detector_checkpoint} is not a detector checkpoint")
        detector = det
    mode = args.detector
    if mode == "learned" and detector is None:
        raise ConfigError("--detector learned needs a detector in the checkpoint "
                          "or --detector-checkpoint")
    depth = args.depth if args.depth is not None else cfg["depth"]
    propagation = args.propagation or cfg["propagation"]
    if propagation not in ("full", "finest"):
        raise ConfigError(f"unknown propagation mode {propagation!r}")
    if propagation == "finest" and depth != 3:
        raise ConfigError("finest-only propagation is defined for depth=3")
    records = _records(args.manifest, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(rec):
        try:
            sample = load_sample(rec)
        except (OSError, ValueError) as e:
            return {"id": rec.id, "error": str(e)}
        if mode == "oracle":
            detection = "oracle"
        else:
            detection = detector.detect(sample.pyramid, sample.coarse)
        prob, mask, n = refine_sample(model, sample, detection, depth=depth,
                                      propagation=propagation)
        if not np.isfinite(prob).all():
            raise FloatingPointError(f"non-finite refinement output for {rec.id}")
        save_pgm(out / f"{rec.id}_refined.pgm", mask)
        return {"id": rec.id, "nodes": n, "depth": depth,
                "resolution": int(mask.shape[0]), "propagation": propagation}

    rows = _map_ordered(one, records, args.jobs)
    skipped = [r for r in rows if "error" in r]
    _jsonl(out / "refine.jsonl", rows)
    write_resolved(cfg, out, args.seed)
    for r in skipped:
        print(f"skipped {r['id']}: {r['error']}", file=sys.stderr)
    print(out)
    return 2 if skipped else 0


def cmd_eval(cfg, args) -> int:
    records = _records(args.manifest, args.split)
    out = Path(args.out)
    pred_dir = Path(args.pred_dir)
    band_override = cfg["band"] if cfg["band"] > 0 else None

    def one(rec):
        pred_path = pred_dir / f"{rec.id}_refined.pgm"
        if not pred_path.exists():
            return {"id": rec.id, "error": f"missing prediction {pred_path}"}
        try:
            sample = load_sample(rec)
            pred = load_pgm(pred_path)
        except (OSError, ValueError) as e:
            return {"id": rec.id, "error": str(e)}
        size = pred.shape[0]
        level = {28: 1, 56: 2, 112: 3}.get(size)
        if level is None:
            return {"id": rec.id, "error": f"unexpected prediction size {pred.shape}"}
        truth = mask_at_level(sample.gt, level)
        band = band_override or default_band_distance(pred.shape)
        stats = incoherence_stats(sample.gt, sample.coarse)
        tree = build(detect_oracle(sample.gt, reconstruction_complete=True))
        n = tree.incoherent_count()
        cost = AttentionCost(nodes=n, channels=cfg["model_channels"],
                             heads=cfg["heads"], layers=cfg["layers"])
        record = EvalRecord(
            id=rec.id,
            mask_iou=mask_iou(pred, truth),
            boundary_iou=boundary_iou(pred, truth, band),
            band=band,
            incoherent_area_fraction=stats["area_fraction"],
            node_count=n,
            flops=flops_model(cost),
            memory_bytes=memory_model(cost),
        )
        return record.to_json_dict()

    rows = _map_ordered(one, records, args.jobs)
    good = [r for r in rows if "error" not in r]
    skipped = [r for r in rows if "error" in r]
    aggregate = {
        "aggregate": True,
        "count": len(good),
        "skipped": len(skipped),
        "mask_iou": _mean(good, "mask_iou"),
        "boundary_iou": _mean(good, "boundary_iou"),
        "incoherent_area_fraction": _mean(good, "incoherent_area_fraction"),
        "node_count": _mean(good, "node_count"),
        "node_sparsity": (_mean(good, "node_count") / TOTAL_GRID) if good else None,
    }
    _jsonl(out / "eval.jsonl", rows + [aggregate])
    write_resolved(cfg, out, args.seed)
    for r in skipped:
        print(f"skipped {r['id']}: {r['error']}", file=sys.stderr)
    print(json.dumps(aggregate))
    return 2 if skipped else 0


def cmd_bench(cfg, args) -> int:
    if not cfg["manifest"]:
        raise ConfigError("bench requires the 'manifest' config key")
    records = _records(cfg["manifest"])
    out = Path(args.out)

    def count_nodes(rec):
        sample = load_sample(rec)
        return build(detect_oracle(sample.gt, reconstruction_complete=True)).incoherent_count()

    counts = _map_ordered(count_nodes, records, args.jobs)
    if not counts:
        raise DataError("bench needs at least one sample")
    c, h, l = cfg["bench_channels"], cfg["bench_heads"], cfg["bench_layers"]
    mean_n = float(np.mean(counts))
    max_n = int(max(counts))
    sparse = AttentionCost(nodes=round(mean_n), channels=c, heads=h, layers=l)
    sparse_max = AttentionCost(nodes=max_n, channels=c, heads=h, layers=l)
    dense28 = AttentionCost(nodes=28 * 28, reference_tokens=0, channels=c, heads=h, layers=l)
    dense56 = AttentionCost(nodes=56 * 56, reference_tokens=0, channels=c, heads=h, layers=l)
    rows = [
        {"model": "sparse-quadtree", "nodes": round(mean_n), "nodes_max": max_n,
         "tokens": sparse.tokens, "flops": flops_model(sparse),
         "memory_bytes": memory_model(sparse),
         "flops_max": flops_model(sparse_max), "memory_bytes_max": memory_model(sparse_max),
         "node_sparsity": mean_n / TOTAL_GRID},
        {"model": "dense-28", "nodes": 784, "tokens": 784,
         "flops": flops_model(dense28), "memory_bytes": memory_model(dense28)},
        {"model": "dense-56", "nodes": 3136, "tokens": 3136,
         "flops": flops_model(dense56), "memory_bytes": memory_model(dense56)},
        {"model": "mlp", "nodes": round(mean_n), "tokens": round(mean_n),
         "flops": flops_mlp(round(mean_n), c), "memory_bytes": 6 * round(mean_n) * c * 4},
    ]
    summary = {
        "aggregate": True,
        "channels": c,
        "samples": len(counts),
        "flops_ratio_sparse_vs_dense56": rows[0]["flops"] / rows[2]["flops"],
        "memory_ratio_sparse_vs_dense56": rows[0]["memory_bytes"] / rows[2]["memory_bytes"],
        "flops_ratio_max": rows[0]["flops_max"] / rows[2]["flops"],
        "memory_ratio_max": rows[0]["memory_bytes_max"] / rows[2]["memory_bytes"],
    }
    _jsonl(out / "bench.jsonl", rows + [summary])
    write_resolved(cfg, out, args.seed)
    for row in rows:
        print(f"{row['model']:>16}  tokens={row['tokens']:>5}  "
              f"flops={row['flops']:.3e}  memory={row['memory_bytes']:.3e}")
    print(json.dumps(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quadfine",
                                     description="quadtree-sparse mask refinement pipeline")
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="quadfine_out", help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for per-sample work")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate the synthetic dataset")

    p = sub.add_parser("analyze", help="incoherent-region statistics per sample")
    p.add_argument("manifest")

    p = sub.add_parser("oracle", help="oracle fill study")
    p.add_argument("manifest")
    p.add_argument("--use-detector", default=None, metavar="CHECKPOINT",
                   help="source incoherence from a trained detector")

    sub.add_parser("train", help="train detector/refiner/mlp per the config")

    p = sub.add_parser("refine", help="refine masks with a trained model")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--depth", type=int, choices=(1, 2, 3), default=None)
    p.add_argument("--propagation", choices=("full", "finest"), default=None)
    p.add_argument("--detector", choices=("learned", "oracle"), default="learned")
    p.add_argument("--detector-checkpoint", default=None)
    p.add_argument("--split", choices=("train", "test", "all"), default="all")

    p = sub.add_parser("eval", help="score refined masks against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("manifest")
    p.add_argument("--split", choices=("train", "test", "all"), default="all")

    sub.add_parser("bench", help="sparse vs dense FLOPs/memory comparison")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "analyze": cmd_analyze,
    "oracle": cmd_oracle,
    "train": cmd_train,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (FloatingPointError, ArithmeticError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
