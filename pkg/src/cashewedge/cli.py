"""Command-line pipeline: synth data, head training, calibration, int8
conversion, inference, evaluation, benchmarking, budgets, spray planning.

Artifacts live under --workdir with fixed names so subcommands chain without
extra flags:

    data/               synthetic dataset (gen-synth)
    model_float.cshw    trained float32 model (train-head)
    calibration.tsv     activation ranges (calibrate)
    model_int8.cshw     quantized model (quantize)
    train_report.tsv, eval_report.txt, bench_report.txt/.tsv,
    features.tsv, spray_plan.txt
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import evalbench, quantizer, spray, synth, trainer
from .errors import CashewEdgeError
from .graph import build_cashew_net, count_params, load_model, save_model
from .quantizer import CalibrationStats
from .synth import SynthSpec, load_dataset, normalize_pixels, read_ppm
from .tensors import Tensor
from .trainer import TrainConfig

DEFAULT_FLASH_BUDGET = 597606    # 583.6 KiB
DEFAULT_RAM_BUDGET = 1677722     # 1.6 MiB


def _workpath(args, name: str) -> str:
    return os.path.join(args.workdir, name)


def _load_required_model(path: str, what: str):
    if not os.path.exists(path):
        raise CashewEdgeError(f"missing {what}: {path}")
    return load_model(path)


def cmd_gen_synth(args) -> int:
    spec = SynthSpec(per_class=args.count, image_size=args.image_size,
                     seed=args.seed)
    out = args.out or _workpath(args, "data")
    manifest = synth.gen_synth(spec, out)
    print(f"wrote {2 * args.count} images under {out} (manifest: {manifest})")
    return 0


def cmd_train_head(args) -> int:
    data = load_dataset(args.dataset or _workpath(args, "data"))
    g = build_cashew_net(args.width_mult, len(data.class_names),
                         head_units=args.head_units, dropout=args.dropout,
                         input_size=data.images.shape[1], seed=args.seed)
    feats = trainer.extract_features(g, data.images)

    n = len(data)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([args.seed, 9])))
    order = rng.permutation(n)
    n_val = int(n * args.val_fraction)
    val_idx, train_idx = order[:n_val], order[n_val:]

    cfg = TrainConfig(total_steps=args.steps, lr_max=args.lr_max,
                      weight_decay=args.weight_decay, clip_norm=args.clip_norm,
                      dropout_rate=args.dropout, batch_size=args.batch_size,
                      seed=args.seed)
    report = trainer.train_head(
        feats[train_idx], data.labels[train_idx], cfg,
        hidden_units=args.head_units,
        val_features=feats[val_idx] if n_val else None,
        val_labels=data.labels[val_idx] if n_val else None)

    g = trainer.apply_head_weights(g, report)
    g.meta["class_names"] = ",".join(data.class_names)
    save_model(g, _workpath(args, "model_float.cshw"))
    with open(_workpath(args, "train_report.tsv"), "w", encoding="utf-8") as f:
        f.write(report.to_tsv())
    val = f"{report.val_accuracy:.4f}" if report.val_accuracy is not None else "n/a"
    print(f"trained head on {len(train_idx)} images "
          f"({count_params(g)} params total); "
          f"train acc {report.train_accuracy:.4f}, val acc {val}")
    return 0


def cmd_calibrate(args) -> int:
    g = _load_required_model(args.model or _workpath(args, "model_float.cshw"),
                             "float model")
    data = load_dataset(args.dataset or _workpath(args, "data"))
    images = data.images[:args.limit] if args.limit else data.images
    stats = quantizer.calibrate(g, images)
    out = _workpath(args, "calibration.tsv")
    with open(out, "w", encoding="utf-8") as f:
        f.write(stats.to_tsv())
    print(f"calibrated over {stats.image_count} images -> {out}")
    return 0


def cmd_quantize(args) -> int:
    stats_path = args.stats or _workpath(args, "calibration.tsv")
    if not os.path.exists(stats_path):
        raise CashewEdgeError(f"missing calibration stats: {stats_path}")
    g = _load_required_model(args.model or _workpath(args, "model_float.cshw"),
                             "float model")
    with open(stats_path, encoding="utf-8") as f:
        stats = CalibrationStats.from_tsv(f.read())
    q = quantizer.quantize_model(g, stats)
    out = _workpath(args, "model_int8.cshw")
    save_model(q, out)
    float_bytes = os.path.getsize(_workpath(args, "model_float.cshw")) \
        if os.path.exists(_workpath(args, "model_float.cshw")) else None
    int8_bytes = os.path.getsize(out)
    note = ""
    if float_bytes:
        note = f" ({int8_bytes / float_bytes:.2%} of float size)"
    print(f"wrote {out}: {int8_bytes} bytes{note}")
    return 0


def _model_class_names(g) -> list[str]:
    names = g.meta.get("class_names")
    if names:
        return names.split(",")
    return [str(i) for i in range(g.num_classes)]


def cmd_infer(args) -> int:
    g = _load_required_model(args.model or _workpath(args, "model_int8.cshw"),
                             "model")
    x = Tensor(normalize_pixels(read_ppm(args.image)))
    from .graph import execute
    probs = execute(g, x).data
    names = _model_class_names(g)
    best = int(probs.argmax())
    pairs = ", ".join(f"{n}={p:.4f}" for n, p in zip(names, probs))
    print(f"{names[best]} ({pairs})")
    return 0


def cmd_eval(args) -> int:
    g = _load_required_model(args.model or _workpath(args, "model_int8.cshw"),
                             "model")
    data = load_dataset(args.dataset or _workpath(args, "data"))
    cm = evalbench.evaluate_model(g, data.images, data.labels, data.class_names)
    metrics = evalbench.classification_metrics(cm)
    lines = [f"samples\t{cm.total}", f"accuracy\t{cm.accuracy!r}", "", "confusion matrix (rows=true)"]
    lines.append("\t" + "\t".join(cm.class_names))
    for i, name in enumerate(cm.class_names):
        lines.append(name + "\t" + "\t".join(str(v) for v in cm.counts[i]))
    lines.append("")
    lines.append("class\tprecision\trecall\tf1")
    for i, name in enumerate(cm.class_names):
        lines.append(f"{name}\t{metrics.precision[i]!r}\t{metrics.recall[i]!r}"
                     f"\t{metrics.f1[i]!r}")
    text = "\n".join(lines) + "\n"
    with open(_workpath(args, "eval_report.txt"), "w", encoding="utf-8") as f:
        f.write(text)
    print(text, end="")
    return 0


def cmd_bench(args) -> int:
    reports = []
    accuracies = {}
    for name in ("model_float.cshw", "model_int8.cshw"):
        path = args.model or _workpath(args, name)
        if not os.path.exists(path):
            continue
        g = load_model(path)
        data_dir = args.dataset or _workpath(args, "data")
        image = None
        if os.path.exists(data_dir):
            data = load_dataset(data_dir)
            image = data.images[0]
            cm = evalbench.evaluate_model(g, data.images, data.labels,
                                          data.class_names)
            accuracies[g.mode] = cm.accuracy
        else:
            rng = np.random.Generator(np.random.PCG64(args.seed))
            image = rng.uniform(-1, 1, g.input_shape).astype(np.float32)
        reports.append(evalbench.benchmark(g, image, args.reps, args.warmup))
        if args.model:
            break
    if not reports:
        raise CashewEdgeError("no model files found to benchmark")
    table = evalbench.format_device_report(reports, accuracies)
    with open(_workpath(args, "bench_report.txt"), "w", encoding="utf-8") as f:
        f.write(table)
    with open(_workpath(args, "bench_report.tsv"), "w", encoding="utf-8") as f:
        f.write(evalbench.device_report_tsv(reports, accuracies))
    print(table, end="")
    return 0


def cmd_budget(args) -> int:
    g = _load_required_model(args.model or _workpath(args, "model_int8.cshw"),
                             "model")
    report = evalbench.benchmark(g, np.zeros(g.input_shape, np.float32),
                                 repetitions=1, warmup=0)
    check = evalbench.budget_check(report, args.flash_budget, args.ram_budget)
    print(f"flash: {report.model_bytes} / {args.flash_budget} bytes "
          f"({check.flash_margin_pct:+.1f}% margin) "
          f"{'ok' if check.flash_ok else 'OVER'}")
    print(f"ram:   {report.arena_bytes} / {args.ram_budget} bytes "
          f"({check.ram_margin_pct:+.1f}% margin) "
          f"{'ok' if check.ram_ok else 'OVER'}")
    if not check.passed:
        print("budget check failed", file=sys.stderr)
        return 1
    return 0


def cmd_plan_spray(args) -> int:
    with open(args.detections, encoding="utf-8") as f:
        records = spray.parse_detections(f.read())
    sw = tuple(float(v) for v in args.sw.split(","))
    ne = tuple(float(v) for v in args.ne.split(","))
    grid = spray.grid_from_bounds(sw, ne, args.cell_size)
    severity = spray.aggregate(records, grid)
    policy = spray.SprayPolicy(args.threshold, args.base_rate, args.max_rate)
    plan = spray.plan_spray(severity, policy)
    savings = spray.compare_uniform(plan, args.uniform_rate or args.max_rate)
    out = _workpath(args, "spray_plan.txt")
    with open(out, "w", encoding="utf-8") as f:
        f.write(spray.format_plan(plan))
    print(f"grid {grid.rows}x{grid.cols} ({grid.cell_size_m} m cells), "
          f"{len(records) - severity.out_of_bounds} records in bounds, "
          f"{severity.out_of_bounds} outside")
    print(f"variable plan {savings.variable_liters:.2f} L vs uniform "
          f"{savings.uniform_liters:.2f} L -> {savings.reduction:.1%} reduction")
    print(f"wrote {out}")
    return 0


def cmd_export_features(args) -> int:
    g = _load_required_model(args.model or _workpath(args, "model_float.cshw"),
                             "model")
    data = load_dataset(args.dataset or _workpath(args, "data"))
    out = args.out or _workpath(args, "features.tsv")
    evalbench.export_features(g, data.images, data.labels, out, data.class_names)
    print(f"wrote {out} ({len(data)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cashewedge",
        description="Edge-style leaf-disease pipeline: synth data, training, "
                    "int8 conversion, benchmarking, spray planning.")
    p.add_argument("--workdir", default=".", help="directory for all artifacts")
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-synth", help="generate the synthetic leaf dataset")
    sp.add_argument("--count", type=int, default=40, help="images per class")
    sp.add_argument("--image-size", type=int, default=96)
    sp.add_argument("--out", default=None, help="output directory (default workdir/data)")
    sp.set_defaults(func=cmd_gen_synth)

    sp = sub.add_parser("train-head", help="train the classifier head on frozen features")
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--width-mult", type=float, default=0.35)
    sp.add_argument("--head-units", type=int, default=16)
    sp.add_argument("--dropout", type=float, default=0.1)
    sp.add_argument("--steps", type=int, default=400)
    sp.add_argument("--lr-max", type=float, default=0.05)
    sp.add_argument("--weight-decay", type=float, default=1e-4)
    sp.add_argument("--clip-norm", type=float, default=1.0)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--val-fraction", type=float, default=0.2)
    sp.set_defaults(func=cmd_train_head)

    sp = sub.add_parser("calibrate", help="record activation ranges on the float model")
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--model", default=None)
    sp.add_argument("--limit", type=int, default=0, help="max calibration images (0 = all)")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("quantize", help="convert the float model to int8")
    sp.add_argument("--model", default=None)
    sp.add_argument("--stats", default=None)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("infer", help="classify one PPM image")
    sp.add_argument("image")
    sp.add_argument("--model", default=None)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="confusion matrix and F1 over a dataset")
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--model", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="latency / RAM / flash report per model")
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--model", default=None, help="benchmark only this model file")
    sp.add_argument("--reps", type=int, default=30)
    sp.add_argument("--warmup", type=int, default=3)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("budget", help="check flash/RAM budgets")
    sp.add_argument("--model", default=None)
    sp.add_argument("--flash-budget", type=int, default=DEFAULT_FLASH_BUDGET)
    sp.add_argument("--ram-budget", type=int, default=DEFAULT_RAM_BUDGET)
    sp.set_defaults(func=cmd_budget)

    sp = sub.add_parser("plan-spray", help="turn geo-tagged detections into a spray plan")
    sp.add_argument("detections", help="TSV: lat, lon, label, confidence")
    sp.add_argument("--sw", required=True, help="southwest corner lat,lon")
    sp.add_argument("--ne", required=True, help="northeast corner lat,lon")
    sp.add_argument("--cell-size", type=float, default=10.0)
    sp.add_argument("--threshold", type=float, default=0.2)
    sp.add_argument("--base-rate", type=float, default=2.0)
    sp.add_argument("--max-rate", type=float, default=6.0)
    sp.add_argument("--uniform-rate", type=float, default=None)
    sp.set_defaults(func=cmd_plan_spray)

    sp = sub.add_parser("export-features", help="dump penultimate features as TSV")
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--model", default=None)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_export_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CashewEdgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
