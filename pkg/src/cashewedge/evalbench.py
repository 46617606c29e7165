"""Classification metrics, feature export, and device-style benchmark reports.

Latency claims are ordinal (int8 vs float on the same host) and memory/size
claims are ratios: file size stands in for flash usage, the arena plan total
for peak RAM.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .graph import Executor, ModelGraph, plan_arena, serialize_model
from .tensors import Tensor
from .trainer import extract_features


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) int64, [true][predicted]
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    @property
    def row_rates(self) -> np.ndarray:
        """Row-normalized rates; rows with no samples stay all-zero."""
        totals = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, totals, where=totals > 0,
                         out=np.zeros_like(self.counts, dtype=np.float64))


def confusion_matrix(predictions, truths, class_names=None) -> ConfusionMatrix:
    """Count (true, predicted) pairs into a square matrix."""
    preds = np.asarray(predictions)
    trues = np.asarray(truths)
    if preds.shape != trues.shape or preds.ndim != 1:
        raise ContractError("predictions and truths must be equal-length 1-D")
    if preds.size == 0:
        raise ContractError("cannot build a confusion matrix from zero samples")
    k = int(max(preds.max(), trues.max())) + 1
    if class_names is None:
        class_names = tuple(str(i) for i in range(k))
    elif len(class_names) < k:
        raise ContractError("class_names shorter than observed label range")
    else:
        k = len(class_names)
    counts = np.zeros((k, k), np.int64)
    np.add.at(counts, (trues, preds), 1)
    return ConfusionMatrix(counts, tuple(class_names))


@dataclass(frozen=True)
class ClassMetrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float
    undefined_precision: np.ndarray  # per-class flag: no predicted samples
    undefined_recall: np.ndarray     # per-class flag: no true samples


def classification_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    """Per-class precision/recall/F1 and overall accuracy.

    Zero-denominator metrics are reported as 0 with the matching flag set.
    """
    if cm.total == 0:
        raise ContractError("confusion matrix has no samples")
    tp = np.diag(cm.counts).astype(np.float64)
    pred_totals = cm.counts.sum(axis=0).astype(np.float64)
    true_totals = cm.counts.sum(axis=1).astype(np.float64)
    undefined_p = pred_totals == 0
    undefined_r = true_totals == 0
    precision = np.divide(tp, pred_totals, where=~undefined_p,
                          out=np.zeros_like(tp))
    recall = np.divide(tp, true_totals, where=~undefined_r,
                       out=np.zeros_like(tp))
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, where=denom > 0,
                   out=np.zeros_like(tp))
    return ClassMetrics(precision, recall, f1, cm.accuracy, undefined_p, undefined_r)


def evaluate_model(g: ModelGraph, images, labels, class_names=None) -> ConfusionMatrix:
    """Run the graph over a labeled set and return its confusion matrix."""
    arr = np.asarray(images, dtype=np.float32)
    y = np.asarray(labels)
    if arr.shape[0] == 0:
        raise ContractError("evaluation dataset is empty")
    ex = Executor(g)
    preds = np.empty(arr.shape[0], np.int64)
    for i, img in enumerate(arr):
        preds[i] = int(ex.run(Tensor(img)).data.argmax())
    return confusion_matrix(preds, y, class_names)


def export_features(g: ModelGraph, images, labels, path, class_names=None) -> None:
    """Write one row per image (label, then the penultimate feature vector)."""
    feats = extract_features(g, images)
    y = np.asarray(labels)
    names = class_names or tuple(str(i) for i in range(int(y.max()) + 1))
    header = "label\t" + "\t".join(f"f{i:04d}" for i in range(feats.shape[1]))
    lines = [header]
    for label, row in zip(y, feats):
        lines.append(names[int(label)] + "\t" + "\t".join(repr(float(v)) for v in row))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class BenchReport:
    latencies_ms: tuple[float, ...]
    median_ms: float
    p90_ms: float
    model_bytes: int
    arena_bytes: int
    mode: str
    predicted_labels: tuple[int, ...]

    def __post_init__(self):
        if self.median_ms > self.p90_ms:
            raise ContractError("median latency cannot exceed p90")


def benchmark(g: ModelGraph, image, repetitions: int, warmup: int = 3) -> BenchReport:
    """Median/p90 latency over repeated single-image runs on a monotonic clock.

    Warmup runs (JIT, caches) are discarded.  Also reports the serialized
    model size and the arena plan total.
    """
    if repetitions < 1:
        raise ContractError("repetitions must be at least 1")
    if warmup < 0:
        raise ContractError("warmup must be non-negative")
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, np.float32))
    ex = Executor(g)
    for _ in range(warmup):
        ex.run(x)
    latencies = []
    labels = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        probs = ex.run(x)
        latencies.append((time.perf_counter_ns() - t0) / 1e6)
        labels.append(int(probs.data.argmax()))
    lat = np.array(latencies)
    return BenchReport(
        latencies_ms=tuple(latencies),
        median_ms=float(np.median(lat)),
        p90_ms=float(np.percentile(lat, 90, method="higher")),
        model_bytes=len(serialize_model(g)),
        arena_bytes=plan_arena(g).total_bytes,
        mode=g.mode,
        predicted_labels=tuple(labels),
    )


@dataclass(frozen=True)
class BudgetCheck:
    flash_ok: bool
    ram_ok: bool
    flash_margin_pct: float
    ram_margin_pct: float

    @property
    def passed(self) -> bool:
        return self.flash_ok and self.ram_ok


def budget_check(report: BenchReport, flash_budget: int, ram_budget: int) -> BudgetCheck:
    """Compare model bytes vs flash budget and arena bytes vs RAM budget.

    Margins are the unused fraction of each budget in percent (negative when
    over budget); sitting exactly on the budget passes.
    """
    if flash_budget <= 0 or ram_budget <= 0:
        raise ContractError("budgets must be positive")
    flash_margin = 100.0 * (flash_budget - report.model_bytes) / flash_budget
    ram_margin = 100.0 * (ram_budget - report.arena_bytes) / ram_budget
    return BudgetCheck(
        flash_ok=report.model_bytes <= flash_budget,
        ram_ok=report.arena_bytes <= ram_budget,
        flash_margin_pct=flash_margin,
        ram_margin_pct=ram_margin,
    )


def format_device_report(reports: list[BenchReport],
                         accuracies: dict[str, float] | None = None) -> str:
    """Text table of per-mode inferencing time, peak RAM, and flash usage."""
    header = ["Metric"] + [r.mode for r in reports]
    rows = [
        ["Inferencing Time (ms, median)"] + [f"{r.median_ms:.2f}" for r in reports],
        ["Peak RAM usage (bytes)"] + [str(r.arena_bytes) for r in reports],
        ["Flash Usage (bytes)"] + [str(r.model_bytes) for r in reports],
    ]
    if accuracies:
        rows.append(["Accuracy"] + [
            f"{accuracies[r.mode]:.4f}" if r.mode in accuracies else "-"
            for r in reports])
    widths = [max(len(row[i]) for row in [header] + rows)
              for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*row) for row in rows]
    return "\n".join(lines) + "\n"


def device_report_tsv(reports: list[BenchReport],
                      accuracies: dict[str, float] | None = None) -> str:
    """Machine-readable companion to format_device_report."""
    lines = ["mode\tmedian_ms\tp90_ms\tarena_bytes\tmodel_bytes\taccuracy"]
    for r in reports:
        acc = ""
        if accuracies and r.mode in accuracies:
            acc = repr(accuracies[r.mode])
        lines.append(f"{r.mode}\t{r.median_ms!r}\t{r.p90_ms!r}"
                     f"\t{r.arena_bytes}\t{r.model_bytes}\t{acc}")
    return "\n".join(lines) + "\n"
