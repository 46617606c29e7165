"""Post-training int8 conversion: calibration, parameter selection, comparison.

Calibration runs the float graph with activation tracing and records each
tensor's running min/max over the whole calibration set.  Conversion then
quantizes weights symmetrically (zero_point 0), activations asymmetrically
from the observed ranges, turns biases into int32 at in_scale * w_scale, and
precomputes each layer's requantization multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ContractError, ConversionError
from .graph import Executor, ModelGraph, lower_graph
from .tensors import (
    QuantParams,
    Tensor,
    compute_quant_params,
    quantize_array,
    round_half_away,
    to_fixed_point,
)

INT32_MIN = -(2 ** 31)
INT32_MAX = 2 ** 31 - 1


@dataclass
class CalibrationStats:
    """Running elementwise min/max per activation tensor."""

    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    image_count: int = 0

    def update(self, name: str, values: np.ndarray) -> None:
        lo = float(values.min())
        hi = float(values.max())
        if name in self.ranges:
            old_lo, old_hi = self.ranges[name]
            self.ranges[name] = (min(old_lo, lo), max(old_hi, hi))
        else:
            self.ranges[name] = (lo, hi)

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        """Combine stats from two disjoint image sets (order-independent)."""
        merged = CalibrationStats(dict(self.ranges), self.image_count + other.image_count)
        for name, (lo, hi) in other.ranges.items():
            merged.update(name, np.array([lo, hi]))
        return merged

    def to_tsv(self) -> str:
        lines = [f"{name}\t{lo!r}\t{hi!r}" for name, (lo, hi) in self.ranges.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str, image_count: int = 1) -> "CalibrationStats":
        ranges = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            name, lo, hi = line.split("\t")
            ranges[name] = (float(lo), float(hi))
        return cls(ranges, image_count)


@dataclass(frozen=True)
class AgreementReport:
    """Float-vs-int8 behavioural comparison over a labeled dataset."""

    agreement: float
    accuracy_float: float
    accuracy_int8: float
    class_accuracy_float: dict[int, float]
    class_accuracy_int8: dict[int, float]
    max_prob_deviation: float
    samples: int

    def __post_init__(self):
        for rate in (self.agreement, self.accuracy_float, self.accuracy_int8):
            if not 0.0 <= rate <= 1.0:
                raise ContractError(f"rate {rate} outside [0, 1]")


def _iter_images(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ContractError(f"expected (N, H, W, C) images, got shape {arr.shape}")
    return arr


def calibrate(g: ModelGraph, images) -> CalibrationStats:
    """Record per-activation min/max by tracing the float graph over images."""
    if g.mode != "float32":
        raise ContractError("calibration runs on the float32 graph")
    arr = _iter_images(images)
    if arr.shape[0] == 0:
        raise CalibrationError("calibration set is empty")
    stats = CalibrationStats()
    ex = Executor(g)
    for img in arr:
        ex.run(Tensor(img), stats_cb=stats.update)
        stats.image_count += 1
    return stats


def quantize_model(g: ModelGraph, stats: CalibrationStats) -> ModelGraph:
    """Convert a float32 graph into an int8 graph using calibration stats.

    The layer table and shapes are unchanged; weights become int8, biases
    int32 at in_scale * w_scale, activations get asymmetric QuantParams, and
    each weighted layer gets its requantization multiplier precomputed.
    """
    if g.mode != "float32":
        raise ContractError("quantize_model expects a float32 graph")
    if stats.image_count < 1:
        raise ConversionError("calibration stats cover no images")
    sched = lower_graph(g)

    act_qparams: dict[str, QuantParams] = {}

    def act_params(name: str) -> QuantParams:
        if name in act_qparams:
            return act_qparams[name]
        if name not in stats.ranges:
            raise ConversionError(f"missing calibration stats for tensor {name!r}")
        lo, hi = stats.ranges[name]
        p = compute_quant_params(lo, hi, "asymmetric")
        act_qparams[name] = p
        return p

    act_params("input")
    for step in sched.steps:
        buf = sched.buffers[step.output]
        if buf.float_always:
            continue
        if step.op == "gap":
            # pooling keeps its input's params (sums are divided back down)
            in_name = sched.buffers[step.inputs[0]].name
            act_qparams[step.name] = act_params(in_name)
        else:
            act_params(step.name)

    weights: dict[str, Tensor] = {}
    biases: dict[str, np.ndarray] = {}
    multipliers = {}
    for step in sched.steps:
        if step.weight is None:
            continue
        w = g.weights[f"{step.weight}.w"]
        wd = w.data
        bound = float(np.abs(wd).max())
        wp = compute_quant_params(-bound, bound, "symmetric")
        weights[f"{step.weight}.w"] = Tensor(quantize_array(wd, wp), wp)

        in_name = sched.buffers[step.inputs[0]].name
        in_scale = act_params(in_name).scale
        bias_scale = in_scale * wp.scale
        b = g.biases[f"{step.weight}.b"]
        bq = round_half_away(b.astype(np.float64) / bias_scale)
        biases[f"{step.weight}.b"] = np.clip(bq, INT32_MIN, INT32_MAX).astype(np.int32)

        out_scale = act_params(step.name).scale
        multipliers[step.name] = to_fixed_point(bias_scale / out_scale)

    return ModelGraph(
        input_shape=g.input_shape,
        layers=g.layers,
        weights=weights,
        biases=biases,
        mode="int8",
        act_qparams=act_qparams,
        multipliers=multipliers,
        meta=dict(g.meta),
    )


def _predictions(g: ModelGraph, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ex = Executor(g)
    probs = np.empty((images.shape[0], g.num_classes), np.float32)
    for i, img in enumerate(images):
        probs[i] = ex.run(Tensor(img)).data
    return probs.argmax(axis=1), probs


def _per_class_accuracy(preds, labels) -> dict[int, float]:
    out = {}
    for c in np.unique(labels):
        mask = labels == c
        out[int(c)] = float((preds[mask] == c).mean())
    return out


def compare_models(f: ModelGraph, q: ModelGraph, images, labels) -> AgreementReport:
    """Run both graphs over a labeled dataset and report agreement/accuracy."""
    if f.layers != q.layers or f.input_shape != q.input_shape:
        raise ContractError("graphs have different architectures")
    arr = _iter_images(images)
    labels = np.asarray(labels)
    if arr.shape[0] == 0:
        raise ContractError("comparison dataset is empty")
    if labels.shape[0] != arr.shape[0]:
        raise ContractError("labels length must match image count")

    pred_f, probs_f = _predictions(f, arr)
    pred_q, probs_q = _predictions(q, arr)
    return AgreementReport(
        agreement=float((pred_f == pred_q).mean()),
        accuracy_float=float((pred_f == labels).mean()),
        accuracy_int8=float((pred_q == labels).mean()),
        class_accuracy_float=_per_class_accuracy(pred_f, labels),
        class_accuracy_int8=_per_class_accuracy(pred_q, labels),
        max_prob_deviation=float(np.abs(probs_f - probs_q).max()),
        samples=int(arr.shape[0]),
    )
