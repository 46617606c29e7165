"""Classifier-head training on frozen backbone features.

Only the small dense head is trained at desk scale: a hidden layer with relu6
and dropout, then the class logits.  The loop uses plain SGD with a one-cycle
learning-rate schedule, global-norm gradient clipping, and decoupled weight
decay, all in float64 so the analytic gradients can be checked against finite
differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, TrainingError
from .graph import Executor, ModelGraph, lower_graph
from .tensors import Tensor, dequantize_array


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    lr_max: float
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    pct_start: float = 0.3
    weight_decay: float = 0.0
    clip_norm: float | None = None
    dropout_rate: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ContractError("total_steps must be positive")
        if self.lr_max <= 0 or self.div_factor <= 0 or self.final_div_factor <= 0:
            raise ContractError("learning-rate parameters must be positive")
        if not 0.0 < self.pct_start < 1.0:
            raise ContractError("pct_start must lie strictly inside (0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ContractError("clip_norm must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError("dropout_rate must be in [0, 1)")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")


@dataclass
class TrainReport:
    losses: list[float]
    learning_rates: list[float]
    weights: dict[str, np.ndarray]  # hidden.w, hidden.b, logits.w, logits.b
    train_accuracy: float
    val_accuracy: float | None = None

    def to_tsv(self) -> str:
        lines = ["step\tlr\tloss"]
        for i, (lr, loss) in enumerate(zip(self.learning_rates, self.losses)):
            lines.append(f"{i}\t{lr!r}\t{loss!r}")
        return "\n".join(lines) + "\n"


def one_cycle_lr(step: int, cfg: TrainConfig) -> float:
    """Cosine warmup to lr_max, then cosine anneal far below the start.

    lr(0) = lr_max / div_factor, lr(peak) = lr_max and
    lr(total_steps) = lr_max / (div_factor * final_div_factor); the peak sits
    at round(pct_start * total_steps), clamped inside the schedule.
    """
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    lr_start = cfg.lr_max / cfg.div_factor
    lr_final = lr_start / cfg.final_div_factor
    peak = min(max(int(round(cfg.pct_start * cfg.total_steps)), 1),
               cfg.total_steps - 1) if cfg.total_steps > 1 else 1
    if step <= peak:
        t = step / peak
        return cfg.lr_max + (lr_start - cfg.lr_max) * 0.5 * (1.0 + math.cos(math.pi * t))
    t = (step - peak) / (cfg.total_steps - peak)
    return lr_final + (cfg.lr_max - lr_final) * 0.5 * (1.0 + math.cos(math.pi * t))


def clip_gradients(grads: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    """Scale a flat gradient vector so its L2 norm is at most max_norm.

    Returns the (possibly rescaled) gradients and the pre-clip norm.
    """
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    grads = np.asarray(grads, dtype=np.float64)
    if not np.isfinite(grads).all():
        raise TrainingError("non-finite gradient")
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm), norm
    return grads.copy(), norm


def extract_features(g: ModelGraph, images) -> np.ndarray:
    """Global-average-pool output per image (the penultimate representation)."""
    sched = lower_graph(g)
    gap_steps = [s for s in sched.steps if s.op == "gap"]
    if not gap_steps:
        raise ContractError("graph has no global average pool layer")
    gap_name = gap_steps[-1].name

    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[1:] != tuple(g.input_shape):
        raise ContractError(
            f"image shape {arr.shape[1:]} != graph input {tuple(g.input_shape)}")

    ex = Executor(g)
    feats = None

    for i, img in enumerate(arr):
        grabbed = {}

        def grab(name, view):
            if name == gap_name:
                grabbed["f"] = np.array(view).reshape(-1)

        ex.run(Tensor(img), stats_cb=grab)
        f = grabbed["f"]
        if g.mode == "int8":
            f = dequantize_array(f, g.act_qparams[gap_name])
        if feats is None:
            feats = np.empty((arr.shape[0], f.size), np.float32)
        feats[i] = f.astype(np.float32)
    return feats


# ---------------------------------------------------------------------------
# head forward/backward
# ---------------------------------------------------------------------------

def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def head_loss_and_grads(params: dict[str, np.ndarray], x: np.ndarray,
                        y: np.ndarray, dropout_mask: np.ndarray | None = None):
    """Cross-entropy loss and analytic gradients of the two-layer head.

    params holds float64 arrays hidden.w (F,H), hidden.b (H,), logits.w (H,C),
    logits.b (C,).  dropout_mask, when given, is the already-scaled inverted
    mask applied to the hidden activation.
    """
    w1, b1 = params["hidden.w"], params["hidden.b"]
    w2, b2 = params["logits.w"], params["logits.b"]
    n = x.shape[0]

    pre = x @ w1 + b1
    h = np.clip(pre, 0.0, 6.0)
    hd = h if dropout_mask is None else h * dropout_mask
    logits = hd @ w2 + b2
    p = _softmax_rows(logits)
    loss = float(-np.log(np.maximum(p[np.arange(n), y], 1e-300)).mean())

    dlogits = p.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = {
        "logits.w": hd.T @ dlogits,
        "logits.b": dlogits.sum(axis=0),
    }
    dhd = dlogits @ w2.T
    dh = dhd if dropout_mask is None else dhd * dropout_mask
    dpre = dh * ((pre > 0.0) & (pre < 6.0))
    grads["hidden.w"] = x.T @ dpre
    grads["hidden.b"] = dpre.sum(axis=0)
    return loss, grads


def _flatten(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.reshape(-1) for a in arrays])


def _unflatten(flat: np.ndarray, like: list[np.ndarray]) -> list[np.ndarray]:
    out, pos = [], 0
    for a in like:
        out.append(flat[pos:pos + a.size].reshape(a.shape))
        pos += a.size
    return out


_PARAM_ORDER = ("hidden.w", "hidden.b", "logits.w", "logits.b")


def train_head(features, labels, cfg: TrainConfig, hidden_units: int = 16,
               val_features=None, val_labels=None) -> TrainReport:
    """Train the dense head on frozen features; deterministic given cfg.seed.

    Per step: forward with a seeded dropout mask, backward, global-norm clip,
    then the update w <- w - lr*grad - lr*weight_decay*w (decay on weight
    matrices only), with the learning rate from one_cycle_lr.

    Features are centered per dimension and scaled by one global factor so
    relu6 units start in their active region regardless of the backbone's
    output scale; the affine map is folded back into the returned
    hidden-layer weights, which therefore apply to raw features.  A single
    scalar scale keeps the folded weight magnitudes uniform, which matters
    for later per-tensor weight quantization.
    """
    x_raw = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x_raw.ndim != 2 or x_raw.shape[0] != y.shape[0]:
        raise ContractError("features must be (N, F) with one label per row")
    if not np.isfinite(x_raw).all():
        raise TrainingError("non-finite feature values")
    classes = int(y.max()) + 1 if y.size else 0
    if np.unique(y).size < 2:
        raise TrainingError("training labels must contain at least two classes")

    mu = x_raw.mean(axis=0)
    centered = x_raw - mu
    scale = max(float(centered.std()), 1e-8)
    x = centered / scale

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    f_dim = x.shape[1]
    params = {
        "hidden.w": rng.normal(0.0, math.sqrt(2.0 / f_dim), (f_dim, hidden_units)),
        "hidden.b": np.zeros(hidden_units),
        "logits.w": rng.normal(0.0, math.sqrt(2.0 / hidden_units),
                               (hidden_units, classes)),
        "logits.b": np.zeros(classes),
    }

    order = rng.permutation(x.shape[0])
    cursor = 0
    losses, lrs = [], []
    batch = min(cfg.batch_size, x.shape[0])

    for step in range(cfg.total_steps):
        if cursor + batch > order.size:
            order = rng.permutation(x.shape[0])
            cursor = 0
        idx = order[cursor:cursor + batch]
        cursor += batch
        xb, yb = x[idx], y[idx]

        mask = None
        if cfg.dropout_rate > 0.0:
            keep = 1.0 - cfg.dropout_rate
            mask = (rng.random((batch, hidden_units)) < keep) / keep

        loss, grads = head_loss_and_grads(params, xb, yb, mask)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")

        flat = _flatten([grads[k] for k in _PARAM_ORDER])
        if cfg.clip_norm is not None:
            flat, _ = clip_gradients(flat, cfg.clip_norm)
        glist = _unflatten(flat, [params[k] for k in _PARAM_ORDER])

        lr = one_cycle_lr(step, cfg)
        for name, grad in zip(_PARAM_ORDER, glist):
            new = params[name] - lr * grad
            if name.endswith(".w") and cfg.weight_decay > 0.0:
                new = new - lr * cfg.weight_decay * params[name]
            params[name] = new
        losses.append(loss)
        lrs.append(lr)

    folded = dict(params)
    folded["hidden.w"] = params["hidden.w"] / scale
    folded["hidden.b"] = params["hidden.b"] - (mu / scale) @ params["hidden.w"]
    weights = {k: folded[k].astype(np.float32) for k in _PARAM_ORDER}
    train_acc = float((predict_head(folded, x_raw) == y).mean())
    val_acc = None
    if val_features is not None and val_labels is not None:
        xv = np.asarray(val_features, dtype=np.float64)
        val_acc = float((predict_head(folded, xv) == np.asarray(val_labels)).mean())
    return TrainReport(losses, lrs, weights, train_acc, val_acc)


def predict_head(params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Argmax predictions of the head (no dropout at inference)."""
    h = np.clip(x @ params["hidden.w"] + params["hidden.b"], 0.0, 6.0)
    return (h @ params["logits.w"] + params["logits.b"]).argmax(axis=1)


def apply_head_weights(g: ModelGraph, report: TrainReport) -> ModelGraph:
    """Install trained head weights into the graph's two dense layers."""
    dense = [layer for layer in g.layers if layer.kind == "dense"]
    if len(dense) != 2:
        raise ContractError("expected exactly two dense layers in the head")
    hidden, logits = dense
    weights = dict(g.weights)
    biases = dict(g.biases)
    weights[f"{hidden.name}.w"] = Tensor(report.weights["hidden.w"])
    biases[f"{hidden.name}.b"] = report.weights["hidden.b"]
    weights[f"{logits.name}.w"] = Tensor(report.weights["logits.w"])
    biases[f"{logits.name}.b"] = report.weights["logits.b"]
    out = ModelGraph(g.input_shape, g.layers, weights, biases, g.mode,
                     dict(g.act_qparams), dict(g.multipliers), dict(g.meta))
    lower_graph(out)
    return out
