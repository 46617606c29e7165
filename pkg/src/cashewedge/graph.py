"""Model graphs: builder, static arena planner, executor, and file format.

A ModelGraph is an ordered list of high-level layers plus a weight store.
Execution lowers the layers to a flat schedule of primitive steps whose
activation buffers live inside one preallocated arena; the arena offsets come
from a greedy lifetime-aware planner, and the arena total is the peak-RAM
estimate reported by the benchmark harness.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    BadMagicError,
    ContractError,
    ManifestMismatchError,
    ModelFormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .kernels import ConvAttrs
from .tensors import FixedPointMultiplier, QuantParams, Tensor, dequantize

MAGIC = b"CSHW"
FORMAT_VERSION = 1
BLOB_ALIGN = 16

# Inverted-residual stage table (expansion, channels, repeats, first stride)
# for the mobile architecture family this toolkit targets.
STAGE_TABLE = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)
STEM_CHANNELS = 32
HEAD_CHANNELS = 1280

# Parameter count reported for the full-scale (GPU-trained) reference model;
# recorded as metadata only, the desk-scale build is far smaller.
FULL_SCALE_REFERENCE_PARAMS = 6_589_734

LAYER_KINDS = ("conv", "depthwise_conv", "inverted_residual", "global_avg_pool",
               "dense", "dropout", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """One high-level layer; unused fields stay at their defaults."""

    kind: str
    name: str
    kernel: int = 0
    out_channels: int = 0
    stride: int = 1
    padding: str = "same"
    activation: str = "none"
    expansion: int = 0
    residual: bool = False
    units: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")


@dataclass
class ModelGraph:
    input_shape: tuple[int, int, int]  # (H, W, C)
    layers: tuple[LayerSpec, ...]
    weights: dict[str, Tensor]
    biases: dict[str, np.ndarray]
    mode: str = "float32"  # "float32" | "int8"
    act_qparams: dict[str, QuantParams] = field(default_factory=dict)
    multipliers: dict[str, FixedPointMultiplier] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        for layer in reversed(self.layers):
            if layer.kind == "dense":
                return layer.units
        raise ContractError("graph has no dense layer")


def make_divisible(value: float, divisor: int = 8) -> int:
    """Round a channel count to the nearest multiple of divisor, never below 90%."""
    new_v = max(divisor, int(value + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * value:
        new_v += divisor
    return new_v


# ---------------------------------------------------------------------------
# schedule lowering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Buffer:
    name: str
    shape: tuple[int, ...]
    float_always: bool = False  # dequantized logits / probabilities

    def nbytes(self, mode: str) -> int:
        itemsize = 4 if (mode == "float32" or self.float_always) else 1
        return int(np.prod(self.shape)) * itemsize


@dataclass(frozen=True)
class _Step:
    op: str  # conv | dwconv | dense | gap | add | dropout | dequant | softmax
    name: str
    inputs: tuple[int, ...]
    output: int
    layer_index: int
    weight: str | None = None
    attrs: ConvAttrs | None = None
    activation: str = "none"
    rate: float = 0.0


@dataclass(frozen=True)
class Schedule:
    steps: tuple[_Step, ...]
    buffers: tuple[_Buffer, ...]
    layer_outputs: tuple[int, ...]  # buffer index of each layer's final output


def _conv_out_shape(shape, kernel, stride, padding, out_channels):
    h, w, _ = shape
    attrs = ConvAttrs(stride=stride, padding=padding)
    oh, ow = kernels.conv_output_hw(h, w, kernel, kernel, attrs)
    return (oh, ow, out_channels)


def lower_graph(g: ModelGraph, require_weights: bool = True) -> Schedule:
    """Flatten high-level layers into primitive steps and activation buffers.

    Also validates that consecutive layer shapes chain correctly and (unless
    building) that every referenced weight tensor exists.
    """
    buffers: list[_Buffer] = [_Buffer("input", tuple(g.input_shape))]
    steps: list[_Step] = []
    layer_outputs: list[int] = []
    cur = 0  # current buffer index

    def emit(op, name, shape, inputs, layer_index, *, weight=None, attrs=None,
             activation="none", rate=0.0, float_always=False):
        buffers.append(_Buffer(name, shape, float_always))
        out = len(buffers) - 1
        steps.append(_Step(op, name, tuple(inputs), out, layer_index,
                           weight=weight, attrs=attrs, activation=activation,
                           rate=rate))
        return out

    for li, layer in enumerate(g.layers):
        shape = buffers[cur].shape
        if layer.kind == "conv":
            out_shape = _conv_out_shape(shape, layer.kernel, layer.stride,
                                        layer.padding, layer.out_channels)
            attrs = ConvAttrs(layer.stride, layer.padding, layer.activation)
            cur = emit("conv", layer.name, out_shape, (cur,), li,
                       weight=layer.name, attrs=attrs)
        elif layer.kind == "depthwise_conv":
            if layer.out_channels and layer.out_channels != shape[2]:
                raise ContractError(
                    f"{layer.name}: depthwise channels {layer.out_channels} "
                    f"!= input channels {shape[2]}")
            out_shape = _conv_out_shape(shape, layer.kernel, layer.stride,
                                        layer.padding, shape[2])
            attrs = ConvAttrs(layer.stride, layer.padding, layer.activation)
            cur = emit("dwconv", layer.name, out_shape, (cur,), li,
                       weight=layer.name, attrs=attrs)
        elif layer.kind == "inverted_residual":
            cin = shape[2]
            if layer.residual and not (layer.stride == 1 and cin == layer.out_channels):
                raise ContractError(
                    f"{layer.name}: residual requires stride 1 and matching channels")
            skip = cur
            hidden = cin * layer.expansion
            if layer.expansion > 1:
                cur = emit("conv", f"{layer.name}.expand",
                           (shape[0], shape[1], hidden), (cur,), li,
                           weight=f"{layer.name}.expand",
                           attrs=ConvAttrs(1, "valid", "relu6"))
            dw_shape = _conv_out_shape(buffers[cur].shape, 3, layer.stride,
                                       "same", hidden)
            cur = emit("dwconv", f"{layer.name}.dw", dw_shape, (cur,), li,
                       weight=f"{layer.name}.dw",
                       attrs=ConvAttrs(layer.stride, "same", "relu6"))
            proj_shape = (dw_shape[0], dw_shape[1], layer.out_channels)
            cur = emit("conv", f"{layer.name}.project", proj_shape, (cur,), li,
                       weight=f"{layer.name}.project",
                       attrs=ConvAttrs(1, "valid", "none"))
            if layer.residual:
                cur = emit("add", f"{layer.name}.add", proj_shape, (cur, skip), li)
        elif layer.kind == "global_avg_pool":
            cur = emit("gap", layer.name, (1, 1, shape[2]), (cur,), li)
        elif layer.kind == "dense":
            features = int(np.prod(shape))
            w = g.weights.get(f"{layer.name}.w")
            if w is not None and w.shape[0] != features:
                raise ContractError(
                    f"{layer.name}: weight rows {w.shape[0]} != input size {features}")
            cur = emit("dense", layer.name, (layer.units,), (cur,), li,
                       weight=layer.name, activation=layer.activation)
        elif layer.kind == "dropout":
            before = g.layers[li - 1].kind if li > 0 else None
            after = g.layers[li + 1].kind if li + 1 < len(g.layers) else None
            if before != "dense" or after != "dense":
                raise ContractError("dropout must sit between dense layers")
            # identity at inference: alias the input buffer
            steps.append(_Step("dropout", layer.name, (cur,), cur, li,
                               rate=layer.rate))
        elif layer.kind == "softmax":
            if len(shape) != 1:
                raise ContractError("softmax requires a 1-D input")
            if g.mode == "int8":
                cur = emit("dequant", f"{layer.name}.dequant", shape, (cur,), li,
                           float_always=True)
            cur = emit("softmax", layer.name, shape, (cur,), li,
                       float_always=True)
        layer_outputs.append(cur)

    if require_weights:
        for name in (f"{s.weight}.w" for s in steps if s.weight):
            if name not in g.weights:
                raise ContractError(f"missing weight tensor {name}")
    return Schedule(tuple(steps), tuple(buffers), tuple(layer_outputs))


def activation_names(g: ModelGraph) -> list[str]:
    """Names of every activation tensor in execution order ('input' first)."""
    sched = lower_graph(g)
    return ["input"] + [s.name for s in sched.steps]


# ---------------------------------------------------------------------------
# builder
# ---------------------------------------------------------------------------

def _init_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _truncated_normal(rng, shape, std):
    return np.clip(rng.normal(0.0, std, shape), -2 * std, 2 * std).astype(np.float32)


# Frozen-backbone init.  Each conv channel's weights sum to exactly 1 (or 0
# for the branch that re-enters a residual add), so the layer's DC gain is
# pinned and global image statistics survive to the pooled features without
# any training; the stem bias lifts the [-1, 1] input into relu6's active
# region.  The zero-mean component supplies per-channel texture diversity.
INIT_WEIGHT_GAIN = 0.25
INIT_STEM_BIAS = 0.5


def _conv_init(rng, shape, fan_in, dc_gain):
    raw = _truncated_normal(rng, shape, INIT_WEIGHT_GAIN * np.sqrt(2.0 / fan_in))
    raw -= raw.mean(axis=(0, 1, 2), keepdims=True)
    return (raw + np.float32(dc_gain / fan_in)).astype(np.float32)


def build_cashew_net(width_multiplier: float, num_classes: int,
                     head_units: int = 16, dropout: float = 0.1,
                     input_size: int = 96, seed: int = 0) -> ModelGraph:
    """Build the float32 leaf-disease classifier, randomly initialized from seed.

    Stem conv (stride 2), the scaled inverted-residual stages, a 1x1 feature
    conv, global average pooling, a small dense head with dropout, and softmax.
    Channel counts are width-scaled and rounded to multiples of 8.
    """
    if not 0.0 < width_multiplier <= 1.0:
        raise ContractError(f"width_multiplier must be in (0, 1], got {width_multiplier}")
    if num_classes < 2:
        raise ContractError(f"num_classes must be >= 2, got {num_classes}")
    if head_units < 1:
        raise ContractError("head_units must be positive")
    if not 0.0 <= dropout < 1.0:
        raise ContractError(f"dropout must be in [0, 1), got {dropout}")
    if input_size < 32:
        raise ContractError("input_size must be at least 32")
    if seed < 0:
        raise ContractError("seed must be non-negative")

    layers: list[LayerSpec] = []
    stem = make_divisible(STEM_CHANNELS * width_multiplier)
    layers.append(LayerSpec("conv", "stem", kernel=3, out_channels=stem,
                            stride=2, padding="same", activation="relu6"))
    cin = stem
    block = 0
    for t, c, n, s in STAGE_TABLE:
        cout = make_divisible(c * width_multiplier)
        for i in range(n):
            stride = s if i == 0 else 1
            layers.append(LayerSpec(
                "inverted_residual", f"block{block:02d}",
                out_channels=cout, stride=stride, expansion=t,
                residual=(stride == 1 and cin == cout)))
            cin = cout
            block += 1
    head_c = make_divisible(HEAD_CHANNELS * max(1.0, width_multiplier))
    layers.append(LayerSpec("conv", "features", kernel=1, out_channels=head_c,
                            stride=1, padding="valid", activation="relu6"))
    layers.append(LayerSpec("global_avg_pool", "pool"))
    layers.append(LayerSpec("dense", "hidden", units=head_units, activation="relu6"))
    layers.append(LayerSpec("dropout", "drop", rate=dropout))
    layers.append(LayerSpec("dense", "logits", units=num_classes))
    layers.append(LayerSpec("softmax", "probs"))

    g = ModelGraph(
        input_shape=(input_size, input_size, 3),
        layers=tuple(layers),
        weights={},
        biases={},
        meta={
            "arch": f"cashew-net-w{width_multiplier:g}",
            "width_multiplier": repr(float(width_multiplier)),
            "normalization": "(x/127.5)-1",
            "seed": str(seed),
            "full_scale_reference_params": str(FULL_SCALE_REFERENCE_PARAMS),
        },
    )
    _initialize_weights(g, seed)
    lower_graph(g)  # validates shape chaining
    return g


def _initialize_weights(g: ModelGraph, seed: int) -> None:
    sched = lower_graph(g, require_weights=False)
    residual_projects = {f"{layer.name}.project" for layer in g.layers
                         if layer.kind == "inverted_residual" and layer.residual}
    index = 0
    for step in sched.steps:
        if step.weight is None:
            continue
        in_shape = sched.buffers[step.inputs[0]].shape
        out_shape = sched.buffers[step.output].shape
        rng = _init_rng(seed, index)
        bias = 0.0
        if step.op == "conv":
            layer = g.layers[step.layer_index]
            k = layer.kernel if step.name == layer.name else (
                1 if step.name.endswith((".expand", ".project")) else 3)
            cin, cout = in_shape[2], out_shape[2]
            dc = 0.0 if step.name in residual_projects else 1.0
            w = _conv_init(rng, (k, k, cin, cout), k * k * cin, dc)
            if step.layer_index == 0:
                bias = INIT_STEM_BIAS
        elif step.op == "dwconv":
            c = in_shape[2]
            w = _conv_init(rng, (3, 3, 1, c), 9, 1.0)
        elif step.op == "dense":
            fan_in = int(np.prod(in_shape))
            w = _truncated_normal(rng, (fan_in, out_shape[0]),
                                  np.sqrt(2.0 / fan_in))
        g.weights[f"{step.weight}.w"] = Tensor(w)
        g.biases[f"{step.weight}.b"] = np.full(w.shape[-1], bias, np.float32)
        index += 1


def count_params(g: ModelGraph) -> int:
    """Total number of weight and bias elements."""
    total = sum(t.data.size for t in g.weights.values())
    total += sum(b.size for b in g.biases.values())
    return int(total)


# ---------------------------------------------------------------------------
# arena planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArenaPlan:
    offsets: dict[str, tuple[int, int]]  # buffer name -> (offset, length)
    total_bytes: int


def assign_offsets(buffers: list[tuple[int, int, int]]) -> tuple[list[int], int]:
    """Greedy first-fit offsets for (size, birth, last_use) buffers.

    Buffers are placed in decreasing size order (index order on ties); each
    goes at the lowest offset that avoids every already-placed buffer whose
    lifetime interval overlaps.  Returns per-buffer offsets and the arena total.
    """
    order = sorted(range(len(buffers)), key=lambda i: (-buffers[i][0], i))
    placed: list[tuple[int, int, int, int]] = []  # (offset, size, birth, last)
    offsets = [0] * len(buffers)
    total = 0
    for i in order:
        size, birth, last = buffers[i]
        conflicts = sorted((p for p in placed
                            if not (p[3] < birth or last < p[2])))
        candidates = [0] + [off + sz for off, sz, _, _ in conflicts]
        offset = None
        for c in sorted(candidates):
            if all(c + size <= off or off + sz <= c for off, sz, _, _ in conflicts):
                offset = c
                break
        offsets[i] = offset
        placed.append((offset, size, birth, last))
        total = max(total, offset + size)
    return offsets, total


def buffer_lifetimes(sched: Schedule, mode: str) -> list[tuple[int, int, int]]:
    """Per-buffer (nbytes, birth step, last step) from the execution schedule.

    The input buffer is born before step 0; a buffer is live while it is
    written and until its final read (skip inputs stay live across a block).
    """
    n = len(sched.buffers)
    birth: list[int | None] = [None] * n
    last: list[int] = [0] * n
    birth[0] = -1
    for si, step in enumerate(sched.steps):
        for b in step.inputs:
            last[b] = si
        if birth[step.output] is None:
            birth[step.output] = si
        last[step.output] = max(last[step.output], si)
    return [(buf.nbytes(mode), birth[i], last[i])
            for i, buf in enumerate(sched.buffers)]


def plan_arena(g: ModelGraph) -> ArenaPlan:
    """Lifetime analysis plus greedy offset assignment for all activations."""
    sched = lower_graph(g)
    lifetimes = buffer_lifetimes(sched, g.mode)
    offsets, total = assign_offsets(lifetimes)
    table = {buf.name: (offsets[i], lifetimes[i][0])
             for i, buf in enumerate(sched.buffers)}
    return ArenaPlan(table, total)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

class Executor:
    """Runs a graph over single images inside one planned arena buffer.

    One executor owns one arena and is single-threaded; build several to run
    concurrently.  The graph itself is shared and never mutated.
    """

    def __init__(self, g: ModelGraph):
        self.graph = g
        self.schedule = lower_graph(g)
        self.plan = plan_arena(g)
        self._arena = np.zeros(self.plan.total_bytes, np.uint8)
        self._views: list[np.ndarray] = []
        for buf in self.schedule.buffers:
            off, length = self.plan.offsets[buf.name]
            raw = self._arena[off:off + length]
            dtype = np.float32 if (g.mode == "float32" or buf.float_always) else np.int8
            self._views.append(raw.view(dtype).reshape(buf.shape))
        if g.mode == "int8":
            for buf in self.schedule.buffers:
                if not buf.float_always and buf.name not in g.act_qparams:
                    raise ContractError(
                        f"int8 graph lacks QuantParams for {buf.name!r}")

    def _check_input(self, x: Tensor) -> np.ndarray:
        if x.is_quantized:
            raise ContractError("executor input must be a float tensor")
        data = x.data
        if data.shape == (1,) + tuple(self.graph.input_shape):
            data = data[0]
        if data.shape != tuple(self.graph.input_shape):
            raise ContractError(
                f"input shape {data.shape} != {tuple(self.graph.input_shape)}")
        if data.min() < -1.000001 or data.max() > 1.000001:
            raise ContractError("input values must lie in [-1, 1]")
        return data

    def run(self, x: Tensor, stats_cb=None) -> Tensor:
        """Execute and return class probabilities; stats_cb sees every step."""
        g = self.graph
        data = self._check_input(x)
        if g.mode == "int8":
            kernels.quantize_input(data, g.act_qparams["input"], self._views[0])
        else:
            self._views[0][...] = data
        if stats_cb is not None:
            stats_cb("input", self._views[0])

        quantized = g.mode == "int8"
        for step in self.schedule.steps:
            out_view = self._views[step.output]
            ins = [self._views[b] for b in step.inputs]
            if step.op in ("conv", "dwconv"):
                xt = self._step_tensor(step.inputs[0])
                w = g.weights[f"{step.weight}.w"]
                b = g.biases[f"{step.weight}.b"]
                op = kernels.conv2d if step.op == "conv" else kernels.depthwise_conv2d
                op(Tensor(xt.data[None], xt.qparams), w, b, step.attrs,
                   out_params=g.act_qparams.get(step.name),
                   multiplier=g.multipliers.get(step.name),
                   out=out_view[None])
            elif step.op == "dense":
                xt = self._step_tensor(step.inputs[0], flat=True)
                w = g.weights[f"{step.weight}.w"]
                b = g.biases[f"{step.weight}.b"]
                kernels.fully_connected(xt, w, b, step.activation,
                                        out_params=g.act_qparams.get(step.name),
                                        multiplier=g.multipliers.get(step.name),
                                        out=out_view)
            elif step.op == "gap":
                xt = self._step_tensor(step.inputs[0])
                kernels.global_avg_pool(Tensor(xt.data[None], xt.qparams),
                                        out=out_view[None])
            elif step.op == "add":
                a = self._step_tensor(step.inputs[0])
                bt = self._step_tensor(step.inputs[1])
                kernels.residual_add(a, bt, out_params=g.act_qparams.get(step.name),
                                     out=out_view)
            elif step.op == "dropout":
                if not 0.0 <= step.rate < 1.0:
                    raise ContractError("dropout rate out of range")
            elif step.op == "dequant":
                out_view[...] = dequantize(self._step_tensor(step.inputs[0])).data
            elif step.op == "softmax":
                out_view[...] = kernels.softmax(Tensor(np.array(ins[0]))).data
            if stats_cb is not None:
                stats_cb(step.name, out_view)
        final = self._step_tensor(self.schedule.steps[-1].output)
        return Tensor(final.data.copy(), final.qparams)

    def _step_tensor(self, buf_index: int, flat: bool = False) -> Tensor:
        buf = self.schedule.buffers[buf_index]
        view = self._views[buf_index]
        if flat:
            view = view.reshape(-1)
        if self.graph.mode == "int8" and not buf.float_always:
            name = "input" if buf_index == 0 else buf.name
            return Tensor(view, self.graph.act_qparams[name])
        return Tensor(view)

    def run_traced(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Execute and also return a copy of each layer's output activation.

        Later layers overwrite earlier buffers inside the arena, so the copies
        are taken step by step during the run.
        """
        captured: dict[str, Tensor] = {}
        step_names = {s.name for s in self.schedule.steps}

        def grab(name, view):
            if name in step_names or name == "input":
                buf_index = 0 if name == "input" else next(
                    s.output for s in self.schedule.steps if s.name == name)
                t = self._step_tensor(buf_index)
                captured[name] = Tensor(t.data.copy(), t.qparams)

        probs = self.run(x, stats_cb=grab)
        traced = []
        for buf_index in self.schedule.layer_outputs:
            name = self.schedule.buffers[buf_index].name
            traced.append(captured[name])
        return probs, traced


def execute(g: ModelGraph, x: Tensor, trace: bool = False):
    """One-shot execution; returns probabilities, plus per-layer activations
    when trace is set."""
    ex = Executor(g)
    if trace:
        return ex.run_traced(x)
    return ex.run(x)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_DTYPE_TAGS = {"<f4": np.float32, "<i1": np.int8, "<i4": np.int32}


def _dtype_tag(a: np.ndarray) -> str:
    for tag, dt in _DTYPE_TAGS.items():
        if a.dtype == dt:
            return tag
    raise ContractError(f"unsupported blob dtype {a.dtype}")


def _qp_json(p: QuantParams) -> dict:
    return {"scale": repr(p.scale), "zero_point": p.zero_point}


def _qp_from_json(d: dict) -> QuantParams:
    return QuantParams(float(d["scale"]), int(d["zero_point"]))


def serialize_model(g: ModelGraph) -> bytes:
    """Encode a graph into the model file format (see load_model)."""
    blobs: list[bytes] = []
    entries = []
    offset = 0

    def add_blob(name, array, qparams=None):
        nonlocal offset
        raw = np.ascontiguousarray(array).astype(array.dtype.newbyteorder("<"),
                                                 copy=False).tobytes()
        pad = (-offset) % BLOB_ALIGN
        if pad:
            blobs.append(b"\0" * pad)
            offset += pad
        entry = {"name": name, "dtype": _dtype_tag(array),
                 "shape": list(array.shape), "offset": offset, "length": len(raw)}
        if qparams is not None:
            entry["qparams"] = _qp_json(qparams)
        entries.append(entry)
        blobs.append(raw)
        offset += len(raw)

    for name in sorted(g.weights):
        t = g.weights[name]
        add_blob(name, t.data, t.qparams)
    for name in sorted(g.biases):
        add_blob(name, g.biases[name])

    manifest = {
        "input_shape": list(g.input_shape),
        "mode": g.mode,
        "layers": [
            {k: v for k, v in vars(layer).items()} for layer in g.layers
        ],
        "blobs": entries,
        "act_qparams": {k: _qp_json(v) for k, v in sorted(g.act_qparams.items())},
        "multipliers": {k: {"mantissa": m.mantissa, "exponent": m.exponent}
                        for k, m in sorted(g.multipliers.items())},
        "meta": dict(sorted(g.meta.items())),
    }
    mbytes = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    header = MAGIC + bytes([FORMAT_VERSION]) + struct.pack("<I", len(mbytes))
    return header + mbytes + b"".join(blobs)


def deserialize_model(data: bytes) -> ModelGraph:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("bad magic: not a model file")
    if len(data) < 5:
        raise TruncatedFileError("file ends before version byte")
    version = data[4]
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    if len(data) < 9:
        raise TruncatedFileError("file ends before manifest length")
    (mlen,) = struct.unpack("<I", data[5:9])
    if len(data) < 9 + mlen:
        raise TruncatedFileError("file ends inside the manifest")
    try:
        manifest = json.loads(data[9:9 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"corrupt manifest: {e}") from None
    blob_base = 9 + mlen

    weights: dict[str, Tensor] = {}
    biases: dict[str, np.ndarray] = {}
    for entry in manifest["blobs"]:
        start = blob_base + entry["offset"]
        end = start + entry["length"]
        if end > len(data):
            raise TruncatedFileError(f"blob {entry['name']} extends past end of file")
        dtype = _DTYPE_TAGS.get(entry["dtype"])
        if dtype is None:
            raise ModelFormatError(f"unknown blob dtype {entry['dtype']}")
        expected = int(np.prod(entry["shape"])) * np.dtype(dtype).itemsize
        if expected != entry["length"]:
            raise ManifestMismatchError(
                f"blob {entry['name']}: manifest length {entry['length']} "
                f"!= shape-implied {expected}")
        array = np.frombuffer(data[start:end], dtype=np.dtype(dtype).newbyteorder("<"))
        array = array.astype(dtype).reshape(entry["shape"])
        if entry["name"].endswith(".b"):
            biases[entry["name"]] = array
        else:
            qp = _qp_from_json(entry["qparams"]) if "qparams" in entry else None
            weights[entry["name"]] = Tensor(array, qp)

    layers = tuple(LayerSpec(**spec) for spec in manifest["layers"])
    g = ModelGraph(
        input_shape=tuple(manifest["input_shape"]),
        layers=layers,
        weights=weights,
        biases=biases,
        mode=manifest["mode"],
        act_qparams={k: _qp_from_json(v)
                     for k, v in manifest["act_qparams"].items()},
        multipliers={k: FixedPointMultiplier(v["mantissa"], v["exponent"])
                     for k, v in manifest["multipliers"].items()},
        meta=manifest.get("meta", {}),
    )
    lower_graph(g)  # validate chaining
    return g


def save_model(g: ModelGraph, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_model(g))


def load_model(path) -> ModelGraph:
    with open(path, "rb") as f:
        return deserialize_model(f.read())
