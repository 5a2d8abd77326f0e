"""Model topology, fixed-point weight storage, and the inference engine.

Graphs are plain layer chains (conv2d / relu / maxpool / fullyconnected /
softmax). Weights and biases are signed fixed-point codes; activations travel
as unsigned master-format codes. Convolution and fully-connected accumulate
in 64-bit integers on raw codes and rescale back to the master format with
round-half-up, so a forward pass is a pure integer function of its inputs:
same input, same config, same scores, on any machine.

Activation quantization hooks sit right after each ReLU: the post-ReLU map is
quantized per the active config and immediately restored to master-format
codes before the next layer consumes it. Max-pool commutes with every scheme
(all are monotone), so pooling always runs on restored codes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fxcore import FxFormat, Tensor
from .quant import LayerQuantSpec, requantize_codes

WEIGHTED_KINDS = ("conv2d", "fullyconnected")
LAYER_KINDS = WEIGHTED_KINDS + ("relu", "maxpool", "softmax")

# accumulators must stay clear of int64 wraparound; checked per layer
_ACC_GUARD_BITS = 62


class ModelError(ValueError):
    """Malformed model file or graph: parse failures, dimension mismatches."""


class DatasetError(ValueError):
    """Malformed or empty dataset."""


@dataclass(frozen=True)
class FxTensor:
    """Signed or unsigned fixed-point codes for a weight/bias tensor."""

    codes: np.ndarray
    q_bits: int
    f_bits: int
    signed: bool = True

    def __post_init__(self):
        if not 1 <= self.q_bits <= 16:
            raise ValueError(f"q_bits must be in [1, 16], got {self.q_bits}")
        if not 0 <= self.f_bits <= 32:
            raise ValueError(f"f_bits must be in [0, 32], got {self.f_bits}")
        codes = np.asarray(self.codes, dtype=np.int64).copy()
        if self.signed:
            lo, hi = -(1 << (self.q_bits - 1)), (1 << (self.q_bits - 1)) - 1
        else:
            lo, hi = 0, (1 << self.q_bits) - 1
        if codes.size and (codes.min() < lo or codes.max() > hi):
            raise ValueError(
                f"codes outside [{lo}, {hi}] for {'signed' if self.signed else 'unsigned'} "
                f"{self.q_bits}-bit format"
            )
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)


@dataclass(frozen=True)
class LayerDef:
    name: str
    kind: str
    output_dims: tuple
    # conv2d
    kernel: tuple | None = None
    stride: int = 1
    padding: int = 0
    in_channels: int | None = None
    out_channels: int | None = None
    # fullyconnected
    in_features: int | None = None
    out_features: int | None = None
    # maxpool
    pool: tuple | None = None
    # conv2d / fullyconnected
    weights: FxTensor | None = None
    bias: FxTensor | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ModelError(f"layer '{self.name}': unknown kind '{self.kind}'")
        object.__setattr__(self, "output_dims", tuple(int(d) for d in self.output_dims))
        for fld in ("kernel", "pool"):
            val = getattr(self, fld)
            if val is not None:
                object.__setattr__(self, fld, tuple(int(v) for v in val))

    @property
    def is_weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple
    input_dims: tuple
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        _validate_graph(self)

    def layer(self, name: str) -> LayerDef:
        for lay in self.layers:
            if lay.name == name:
                return lay
        raise KeyError(f"no layer named '{name}'")

    def weighted_layers(self) -> list[str]:
        return [lay.name for lay in self.layers if lay.is_weighted]

    def quantizable_layers(self) -> list[str]:
        """Weighted layers whose immediate successor is a ReLU."""
        out = []
        for i, lay in enumerate(self.layers[:-1]):
            if lay.is_weighted and self.layers[i + 1].kind == "relu":
                out.append(lay.name)
        return out

    @property
    def n_classes(self) -> int:
        return int(np.prod(self.layers[-1].output_dims))

    @property
    def has_weights(self) -> bool:
        return all(
            lay.weights is not None for lay in self.layers if lay.is_weighted
        )


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0:
        return -1
    return span // stride + 1


def _validate_graph(g: ModelGraph) -> None:
    if not g.layers:
        raise ModelError("graph has no layers")
    if len(g.input_dims) != 3:
        raise ModelError(f"input_dims must be (H, W, C), got {g.input_dims}")
    names = [lay.name for lay in g.layers]
    if len(set(names)) != len(names):
        raise ModelError("duplicate layer names")
    dims = g.input_dims
    relus_since_weighted = 0
    seen_weighted = False
    for i, lay in enumerate(g.layers):
        if lay.kind == "conv2d":
            _check_conv(lay, dims)
            dims = lay.output_dims
            seen_weighted, relus_since_weighted = True, 0
        elif lay.kind == "fullyconnected":
            _check_fc(lay, dims)
            dims = lay.output_dims
            seen_weighted, relus_since_weighted = True, 0
        elif lay.kind == "relu":
            if lay.output_dims != tuple(dims):
                raise ModelError(f"layer '{lay.name}': relu must preserve dims")
            relus_since_weighted += 1
            if seen_weighted and relus_since_weighted > 1:
                raise ModelError(
                    f"layer '{lay.name}': more than one relu after a weighted layer"
                )
        elif lay.kind == "maxpool":
            if len(dims) != 3:
                raise ModelError(f"layer '{lay.name}': maxpool needs a (H, W, C) input")
            ph, pw = lay.pool
            ho = _conv_out(dims[0], ph, lay.stride, 0)
            wo = _conv_out(dims[1], pw, lay.stride, 0)
            want = (ho, wo, dims[2])
            if ho <= 0 or wo <= 0 or lay.output_dims != want:
                raise ModelError(
                    f"layer '{lay.name}': output dims {lay.output_dims} != expected {want}"
                )
            dims = lay.output_dims
        elif lay.kind == "softmax":
            if i != len(g.layers) - 1:
                raise ModelError(f"layer '{lay.name}': softmax must be the final layer")
            if lay.output_dims != tuple(dims):
                raise ModelError(f"layer '{lay.name}': softmax must preserve dims")


def _check_conv(lay: LayerDef, dims) -> None:
    if len(dims) != 3:
        raise ModelError(f"layer '{lay.name}': conv2d needs a (H, W, C) input")
    h, w, c = dims
    if lay.in_channels != c:
        raise ModelError(
            f"layer '{lay.name}': in_channels {lay.in_channels} != input channels {c}"
        )
    kh, kw = lay.kernel
    ho = _conv_out(h, kh, lay.stride, lay.padding)
    wo = _conv_out(w, kw, lay.stride, lay.padding)
    want = (ho, wo, lay.out_channels)
    if ho <= 0 or wo <= 0 or lay.output_dims != want:
        raise ModelError(
            f"layer '{lay.name}': output dims {lay.output_dims} != expected {want}"
        )
    if lay.weights is not None:
        wshape = (lay.out_channels, lay.in_channels, kh, kw)
        if lay.weights.codes.shape != wshape:
            raise ModelError(
                f"layer '{lay.name}': weight shape {lay.weights.codes.shape} != {wshape}"
            )
    if lay.bias is not None and lay.bias.codes.shape != (lay.out_channels,):
        raise ModelError(f"layer '{lay.name}': bias shape mismatch")


def _check_fc(lay: LayerDef, dims) -> None:
    flat = int(np.prod(dims))
    if lay.in_features != flat:
        raise ModelError(
            f"layer '{lay.name}': in_features {lay.in_features} != flattened input {flat}"
        )
    if lay.output_dims != (lay.out_features,):
        raise ModelError(
            f"layer '{lay.name}': output dims {lay.output_dims} != ({lay.out_features},)"
        )
    if lay.weights is not None:
        wshape = (lay.out_features, lay.in_features)
        if lay.weights.codes.shape != wshape:
            raise ModelError(
                f"layer '{lay.name}': weight shape {lay.weights.codes.shape} != {wshape}"
            )
    if lay.bias is not None and lay.bias.codes.shape != (lay.out_features,):
        raise ModelError(f"layer '{lay.name}': bias shape mismatch")


@dataclass(frozen=True)
class QuantConfig:
    """Per-layer quantization selection plus the master activation format."""

    specs: dict
    qm: FxFormat

    def validate(self, model: ModelGraph) -> None:
        quantizable = set(model.quantizable_layers())
        for name, spec in self.specs.items():
            if name not in quantizable:
                raise ModelError(
                    f"config targets layer '{name}' which is unknown or not followed by ReLU"
                )
            if spec.scheme == "enq" and spec.bits > self.qm.q_bits:
                raise ModelError(
                    f"layer '{name}': enq bits {spec.bits} exceed q_m {self.qm.q_bits}"
                )
            if spec.scheme == "uniform" and spec.bits <= self.qm.f_bits:
                raise ModelError(
                    f"layer '{name}': uniform bits {spec.bits} must exceed "
                    f"master f_bits {self.qm.f_bits}"
                )


# ---------------------------------------------------------------------------
# inference engine

def _rescale_to_master(acc, bias: FxTensor | None, f_a: int, f_w: int):
    """Exact integer rescale of an accumulator (+ bias) to master-format codes.

    acc carries scale 2^-(f_a+f_w); bias its own 2^-f_b. Everything is raised
    to a common denominator and rounded half-up in one shift.
    """
    f_b = bias.f_bits if bias is not None else 0
    d = max(f_a + f_w, f_b if bias is not None else 0, f_a)
    n = acc << (d - f_a - f_w)
    if bias is not None:
        n = n + (bias.codes.astype(np.int64) << (d - f_b))
    k = d - f_a
    if k == 0:
        return n
    return (n + (1 << (k - 1))) >> k  # arithmetic shift: floor, so floor(x+1/2)


def _guard_accumulator(lay: LayerDef, max_in: int, f_a: int) -> None:
    w = lay.weights
    if lay.kind == "conv2d":
        k_terms = lay.in_channels * lay.kernel[0] * lay.kernel[1]
    else:
        k_terms = lay.in_features
    wmax = int(np.abs(w.codes).max()) if w.codes.size else 0
    f_b = lay.bias.f_bits if lay.bias is not None else 0
    d = max(f_a + w.f_bits, f_b, f_a)
    bound = k_terms * max_in * wmax << (d - f_a - w.f_bits)
    if lay.bias is not None and lay.bias.codes.size:
        bound += int(np.abs(lay.bias.codes).max()) << (d - f_b)
    if bound >= (1 << _ACC_GUARD_BITS):
        raise ModelError(
            f"layer '{lay.name}': accumulator bound 2^{bound.bit_length()} "
            f"exceeds the 64-bit budget"
        )


def _conv2d(x, lay: LayerDef, f_a: int):
    w = lay.weights
    kh, kw = lay.kernel
    if lay.padding:
        p = lay.padding
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # (N, Ho', Wo', C, kh, kw)
    win = win[:, :: lay.stride, :: lay.stride]
    n, ho, wo = win.shape[:3]
    cols = win.reshape(n * ho * wo, -1)  # patch order (C, kh, kw)
    wmat = w.codes.reshape(lay.out_channels, -1).T  # weight order (C, kh, kw)
    acc = cols @ wmat
    acc = acc.reshape(n, ho, wo, lay.out_channels)
    return _rescale_to_master(acc, lay.bias, f_a, w.f_bits)


def _fullyconnected(x, lay: LayerDef, f_a: int):
    w = lay.weights
    flat = x.reshape(x.shape[0], -1)
    acc = flat @ w.codes.T
    return _rescale_to_master(acc, lay.bias, f_a, w.f_bits)


def _maxpool(x, lay: LayerDef):
    ph, pw = lay.pool
    win = sliding_window_view(x, (ph, pw), axis=(1, 2))
    win = win[:, :: lay.stride, :: lay.stride]
    return win.max(axis=(4, 5))


def _softmax(v):
    z = v - v.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_batch(model: ModelGraph, batch, cfg: QuantConfig, tap=None):
    """Run a batch of master-format code maps through the graph.

    ``batch`` has shape (N, H, W, C). Returns float64 class scores (N, n_classes).
    When ``tap`` is a dict it receives, per quantizable layer, the post-ReLU
    activation codes *before* quantization.
    """
    cfg.validate(model)
    if not model.has_weights:
        raise ModelError(f"model '{model.name}' carries no weight data")
    x = np.asarray(batch, dtype=np.int64)
    if x.shape[1:] != model.input_dims:
        raise ModelError(
            f"input dims {x.shape[1:]} != model input {model.input_dims}"
        )
    if x.size and x.min() < 0:
        raise ModelError("input codes must be non-negative")
    f_a = cfg.qm.f_bits
    last_weighted: LayerDef | None = None
    scores = None
    for lay in model.layers:
        if lay.is_weighted:
            _guard_accumulator(lay, int(np.abs(x).max()) if x.size else 0, f_a)
            x = _conv2d(x, lay, f_a) if lay.kind == "conv2d" else _fullyconnected(x, lay, f_a)
            last_weighted = lay
        elif lay.kind == "relu":
            x = np.maximum(x, 0)
            if last_weighted is not None:
                if tap is not None:
                    tap[last_weighted.name] = x.copy()
                spec: LayerQuantSpec | None = cfg.specs.get(last_weighted.name)
                if spec is not None:
                    x = requantize_codes(x, spec, cfg.qm)
            last_weighted = None
        elif lay.kind == "maxpool":
            x = _maxpool(x, lay)
        elif lay.kind == "softmax":
            scores = _softmax(x.reshape(x.shape[0], -1).astype(np.float64) * cfg.qm.scale)
    if scores is None:
        scores = x.reshape(x.shape[0], -1).astype(np.float64) * cfg.qm.scale
    return scores


def forward(model: ModelGraph, input_tensor, cfg: QuantConfig, tap=None):
    """Single-sample forward pass; returns the class-score vector."""
    if isinstance(input_tensor, Tensor):
        arr = np.asarray(input_tensor.values, dtype=np.int64)
    else:
        arr = np.asarray(input_tensor, dtype=np.int64)
    arr = arr.reshape(model.input_dims)
    return forward_batch(model, arr[None, ...], cfg, tap=tap)[0]


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray  # (N, H, W, C) int64 codes
    labels: np.ndarray  # (N,)
    names: tuple
    fmt: FxFormat

    @property
    def size(self) -> int:
        return int(self.labels.size)

    def subset(self, n: int) -> "LabeledDataset":
        n = min(n, self.size)
        return LabeledDataset(
            samples=self.samples[:n], labels=self.labels[:n],
            names=self.names[:n], fmt=self.fmt,
        )


def load_dataset(path, input_dims) -> LabeledDataset:
    """Read a dataset directory: labels.csv, format.json, one .bin per sample."""
    root = Path(path)
    labels_file = root / "labels.csv"
    if not labels_file.is_file():
        raise DatasetError(f"missing labels file {labels_file}")
    fmt_file = root / "format.json"
    if not fmt_file.is_file():
        raise DatasetError(f"missing format descriptor {fmt_file}")
    meta = json.loads(fmt_file.read_text())
    fmt = FxFormat(q_bits=int(meta["q_bits"]), f_bits=int(meta["f_bits"]))
    dims = tuple(int(d) for d in input_dims)
    count = int(np.prod(dims))
    names, labels, samples = [], [], []
    for line in labels_file.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fname, _, lab = line.partition(",")
        fname, lab = fname.strip(), lab.strip()
        if not fname or not lab:
            raise DatasetError(f"bad labels line: {line!r}")
        label = int(lab)
        if label < 0:
            raise DatasetError(f"negative label for {fname}")
        raw = (root / fname).read_bytes()
        if len(raw) != 2 * count:
            raise DatasetError(
                f"{fname}: expected {2 * count} bytes for dims {dims}, got {len(raw)}"
            )
        samples.append(np.frombuffer(raw, dtype="<u2").astype(np.int64).reshape(dims))
        names.append(fname)
        labels.append(label)
    if not names:
        raise DatasetError(f"no samples listed in {labels_file}")
    return LabeledDataset(
        samples=np.stack(samples), labels=np.asarray(labels, dtype=np.int64),
        names=tuple(names), fmt=fmt,
    )


_EVAL_CHUNK = 64  # bounds im2col scratch memory; chunking cannot change results


def evaluate(model: ModelGraph, dataset: LabeledDataset, cfg: QuantConfig, k: int = 1) -> float:
    """Top-k accuracy of the model under one quantization config."""
    if dataset.size == 0:
        raise DatasetError("empty dataset")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n_classes = model.n_classes
    if dataset.labels.max() >= n_classes:
        raise DatasetError(
            f"label {int(dataset.labels.max())} outside the model's {n_classes} classes"
        )
    hits = 0
    for lo in range(0, dataset.size, _EVAL_CHUNK):
        chunk = slice(lo, lo + _EVAL_CHUNK)
        scores = forward_batch(model, dataset.samples[chunk], cfg)
        topk = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        hits += int(np.sum(topk == dataset.labels[chunk, None]))
    return hits / dataset.size


# ---------------------------------------------------------------------------
# model files: JSON manifest + uint16 little-endian blob

def _tensor_from_blob(rec, blob, layer_name, field_name) -> FxTensor:
    dims = tuple(int(d) for d in rec["dims"])
    count = int(np.prod(dims))
    offset, nbytes = int(rec["offset"]), int(rec["bytes"])
    if nbytes != 2 * count:
        raise ModelError(
            f"layer '{layer_name}' {field_name}: bytes {nbytes} != 2*{count}"
        )
    if offset < 0 or offset + nbytes > len(blob):
        raise ModelError(f"layer '{layer_name}' {field_name}: blob slice out of range")
    raw = np.frombuffer(blob, dtype="<u2", count=count, offset=offset)
    signed = bool(rec.get("signed", True))
    codes = raw.view("<i2") if signed else raw
    return FxTensor(
        codes=codes.astype(np.int64).reshape(dims),
        q_bits=int(rec["q_bits"]), f_bits=int(rec["f_bits"]), signed=signed,
    )


def load_model(path) -> ModelGraph:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot parse model manifest {path}: {exc}") from exc
    if manifest.get("schema") != 1:
        raise ModelError(f"unsupported model schema {manifest.get('schema')!r}")
    blob = b""
    if manifest.get("blob"):
        blob = (path.parent / manifest["blob"]).read_bytes()
    layers = []
    for rec in manifest["layers"]:
        name, kind = rec["name"], rec["kind"]
        common = dict(name=name, kind=kind, output_dims=tuple(rec["output_dims"]))
        if kind == "conv2d":
            common.update(
                kernel=tuple(rec["kernel"]), stride=int(rec.get("stride", 1)),
                padding=int(rec.get("padding", 0)),
                in_channels=int(rec["in_channels"]), out_channels=int(rec["out_channels"]),
            )
        elif kind == "fullyconnected":
            common.update(
                in_features=int(rec["in_features"]), out_features=int(rec["out_features"]),
            )
        elif kind == "maxpool":
            common.update(pool=tuple(rec["pool"]), stride=int(rec.get("stride", 1)))
        if kind in WEIGHTED_KINDS:
            if "weights" in rec:
                common["weights"] = _tensor_from_blob(rec["weights"], blob, name, "weights")
            if "bias" in rec:
                common["bias"] = _tensor_from_blob(rec["bias"], blob, name, "bias")
        layers.append(LayerDef(**common))
    return ModelGraph(
        layers=tuple(layers),
        input_dims=tuple(manifest["input_dims"]),
        name=manifest.get("name", path.stem),
    )


def save_model(path, model: ModelGraph, blob_name: str | None = None) -> None:
    """Write the manifest and, when the graph carries weights, its blob."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks: list[bytes] = []
    offset = 0

    def pack(t: FxTensor) -> dict:
        nonlocal offset
        arr = t.codes.astype("<i2" if t.signed else "<u2")
        raw = arr.tobytes()
        rec = {
            "dims": list(t.codes.shape), "q_bits": t.q_bits, "f_bits": t.f_bits,
            "signed": t.signed, "offset": offset, "bytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
        return rec

    layers = []
    for lay in model.layers:
        rec: dict = {"name": lay.name, "kind": lay.kind, "output_dims": list(lay.output_dims)}
        if lay.kind == "conv2d":
            rec.update(
                kernel=list(lay.kernel), stride=lay.stride, padding=lay.padding,
                in_channels=lay.in_channels, out_channels=lay.out_channels,
            )
        elif lay.kind == "fullyconnected":
            rec.update(in_features=lay.in_features, out_features=lay.out_features)
        elif lay.kind == "maxpool":
            rec.update(pool=list(lay.pool), stride=lay.stride)
        if lay.weights is not None:
            rec["weights"] = pack(lay.weights)
        if lay.bias is not None:
            rec["bias"] = pack(lay.bias)
        layers.append(rec)
    manifest = {
        "schema": 1, "name": model.name, "input_dims": list(model.input_dims),
        "layers": layers,
    }
    if chunks:
        blob_name = blob_name or (path.stem + ".bin")
        manifest["blob"] = blob_name
        (path.parent / blob_name).write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
