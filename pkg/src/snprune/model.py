"""Feed-forward network representation, forward pass and model file format.

A model file is a directory holding ``manifest.json`` and ``tensors.bin``.
``tensors.bin`` is little-endian float32, row-major; conv kernels are stored in
(out_ch, in_ch, kH, kW) order.  The manifest looks like::

    {
      "format": "snprune-model",
      "format_version": 1,
      "dtype": "<f4",
      "input_shape": [64],
      "payload_bytes": 41000,
      "layers": [
        {"name": "fc0", "kind": "dense",
         "weight": {"shape": [128, 64], "byte_offset": 0},
         "bias": {"shape": [128], "byte_offset": 32768}},
        {"name": "act0", "kind": "relu"},
        {"name": "conv1", "kind": "conv2d", "stride": 1, "padding": 1,
         "weight": {...}, "bias": {...}},
        {"name": "flat", "kind": "flatten"}
      ]
    }

Weights live in memory as read-only float32 arrays so that saving and loading
is bit-exact; all arithmetic in the forward pass is float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, LoadError, ShapeError

FORMAT = "snprune-model"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "tensors.bin"
STORAGE_DTYPE = np.dtype("<f4")

WEIGHTED = ("dense", "conv2d")
ELEMENTWISE = ("relu", "identity")
KINDS = WEIGHTED + ELEMENTWISE + ("flatten",)


def _frozen(a) -> np.ndarray | None:
    if a is None:
        return None
    a = np.array(a, dtype=np.float32)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Layer:
    kind: str
    name: str = ""
    weight: np.ndarray | None = field(default=None, repr=False)
    bias: np.ndarray | None = field(default=None, repr=False)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.kind in WEIGHTED:
            want = 2 if self.kind == "dense" else 4
            if self.weight is None or self.weight.ndim != want:
                raise ShapeError(f"{self.kind} layer {self.name!r} needs a {want}-d weight")
            if self.bias is None:
                object.__setattr__(self, "bias", _frozen(np.zeros(self.weight.shape[0])))
            if self.bias.shape != (self.weight.shape[0],):
                raise ShapeError(
                    f"layer {self.name!r}: bias length {self.bias.shape} does not match "
                    f"{self.weight.shape[0]} outputs"
                )
            if self.stride < 1 or self.padding < 0:
                raise ShapeError(f"layer {self.name!r}: invalid stride/padding")

    @property
    def weighted(self) -> bool:
        return self.kind in WEIGHTED

    @property
    def n_in(self) -> int:
        """Number of prunable input units (features or channels)."""
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def output_shape(self, in_shape: tuple) -> tuple:
        if self.kind == "dense":
            if len(in_shape) != 1 or in_shape[0] != self.n_in:
                raise ShapeError(f"dense layer {self.name!r} expects ({self.n_in},), got {in_shape}")
            return (self.n_out,)
        if self.kind == "conv2d":
            if len(in_shape) != 3 or in_shape[0] != self.n_in:
                raise ShapeError(
                    f"conv2d layer {self.name!r} expects ({self.n_in}, H, W), got {in_shape}"
                )
            _, kh, kw = self.weight.shape[1:]
            h = (in_shape[1] + 2 * self.padding - kh) // self.stride + 1
            w = (in_shape[2] + 2 * self.padding - kw) // self.stride + 1
            if h < 1 or w < 1:
                raise ShapeError(f"conv2d layer {self.name!r}: kernel larger than input {in_shape}")
            return (self.n_out, h, w)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        return tuple(in_shape)


@dataclass(frozen=True)
class Network:
    layers: tuple
    input_shape: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        names = []
        for i, layer in enumerate(layers):
            if not layer.name:
                layer = replace(layer, name=f"{layer.kind}{i}")
            names.append(layer.name)
            layers = layers[:i] + (layer,) + layers[i + 1:]
        if len(set(names)) != len(names):
            raise ContractError("layer names must be unique")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        self.shapes()

    def shapes(self) -> list[tuple]:
        """Input shape of every layer followed by the network output shape."""
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {i}: {exc}") from exc
        return shapes

    @property
    def output_shape(self) -> tuple:
        return self.shapes()[-1]

    def weighted_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.weighted]

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def prune_sites(self) -> list[tuple[int, int]]:
        """(consumer, producer) index pairs whose shared units can be removed.

        A weighted layer's input units are prunable when they are produced by
        the previous weighted layer through element-wise layers only.  The
        first weighted layer (raw data) and layers behind a flatten are not.
        """
        sites = []
        producer = None
        for i, layer in enumerate(self.layers):
            if layer.weighted:
                if producer is not None:
                    sites.append((i, producer))
                producer = i
            elif layer.kind == "flatten":
                producer = None
        return sites

    def with_layers(self, layers) -> "Network":
        return Network(tuple(layers), self.input_shape)


def _conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, padding: int):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kh, kw = weight.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (N, C, Ho, Wo, kh, kw)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    return out.transpose(0, 3, 1, 2) + bias[None, :, None, None]


def input_features(layer: Layer, x: np.ndarray) -> np.ndarray:
    """A weighted layer's input as a units x samples matrix.

    Conv inputs contribute one sample per image and spatial position.
    """
    if layer.kind == "dense":
        return x.T
    return x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)


def forward(net: Network, batch, capture: bool = False):
    """Run ``batch`` (samples first) through ``net``.

    Returns the outputs, or ``(outputs, captures)`` when ``capture`` is set;
    ``captures`` maps each weighted layer's name to its input features.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"batch shape {x.shape[1:]} does not match input shape {net.input_shape}")
    captures = {} if capture else None
    for layer in net.layers:
        if layer.weighted and capture:
            captures[layer.name] = input_features(layer, x).copy()
        if layer.kind == "dense":
            x = x @ layer.weight.astype(np.float64).T + layer.bias
        elif layer.kind == "conv2d":
            x = _conv2d(x, layer.weight.astype(np.float64), layer.bias.astype(np.float64),
                        layer.stride, layer.padding)
        elif layer.kind == "relu":
            x = np.maximum(x, 0.0)
        elif layer.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
    if capture:
        return x, captures
    return x


def count_flops_params(net: Network) -> tuple[int, int]:
    """FLOPs per sample (multiply and add counted separately) and parameter count."""
    flops = params = 0
    shapes = net.shapes()
    for layer, out_shape in zip(net.layers, shapes[1:]):
        if layer.kind == "dense":
            flops += 2 * layer.n_in * layer.n_out
            params += layer.n_in * layer.n_out + layer.n_out
        elif layer.kind == "conv2d":
            _, kh, kw = layer.weight.shape[1:]
            flops += 2 * layer.n_in * kh * kw * layer.n_out * out_shape[1] * out_shape[2]
            params += layer.weight.size + layer.n_out
    return flops, params


def save_model(net: Network, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    chunks = []
    offset = 0

    def put(arr):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype=STORAGE_DTYPE).tobytes()
        entry = {"shape": list(arr.shape), "byte_offset": offset}
        chunks.append(data)
        offset += len(data)
        return entry

    layers = []
    for layer in net.layers:
        entry = {"name": layer.name, "kind": layer.kind}
        if layer.weighted:
            entry["weight"] = put(layer.weight)
            entry["bias"] = put(layer.bias)
        if layer.kind == "conv2d":
            entry["stride"] = layer.stride
            entry["padding"] = layer.padding
        layers.append(entry)
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "dtype": STORAGE_DTYPE.str,
        "input_shape": list(net.input_shape),
        "payload_bytes": offset,
        "layers": layers,
    }
    (path / PAYLOAD_NAME).write_bytes(b"".join(chunks))
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _read_tensor(payload: bytes, spec, where: str) -> np.ndarray:
    try:
        shape = tuple(int(d) for d in spec["shape"])
        start = int(spec["byte_offset"])
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"{where}: malformed tensor entry ({exc})") from exc
    if any(d < 0 for d in shape) or start < 0:
        raise LoadError(f"{where}: negative shape or offset")
    stop = start + int(np.prod(shape)) * STORAGE_DTYPE.itemsize
    if stop > len(payload):
        raise LoadError(f"{where}: tensor runs past end of payload ({stop} > {len(payload)} bytes)")
    return np.frombuffer(payload[start:stop], dtype=STORAGE_DTYPE).reshape(shape)


def load_model(path) -> Network:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
        payload = (path / PAYLOAD_NAME).read_bytes()
    except FileNotFoundError as exc:
        raise LoadError(f"model file incomplete: {exc.filename} not found") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"model manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise LoadError(f"not a model manifest: format={manifest.get('format')!r}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"unsupported model format_version {manifest.get('format_version')!r}")
    if manifest.get("dtype") != STORAGE_DTYPE.str:
        raise LoadError(f"unsupported tensor dtype {manifest.get('dtype')!r}")
    if manifest.get("payload_bytes") != len(payload):
        raise LoadError(
            f"payload length {len(payload)} does not match manifest payload_bytes "
            f"{manifest.get('payload_bytes')}"
        )
    entries = manifest.get("layers")
    if not entries:
        raise LoadError("model has no layers")
    layers = []
    for i, entry in enumerate(entries):
        where = f"layer {i}"
        try:
            kind = entry["kind"]
            kwargs = {"kind": kind, "name": entry.get("name", "")}
            if kind in WEIGHTED:
                kwargs["weight"] = _read_tensor(payload, entry["weight"], where + " weight")
                kwargs["bias"] = _read_tensor(payload, entry["bias"], where + " bias")
            if kind == "conv2d":
                kwargs["stride"] = int(entry.get("stride", 1))
                kwargs["padding"] = int(entry.get("padding", 0))
            layers.append(Layer(**kwargs))
        except LoadError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"{where}: {exc}") from exc
    try:
        return Network(tuple(layers), tuple(manifest["input_shape"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"model does not compose: {exc}") from exc


def dense_mlp(weights, biases=None, input_dim=None, activation="relu") -> Network:
    """Dense layers with ``activation`` between them (none after the last)."""
    layers = []
    biases = biases if biases is not None else [None] * len(weights)
    for k, (W, b) in enumerate(zip(weights, biases)):
        layers.append(Layer("dense", f"fc{k}", weight=W, bias=b))
        if k < len(weights) - 1:
            layers.append(Layer(activation, f"act{k}"))
    if input_dim is None:
        input_dim = np.asarray(weights[0]).shape[1]
    return Network(tuple(layers), (input_dim,))
