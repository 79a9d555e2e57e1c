"""Datasets, calibration sampling and accuracy measurement."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError, ShapeError
from .model import Network, forward
from .report import LayerRecord, PruneReport, emit_report, read_report  # noqa: F401

# IDX type byte -> (numpy big-endian dtype)
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "test"
    num_classes: int | None = None

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            )
        if self.num_classes is not None and self.labels.size:
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ContractError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


def read_idx(path) -> np.ndarray:
    """Parse one IDX file into an array of its declared type and shape."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ParseError(f"{path}: byte 0: file too short for an IDX header")
    zero, type_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or type_code not in _IDX_TYPES:
        raise ParseError(f"{path}: byte 0: bad IDX magic 0x{int.from_bytes(data[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError(f"{path}: byte 4: header declares {ndim} dims but file ends at {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = _IDX_TYPES[type_code]
    count = 1
    for d in dims:
        count *= d
    need = header + count * dtype.itemsize
    if need > len(data):
        raise ParseError(
            f"{path}: byte {len(data)}: dims {dims} need {need} bytes, file has {len(data)}"
        )
    if need < len(data):
        raise ParseError(f"{path}: byte {need}: {len(data) - need} trailing bytes after payload")
    return np.frombuffer(data, dtype=dtype, count=count, offset=header).reshape(dims)


def write_idx(path, array) -> Path:
    array = np.asarray(array)
    for code, dt in _IDX_TYPES.items():
        if dt.kind == array.dtype.kind and dt.itemsize == array.dtype.itemsize:
            break
    else:
        raise ContractError(f"dtype {array.dtype} has no IDX encoding")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    path = Path(path)
    path.write_bytes(header + array.astype(dt).tobytes())
    return path


def load_dataset(path, format: str = "idx", labels_path=None, num_classes: int | None = None,
                 scale: float | None = None, split: str = "test") -> Dataset:
    """Load an IDX image/label pair or a label-first CSV.

    IDX byte images are divided by 255 unless ``scale`` says otherwise.
    """
    if format == "idx":
        if labels_path is None:
            raise ContractError("IDX datasets need labels_path")
        images = read_idx(path)
        labels = read_idx(labels_path)
        if int.from_bytes(Path(path).read_bytes()[:4], "big") != IDX_IMAGES_MAGIC and images.ndim == 1:
            raise ParseError(f"{path}: byte 0: expected a multi-dimensional image file")
        if labels.ndim != 1:
            raise ParseError(f"{labels_path}: byte 3: labels must be one-dimensional")
        if scale is None:
            scale = 1.0 / 255.0 if images.dtype == np.uint8 else 1.0
        inputs = images.astype(np.float64) * scale
        labels = labels.astype(np.int64)
        if num_classes is not None and labels.size and (labels.max() >= num_classes):
            bad = int(np.argmax(labels >= num_classes))
            raise ParseError(f"{labels_path}: byte {8 + bad}: label {labels[bad]} >= {num_classes}")
        if inputs.shape[0] != labels.shape[0]:
            raise ParseError(f"{path}: {inputs.shape[0]} images but {labels.shape[0]} labels")
        return Dataset(inputs, labels, split, num_classes)
    if format == "csv":
        return _load_csv(path, num_classes, 1.0 if scale is None else scale, split)
    raise ContractError(f"unknown dataset format {format!r}")


def _load_csv(path, num_classes, scale, split) -> Dataset:
    rows, labels = [], []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"{path}: line {lineno}: expected {width} fields, got {len(row)}")
            try:
                label = int(row[0])
                values = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise ParseError(f"{path}: line {lineno}: label {label} out of range")
            labels.append(label)
            rows.append(values)
    n_feat = (width - 1) if width else 0
    inputs = np.array(rows, dtype=np.float64).reshape(len(rows), n_feat) * scale
    return Dataset(inputs, np.array(labels, dtype=np.int64), split, num_classes)


def fit_inputs(ds: Dataset, net: Network) -> np.ndarray:
    """Reshape dataset inputs to the network input shape (same element count)."""
    shape = net.input_shape
    x = ds.inputs
    if x.shape[1:] == shape:
        return x
    if int(np.prod(x.shape[1:])) != int(np.prod(shape)):
        raise ShapeError(f"dataset samples have shape {x.shape[1:]}, network expects {shape}")
    return x.reshape((x.shape[0],) + shape)


def sample_calibration(ds: Dataset, n="all", seed: int = 0) -> Dataset:
    """Deterministic subsample without replacement; ``n='all'`` returns ``ds`` itself."""
    if n == "all" or n is None:
        return ds
    n = int(n)
    if n > len(ds) or n < 1:
        raise ContractError(f"cannot draw {n} calibration samples from {len(ds)}")
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=n, replace=False))
    return Dataset(ds.inputs[idx], ds.labels[idx], "calibration", ds.num_classes)


def white_noise(input_shape, n: int, seed: int = 0) -> Dataset:
    """Standard-normal inputs for calibration without data; labels are all zero."""
    x = np.random.default_rng(seed).standard_normal((int(n),) + tuple(input_shape))
    return Dataset(x, np.zeros(int(n), dtype=np.int64), "calibration")


def evaluate(net: Network, ds: Dataset, batch_size: int = 1024) -> tuple[float, float]:
    """Top-1 accuracy and mean softmax cross-entropy over ``ds``."""
    x = fit_inputs(ds, net)
    if len(ds) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    correct = 0
    loss = 0.0
    for start in range(0, len(ds), batch_size):
        logits = forward(net, x[start:start + batch_size])
        y = ds.labels[start:start + batch_size]
        if logits.ndim != 2:
            raise ShapeError(f"network output has shape {logits.shape[1:]}, expected class logits")
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss += float(-logp[np.arange(y.shape[0]), y].sum())
    return correct / len(ds), loss / len(ds)
