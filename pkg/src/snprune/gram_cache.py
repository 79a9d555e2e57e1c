"""On-disk cache of per-layer Gram matrices.

Layout (two files in one directory)::

    grams.json   manifest
    grams.bin    payload

The manifest is::

    {
      "format": "snprune-gram-cache",
      "format_version": 1,
      "dtype": "<f8",
      "packing": "upper-triangle-row-major",
      "entries": [
        {"layer_id": "...", "n": 128, "sample_count": 1024, "byte_offset": 0},
        ...
      ]
    }

Each entry's payload is the upper triangle of its symmetric ``n x n`` matrix,
row by row (``C[0, 0:], C[1, 1:], ...``), as little-endian float64, starting at
``byte_offset`` and spanning ``8 * n * (n + 1) / 2`` bytes.  Entries are stored
back to back in manifest order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import LoadError
from .linalg import GramMatrix

FORMAT = "snprune-gram-cache"
FORMAT_VERSION = 1
MANIFEST_NAME = "grams.json"
PAYLOAD_NAME = "grams.bin"
_DTYPE = np.dtype("<f8")


def _packed_size(n: int) -> int:
    return n * (n + 1) // 2


def save_grams(grams, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for g in grams:
        iu = np.triu_indices(g.n)
        packed = g.C[iu].astype(_DTYPE)
        entries.append(
            {"layer_id": g.layer_id, "n": g.n, "sample_count": int(g.sample_count), "byte_offset": offset}
        )
        chunks.append(packed.tobytes())
        offset += packed.nbytes
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "dtype": _DTYPE.str,
        "packing": "upper-triangle-row-major",
        "entries": entries,
    }
    (directory / PAYLOAD_NAME).write_bytes(b"".join(chunks))
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_grams(directory) -> list[GramMatrix]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_NAME).read_text())
        payload = (directory / PAYLOAD_NAME).read_bytes()
    except FileNotFoundError as exc:
        raise LoadError(f"gram cache incomplete: {exc.filename} not found") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"gram cache manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT or manifest.get("format_version") != FORMAT_VERSION:
        raise LoadError(
            f"unsupported gram cache format {manifest.get('format')!r} "
            f"version {manifest.get('format_version')!r}"
        )
    grams = []
    for i, entry in enumerate(manifest.get("entries", [])):
        try:
            n = int(entry["n"])
            start = int(entry["byte_offset"])
            layer_id = str(entry["layer_id"])
            count = int(entry["sample_count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"gram cache entry {i} is malformed: {exc}") from exc
        stop = start + _packed_size(n) * _DTYPE.itemsize
        if n < 0 or start < 0 or stop > len(payload):
            raise LoadError(f"gram cache entry {i} ({layer_id!r}) runs past the end of the payload")
        packed = np.frombuffer(payload[start:stop], dtype=_DTYPE).astype(np.float64)
        C = np.zeros((n, n))
        C[np.triu_indices(n)] = packed
        C = C + np.triu(C, 1).T
        grams.append(GramMatrix(layer_id, C, count))
    return grams
