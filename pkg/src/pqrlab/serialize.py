"""On-disk formats: flat little-endian float64 blobs with JSON sidecars, and
long-format CSV dumps with explicit index columns."""

from __future__ import annotations

import csv
import itertools
import json
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ShapeError
from .kernels import TENSOR_NAMES, KernelStack, LayerKernels, _RANK
from .network import NetworkConfig, NetworkParams

_DTYPE = np.dtype("<f8")
FORMAT_VERSION = 1


def _paths(prefix):
    prefix = Path(prefix)
    return prefix.with_suffix(".bin"), prefix.with_suffix(".json")


def save_params(params: NetworkParams, config: NetworkConfig, prefix) -> tuple[Path, Path]:
    """Write ``prefix.bin`` (per layer: bias, then row-major weights) and ``prefix.json``."""
    params.check(config)
    bin_path, meta_path = _paths(prefix)
    params.flat().astype(_DTYPE).tofile(bin_path)
    meta = {
        "format": "pqrlab-params",
        "version": FORMAT_VERSION,
        "dtype": "float64",
        "byteorder": "little",
        "layers": [{"bias": [len(b)], "weights": list(W.shape)} for b, W in zip(params.biases, params.weights)],
        "config": config.to_dict(),
    }
    meta_path.write_text(json.dumps(meta, indent=2))
    return bin_path, meta_path


def load_params(prefix) -> tuple[NetworkParams, NetworkConfig]:
    bin_path, meta_path = _paths(prefix)
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != "pqrlab-params":
        raise InvalidArgumentError(f"{meta_path} is not a parameter sidecar")
    config = NetworkConfig.from_dict(meta["config"])
    flat = np.fromfile(bin_path, dtype=_DTYPE)
    return NetworkParams.from_flat(flat, config.widths).check(config), config


def save_kernels(stack: KernelStack, prefix) -> tuple[Path, Path]:
    """Retained layers' tensors back to back; identically-zero tensors are listed but not stored."""
    bin_path, meta_path = _paths(prefix)
    entries, offset = [], 0
    with open(bin_path, "wb") as fh:
        for l, layer in enumerate(stack.layers):
            if layer is None:
                continue
            for name in TENSOR_NAMES:
                if name not in layer.computed:
                    continue
                t = getattr(layer, name)
                r = _RANK[name]
                shape = [layer.width] * r + [layer.samples] * r
                entry = {"layer": l + 1, "tensor": name, "shape": shape, "zero": t is None}
                if t is not None:
                    entry["offset"] = offset
                    np.ascontiguousarray(t, dtype=_DTYPE).tofile(fh)
                    offset += t.size
                entries.append(entry)
    meta = {
        "format": "pqrlab-kernels",
        "version": FORMAT_VERSION,
        "dtype": "float64",
        "byteorder": "little",
        "order": stack.order,
        "L": stack.L,
        "tensors": entries,
    }
    meta_path.write_text(json.dumps(meta, indent=2))
    return bin_path, meta_path


def load_kernels(prefix) -> KernelStack:
    bin_path, meta_path = _paths(prefix)
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != "pqrlab-kernels":
        raise InvalidArgumentError(f"{meta_path} is not a kernel sidecar")
    flat = np.fromfile(bin_path, dtype=_DTYPE)
    per_layer = {}
    for e in meta["tensors"]:
        d = per_layer.setdefault(e["layer"], {})
        if e["zero"]:
            d[e["tensor"]] = None
        else:
            size = int(np.prod(e["shape"]))
            if e["offset"] + size > flat.size:
                raise ShapeError(f"{bin_path} is truncated")
            d[e["tensor"]] = flat[e["offset"]:e["offset"] + size].reshape(e["shape"])
    layers = []
    for l in range(1, meta["L"] + 1):
        d = per_layer.get(l)
        layers.append(None if d is None else LayerKernels(computed=frozenset(d), **d))
    return KernelStack(meta["order"], layers)


CSV_COLUMNS = ("tensor", "i0", "i1", "i2", "i3", "d0", "d1", "d2", "d3", "value")


def dump_layer_csv(layer: LayerKernels, out) -> None:
    """One row per tensor component; unused index columns are left empty."""
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for name in TENSOR_NAMES:
        if name not in layer.computed:
            continue
        t = layer.get(name)
        r = _RANK[name]
        pad = [""] * (4 - r)
        for idx in itertools.product(*(range(s) for s in t.shape)):
            w.writerow([name, *idx[:r], *pad, *idx[r:], *pad, repr(float(t[idx]))])
