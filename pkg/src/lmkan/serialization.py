"""Binary model container.

Layout::

    b"LMK1" | header_len: uint32 LE | header: UTF-8 JSON | payload

The header lists the module sequence and a tensor manifest (name, shape,
byte count) in payload order.  Tensors are raw little-endian, row-major,
``f64`` or ``f32``; lmKAN coefficients keep the ``[i1, i2, pair, out]``
index order.  Loading always yields float64 arrays, so ``f32`` files are
lossy by design.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, FormatError
from .grid import build_grid
from .layers import Activation, BatchNorm, Linear, LmKanLayer, PrecondBlock
from .model import Model

__all__ = ["MAGIC", "FORMAT_VERSION", "dumps", "loads", "save_model", "load_model"]

MAGIC = b"LMK1"
FORMAT_VERSION = 1
_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}


def _describe(m):
    """Header entry and ordered ``(name, array)`` tensors for one module."""
    if isinstance(m, PrecondBlock):
        desc = {"kind": "lmkan", "n_in": m.n_in, "n_out": m.n_out, "G": m.layer.G,
                "gamma": m.gamma, "mode": m.mode, "branch_relu": m.branch_relu}
        tensors = [("P", m.layer.P)]
        if m.mode != "none":
            tensors += [("linW", m.linW), ("linB", m.linB)]
    elif isinstance(m, BatchNorm):
        desc = {"kind": "batchnorm", "dim": m.dim, "affine": m.affine, "momentum": m.momentum,
                "eps": m.eps, "has_stats": m.has_stats}
        tensors = []
        if m.has_stats:
            tensors += [("running_mean", m.running_mean), ("running_var", m.running_var)]
        if m.affine:
            tensors += [("weight", m.weight), ("bias", m.bias)]
    elif isinstance(m, Linear):
        desc = {"kind": "linear", "n_in": m.n_in, "n_out": m.n_out}
        tensors = [("W", m.W), ("b", m.b)]
    elif isinstance(m, Activation):
        desc = {"kind": "activation", "name": m.name}
        tensors = []
    else:
        raise TypeError(f"cannot serialize module of type {type(m).__name__}")
    return desc, tensors


def _expected_shapes(desc):
    kind = desc["kind"]
    if kind == "lmkan":
        G, n_in, n_out = desc["G"], desc["n_in"], desc["n_out"]
        shapes = {"P": (G + 1, G + 1, n_in // 2, n_out)}
        if desc["mode"] != "none":
            shapes.update(linW=(n_out, n_in), linB=(n_out,))
        return shapes
    if kind == "batchnorm":
        d = desc["dim"]
        shapes = {}
        if desc["has_stats"]:
            shapes.update(running_mean=(d,), running_var=(d,))
        if desc["affine"]:
            shapes.update(weight=(d,), bias=(d,))
        return shapes
    if kind == "linear":
        return {"W": (desc["n_out"], desc["n_in"]), "b": (desc["n_out"],)}
    if kind == "activation":
        return {}
    raise FormatError(f"unknown module kind {kind!r}")


def dumps(model: Model, dtype="f64") -> bytes:
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    dt = _DTYPES[dtype]
    modules, manifest, chunks = [], [], []
    for i, m in enumerate(model.modules):
        desc, tensors = _describe(m)
        modules.append(desc)
        for name, arr in tensors:
            raw = np.ascontiguousarray(arr, dtype=dt).tobytes(order="C")
            manifest.append({"name": f"{i}.{name}", "shape": list(arr.shape), "nbytes": len(raw)})
            chunks.append(raw)
    header = {"format": "lmkan-model", "version": FORMAT_VERSION, "dtype": dtype,
              "modules": modules, "tensors": manifest}
    hb = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(chunks)


def _build(desc, t):
    kind = desc["kind"]
    if kind == "lmkan":
        layer = LmKanLayer(desc["n_in"], desc["n_out"], build_grid(desc["G"]), t["P"], desc["gamma"])
        return PrecondBlock(layer, t.get("linW"), t.get("linB"), desc["mode"], desc["branch_relu"])
    if kind == "batchnorm":
        bn = BatchNorm(desc["dim"], desc["affine"], desc["momentum"], desc["eps"],
                       t.get("running_mean"), t.get("running_var"))
        if desc["affine"]:
            bn.weight, bn.bias = t["weight"], t["bias"]
        return bn
    if kind == "linear":
        return Linear(t["W"], t["b"])
    return Activation(desc["name"])


def loads(data: bytes) -> Model:
    data = bytes(data)
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise CorruptFileError("file truncated inside the header length field")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise CorruptFileError("file truncated inside the header")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != "lmkan-model":
        raise FormatError("header is not an lmkan-model header")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {header.get('version')!r}")
    dt = _DTYPES.get(header.get("dtype"))
    if dt is None:
        raise FormatError(f"unknown tensor dtype {header.get('dtype')!r}")
    payload = memoryview(data)[8 + hlen:]
    manifest = header.get("tensors", [])
    declared = sum(int(e["nbytes"]) for e in manifest)
    if declared != len(payload):
        raise CorruptFileError(f"payload has {len(payload)} bytes, manifest declares {declared}")

    try:
        expected = []
        for i, desc in enumerate(header["modules"]):
            expected += [(f"{i}.{n}", s) for n, s in _expected_shapes(desc).items()]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed module entry: {exc}") from None
    got = [(e["name"], tuple(e["shape"])) for e in manifest]
    if got != [(n, tuple(s)) for n, s in expected]:
        raise FormatError("tensor manifest does not match the declared modules")

    tensors, off = {}, 0
    for e in manifest:
        shape = tuple(e["shape"])
        n = int(e["nbytes"])
        if n != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CorruptFileError(f"tensor {e['name']} byte count disagrees with its shape")
        arr = np.frombuffer(payload[off:off + n], dtype=dt).reshape(shape).astype(np.float64)
        tensors[e["name"]] = arr
        off += n

    modules = []
    for i, desc in enumerate(header["modules"]):
        prefix = f"{i}."
        t = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        modules.append(_build(desc, t))
    return Model(modules)


def save_model(model: Model, path, dtype="f64") -> None:
    Path(path).write_bytes(dumps(model, dtype))


def load_model(path) -> Model:
    return loads(Path(path).read_bytes())
