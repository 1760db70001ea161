"""
Binary stack files and run manifests.

A stack file is one line of compact JSON (the header) terminated by a newline,
followed by the raw little-endian payload in row-major order.  Complex values
are stored as interleaved (re, im) float32 pairs.  Header keys:

    magic    "HMRA2D"
    version  1
    dtype    "f32" or "c64"
    shape    list of ints
    endian   "LE"
    meta     free-form dict (L, K, sigma, seed, basis hash, has_nan, ...)
"""

from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path

import numpy as np

MAGIC = "HMRA2D"
VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "c64": np.dtype("<c8")}


class StackFileError(ValueError):
    """Base error for unreadable stack files."""


class FormatError(StackFileError):
    """Header is not a valid version-1 stack header."""


class CorruptionError(StackFileError):
    """Payload does not match the header."""


def write_stack(path, data, meta=None):
    """
    Write a real (f32) or complex (c64) array.

    :param path: Output file.
    :param data: Array; real input is stored as f32, complex as c64.
    :param meta: Optional JSON-serializable metadata.
    """
    data = np.asarray(data)
    code = "c64" if np.iscomplexobj(data) else "f32"
    payload = np.ascontiguousarray(data, dtype=DTYPES[code])
    meta = dict(meta or {})
    meta["has_nan"] = bool(np.isnan(payload).any())
    header = {
        "magic": MAGIC,
        "version": VERSION,
        "dtype": code,
        "shape": list(payload.shape),
        "endian": "LE",
        "meta": meta,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        fh.write(payload.tobytes(order="C"))


def read_header(fh):
    line = fh.readline()
    try:
        header = json.loads(line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"unreadable header: {err}") from None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise FormatError("bad magic")
    if header.get("version") != VERSION:
        raise FormatError(f"unsupported version {header.get('version')!r}")
    if header.get("endian") != "LE":
        raise FormatError(f"unsupported endianness {header.get('endian')!r}; only 'LE' is accepted")
    if header.get("dtype") not in DTYPES:
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}")
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise FormatError(f"invalid shape {shape!r}")
    return header


def read_stack(path, with_meta=False):
    """
    Read a stack written by :func:`write_stack`.

    :raises FormatError: bad magic, version, endianness, dtype or shape.
    :raises CorruptionError: payload length differs from the header.
    """
    with open(path, "rb") as fh:
        header = read_header(fh)
        payload = fh.read()
    dtype = DTYPES[header["dtype"]]
    expected = int(np.prod(header["shape"], dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise CorruptionError(f"payload is {len(payload)} bytes, header declares {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(header["shape"]).copy()
    return (data, header.get("meta", {})) if with_meta else data


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def array_hash(arr):
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256(str((arr.dtype.str, arr.shape)).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def environment_versions():
    import scipy

    from . import __version__

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "hmra2d": __version__,
    }


class RunManifest:
    """
    JSON record of a run: command, config, seeds, versions, and one entry per
    stage with input/output hashes, wall time and metrics.
    """

    def __init__(self, path, command=None, config=None, seeds=None):
        self.path = Path(path)
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"command": command, "config": config, "seeds": seeds, "stages": []}
        self.data["versions"] = environment_versions()
        if command is not None:
            self.data["command"] = command
        if config is not None:
            self.data["config"] = config
        if seeds is not None:
            self.data["seeds"] = seeds

    @property
    def stages(self):
        return self.data["stages"]

    def add_stage(self, name, inputs, outputs, seconds, metrics=None):
        """Record one stage; inputs and outputs are lists of file paths."""
        entry = {
            "stage": name,
            "inputs": {Path(p).name: file_hash(p) for p in inputs},
            "outputs": {Path(p).name: file_hash(p) for p in outputs},
            "seconds": round(float(seconds), 6),
            "metrics": metrics or {},
        }
        self.data["stages"].append(entry)
        self.save()
        return entry

    def output_hashes(self):
        return {k: v for e in self.stages for k, v in e["outputs"].items()}

    def save(self):
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=_json_default))


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")
