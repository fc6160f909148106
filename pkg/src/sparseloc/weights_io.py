"""On-disk formats for weights and model configuration.

Weight container: magic ``SFLW``, a little-endian uint32 format version, a
length-prefixed UTF-8 manifest (one ``name|dtype|dims`` line per tensor),
then the raw little-endian tensor payloads in manifest order.

Config file: plain text ``key = value`` lines mirroring `ModelConfig`.
"""

import struct
from pathlib import Path

import numpy as np

from sparseloc.errors import ParseError
from sparseloc.model import ModelConfig, ModelWeights

MAGIC = b"SFLW"
VERSION = 1
_DTYPES = {"f8": "<f8"}


def save_weights(path_or_file, weights: ModelWeights) -> None:
    lines = []
    for name, arr in weights.tensors.items():
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name}|f8|{dims}")
    manifest = "\n".join(lines).encode("utf-8")
    fh = path_or_file if hasattr(path_or_file, "write") else open(path_or_file, "wb")
    try:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for arr in weights.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    finally:
        if fh is not path_or_file:
            fh.close()


def load_weights(path) -> ModelWeights:
    fh = path if hasattr(path, "read") else open(path, "rb")
    try:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a weight container (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = fh.read(mlen).decode("utf-8")
        tensors = {}
        for line in manifest.splitlines():
            name, dtype, dims = line.split("|")
            if dtype not in _DTYPES:
                raise ValueError(f"{path}: unknown element type {dtype!r}")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated payload for {name!r}")
            tensors[name] = np.frombuffer(buf, dtype=_DTYPES[dtype]).reshape(shape).copy()
    finally:
        if fh is not path:
            fh.close()
    return ModelWeights(tensors)


# -- config text file ----------------------------------------------------------

_TUPLE_FIELDS = {"channels", "axis_order", "gate_order"}
_INT_FIELDS = {"k0", "c0", "d2", "depth_up", "d", "extra_dilation", "dilation_depth"}
_FLOAT_FIELDS = {"gem_p", "gem_eps", "cell", "norm_eps"}


def save_config(path, cfg: ModelConfig) -> None:
    lines = []
    for key in (*_INT_FIELDS, *_FLOAT_FIELDS, *_TUPLE_FIELDS, "extra_axis"):
        value = getattr(cfg, key)
        if key in _TUPLE_FIELDS:
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = "none"
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(sorted(lines)) + "\n", encoding="utf-8")


def load_config(path) -> ModelConfig:
    fields = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", lineno)
        key, _, value = (part.strip() for part in line.partition("="))
        try:
            if key in _INT_FIELDS:
                fields[key] = int(value)
            elif key in _FLOAT_FIELDS:
                fields[key] = float(value)
            elif key == "channels":
                fields[key] = tuple(int(v) for v in value.split(","))
            elif key in _TUPLE_FIELDS:
                fields[key] = tuple(value.split(","))
            elif key == "extra_axis":
                fields[key] = None if value.lower() == "none" else value
            else:
                raise ParseError(f"unknown config key {key!r}", lineno)
        except ValueError as exc:
            raise ParseError(f"bad value for {key!r}: {exc}", lineno) from exc
    return ModelConfig(**fields)
