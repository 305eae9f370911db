"""PNM1 model files.

Layout (all integers u32 little-endian)::

    b"PNM1" | version | metadata length | UTF-8 metadata
    then per parameter bank: name length | name | rank | extents... | float64 LE values
    trailing CRC-32 of every preceding byte

The metadata uses the ``section.key = value`` line grammar of run configs:
``model.*`` lines hold the input shape, seed and head, ``arch.*`` lines the
builder settings, and one ``node.<name> = <layer text>`` line per node.
"""
import os
import struct
import zlib

import numpy as np

from .config import parse_lines
from .errors import ConfigError, FormatError
from .network import LayerSpec, Model

MAGIC = b"PNM1"
VERSION = 1


def _fmt(value):
    return str(value).lower() if isinstance(value, bool) else str(value)


def model_metadata(model: Model) -> str:
    lines = [
        f"model.input = {','.join(str(d) for d in model.input_shape)}",
        f"model.seed = {model.seed}",
        f"model.head = {model.head}",
    ]
    lines += [f"arch.{k} = {_fmt(v)}" for k, v in model.arch.items()]
    lines += [f"node.{name} = {text}" for name, text in model.spec_lines()]
    return "\n".join(lines) + "\n"


def encode_model(model: Model) -> bytes:
    meta = model_metadata(model).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    for name, value in model.state().items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<{1 + value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(model: Model, path):
    data = encode_model(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _parse_value(text):
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        return text


def decode_model(data: bytes) -> Model:
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError("not a PNM1 model file")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported PNM1 version {version} (expected {VERSION})")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise FormatError("model file checksum mismatch")
    pos = 12
    try:
        meta = data[pos:pos + meta_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"bad metadata encoding: {exc}") from None
    pos += meta_len
    state = {}
    end = len(data) - 4
    try:
        while pos < end:
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > end:
                raise FormatError(f"truncated values for bank {name}")
            state[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * count
    except struct.error as exc:
        raise FormatError(f"truncated model file: {exc}") from None
    try:
        entries = parse_lines(meta)
        model_keys = {k: v for (sec, k), (v, _) in entries.items() if sec == "model"}
        arch = {k: _parse_value(v) for (sec, k), (v, _) in entries.items() if sec == "arch"}
        nodes = [LayerSpec.from_text(k, v) for (sec, k), (v, _) in entries.items() if sec == "node"]
        input_shape = tuple(int(d) for d in model_keys["input"].split(","))
        model = Model(nodes, input_shape, int(model_keys["seed"]), arch).initialize()
        model.load_state(state)
    except (ConfigError, KeyError, ValueError) as exc:
        raise FormatError(f"invalid model description: {exc}") from None
    return model


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return decode_model(fh.read())
