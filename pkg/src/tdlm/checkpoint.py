"""Binary model checkpoints.

Layout: magic ``TDLM``, one version byte, a little-endian uint32 header
length, a UTF-8 JSON header (model config, tensor names/shapes/offsets,
dtype, tokenizer hash, training step), then raw little-endian float32 values
in header order. Parameters are stored at 32-bit precision and loaded back
into float64 working tensors, so two loads of one file agree bit for bit.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Tensor
from .errors import FormatError, VersionError
from .transformer import Model, ModelConfig, ModelParams

MAGIC = b"TDLM"
VERSION = 1


def save_checkpoint(model: Model, path):
    names = model.params.names()
    tensors = []
    offset = 0
    for name in names:
        shape = list(model.params[name].data.shape)
        tensors.append({"name": name, "shape": shape, "offset": offset})
        offset += int(np.prod(shape)) if shape else 1
    header = {
        "config": model.config.to_dict(),
        "tensors": tensors,
        "dtype": "f32",
        "vocab_hash": model.vocab_hash,
        "step": model.step,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            fh.write(model.params[name].data.astype("<f4").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise FormatError(f"{path} is not a checkpoint (bad magic)")
    version = blob[4]
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}, expected {VERSION}")
    (header_len,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + header_len:
        raise FormatError(f"{path} is truncated inside the header")
    try:
        header = json.loads(blob[9 : 9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path} has a corrupt header: {e}") from e
    payload = blob[9 + header_len :]
    config = ModelConfig.from_dict(header["config"])
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = spec["offset"] * 4
        end = start + count * 4
        if end > len(payload):
            raise FormatError(f"{path} is truncated inside tensor {spec['name']!r}")
        values = np.frombuffer(payload[start:end], dtype="<f4").astype(np.float64)
        tensors[spec["name"]] = Tensor(values.reshape(shape), requires_grad=True)
    return Model(
        config=config,
        params=ModelParams(tensors),
        vocab_hash=header.get("vocab_hash", ""),
        step=int(header.get("step", 0)),
    )
