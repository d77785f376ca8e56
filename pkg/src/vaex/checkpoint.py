"""Versioned binary tensor container used for model and classifier checkpoints.

Layout: 8-byte magic, u32 format version, u32 header length, UTF-8 header of
`key=value` lines, u32 tensor count, then per tensor a length-prefixed name,
u8 rank, u32 dims and the data as little-endian float32. Loaders reject
unknown magics and versions.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"VAEXCKPT"
VERSION = 1


def write_container(path, header: dict, tensors: dict) -> None:
    path = Path(path)
    header_text = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header_text)))
        fh.write(header_text)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            data = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes())


def read_container(path):
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint container (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = {}
        for line in fh.read(header_len).decode("utf-8").splitlines():
            if line:
                key, _, value = line.partition("=")
                header[key] = value
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n_elem = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * n_elem), dtype="<f4").reshape(shape)
            tensors[name] = torch.from_numpy(data.copy())
    return header, tensors


def save_model(path, model, extra_tensors: dict | None = None, meta: dict | None = None) -> None:
    """Persist a VAEX model: config in the header, full state dict as tensors."""
    header = {"kind": "vaex"}
    header.update(model.config.to_dict())
    if meta:
        header.update(meta)
    tensors = {name: value for name, value in model.state_dict().items()}
    for name, value in (extra_tensors or {}).items():
        tensors[f"extra.{name}"] = value
    write_container(path, header, tensors)


def load_model(path):
    """Rebuild a VAEX model (and any extra tensors) from a container file."""
    from .model import ModelConfig, VAEX

    header, tensors = read_container(path)
    if header.get("kind") != "vaex":
        raise ValueError(f"{path}: container holds {header.get('kind')!r}, expected a model")
    config = ModelConfig.from_dict(header)
    model = VAEX(config)
    state = model.state_dict()
    extra = {}
    for name, value in tensors.items():
        if name.startswith("extra."):
            extra[name[len("extra."):]] = value
        elif name in state:
            state[name] = value.to(state[name].dtype).reshape(state[name].shape)
        else:
            raise ValueError(f"{path}: unknown parameter {name!r}")
    missing = [n for n in state if n not in tensors]
    if missing:
        raise ValueError(f"{path}: missing parameters {missing[:3]}")
    model.load_state_dict(state)
    return model, extra, header


def file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
