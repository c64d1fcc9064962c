"""Binary checkpoint format.

Layout::

    b"IGAN" | u32 format version | u32 header length | header JSON (utf-8) | blobs

The header carries the run metadata plus a ``tensors`` directory listing
each blob's name, shape, dtype, byte offset/length and CRC32.  Blobs are
little-endian; parameters and optimizer moments are float32.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np
import torch

MAGIC = b"IGAN"
FORMAT_VERSION = 1

_DTYPES = {"f32": ("<f4", torch.float32), "f64": ("<f8", torch.float64), "i64": ("<i8", torch.int64)}
_BY_TORCH = {v[1]: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)

    def to_bytes(self) -> bytes:
        directory, blobs, offset = [], [], 0
        for name, t in self.tensors.items():
            code = _BY_TORCH.get(t.dtype)
            if code is None:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {t.dtype}")
            raw = np.ascontiguousarray(t.detach().cpu().numpy().astype(_DTYPES[code][0])).tobytes()
            directory.append({"name": name, "shape": list(t.shape), "dtype": code, "offset": offset,
                              "nbytes": len(raw), "crc32": zlib.crc32(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = dict(self.header, tensors=directory)
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        buf.write(hbytes)
        for raw in blobs:
            buf.write(raw)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 12 or data[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<II", data[4:12])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
        if len(data) < 12 + hlen:
            raise CheckpointError("truncated checkpoint header")
        try:
            header = json.loads(data[12:12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        directory = header.pop("tensors", None)
        if not isinstance(directory, list):
            raise CheckpointError("checkpoint header lacks a tensor directory")
        base = 12 + hlen
        tensors = OrderedDict()
        for d in directory:
            start, end = base + d["offset"], base + d["offset"] + d["nbytes"]
            if end > len(data):
                raise CheckpointError(f"truncated checkpoint: blob {d['name']!r} is incomplete")
            raw = data[start:end]
            if zlib.crc32(raw) != d["crc32"]:
                raise CheckpointError(f"corrupt blob {d['name']!r} (checksum mismatch)")
            np_dtype, torch_dtype = _DTYPES[d["dtype"]]
            arr = np.frombuffer(raw, dtype=np_dtype).reshape(d["shape"])
            tensors[d["name"]] = torch.from_numpy(arr.copy()).to(torch_dtype)
        if directory and base + directory[-1]["offset"] + directory[-1]["nbytes"] != len(data):
            raise CheckpointError("trailing bytes after the last blob")
        return cls(header, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return Checkpoint.from_bytes(data)


def optimizer_tensors(prefix: str, optimizer: torch.optim.Optimizer) -> Dict[str, torch.Tensor]:
    out = OrderedDict()
    state = optimizer.state_dict()["state"]
    for idx in sorted(state):
        for key in sorted(state[idx]):
            value = state[idx][key]
            if not torch.is_tensor(value):
                value = torch.tensor(value)
            out[f"{prefix}/{idx}/{key}"] = value
    return out


def load_optimizer_tensors(prefix: str, optimizer: torch.optim.Optimizer, tensors: Dict[str, torch.Tensor]):
    sd = optimizer.state_dict()
    state = {}
    for name, value in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/")
        state.setdefault(int(idx), {})[key] = value.clone()
    sd["state"] = state
    optimizer.load_state_dict(sd)
