"""Binary checkpoint container.

Layout (little-endian)::

    8s   magic "CTCNCKPT"
    u32  version
    u32  metadata length, then that many bytes of UTF-8 JSON (sorted keys)
    u32  tensor count, then per tensor in lexicographic name order:
         u16 name length, name bytes, u8 dtype code, u8 ndim, u32 dims..., raw data
    u64  checksum (BLAKE2b-64) of every preceding byte

Tensors are stored as float64 unless ``dtype="float32"`` is requested, so a
reload reproduces forward outputs bitwise by default.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from colontcn.data import DataError, payload_checksum

MAGIC = b"CTCNCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(DataError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    params: Dict[str, np.ndarray]
    iteration: int
    val_wf1: Optional[float]
    seed: int
    optim_state: Optional[Dict[str, np.ndarray]] = None  # "m.<name>", "v.<name>", "t"
    meta: dict = field(default_factory=dict)

    def tensors(self):
        out = {f"param.{k}": v for k, v in self.params.items()}
        if self.optim_state is not None:
            out.update({f"optim.{k}": v for k, v in self.optim_state.items()})
        return dict(sorted(out.items()))


def _encode(ckpt, dtype):
    meta = {
        "model": ckpt.model_config,
        "iteration": int(ckpt.iteration),
        "val_wf1": ckpt.val_wf1,
        "seed": int(ckpt.seed),
        "meta": ckpt.meta,
    }
    mbytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(mbytes)), mbytes]
    tensors = ckpt.tensors()
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind in "iu":
            arr = np.ascontiguousarray(arr, dtype="<i8")
        elif name.startswith("param.") and dtype == "float32":
            arr = np.ascontiguousarray(arr, dtype="<f4")
        else:
            arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", payload_checksum(body))


def save_checkpoint(ckpt, path, dtype="float64"):
    if dtype not in ("float64", "float32"):
        raise ValueError(f"unsupported checkpoint dtype {dtype!r}")
    Path(path).write_bytes(_encode(ckpt, dtype))


def load_checkpoint(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror or e}") from None
    if len(raw) < 24 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (stored,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if payload_checksum(body) != stored:
        raise CheckpointError(f"{path}: checksum mismatch")
    try:
        version, mlen = struct.unpack_from("<II", body, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 16
        meta = json.loads(body[pos:pos + mlen].decode())
        pos += mlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + n > len(body):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(body, dtype=dt, count=n // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += n
        if pos != len(body):
            raise CheckpointError(f"{path}: trailing bytes")
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from None
    params = {k[6:]: v.astype(np.float64) for k, v in tensors.items() if k.startswith("param.")}
    optim = {k[6:]: v for k, v in tensors.items() if k.startswith("optim.")} or None
    return Checkpoint(meta["model"], params, meta["iteration"], meta["val_wf1"], meta["seed"], optim, meta["meta"])
