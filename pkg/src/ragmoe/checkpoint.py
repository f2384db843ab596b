"""Binary checkpoint: magic, version, config snapshot, named float64 tensors.

Tensors are written sorted by name with little-endian float64 payloads, so a
checkpoint is byte-identical across reruns of the same seeded training.
"""

import hashlib
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DataFormatError

_MAGIC = b"RGK1"
_VERSION = 1


def save_checkpoint(path: str | Path, model, config_text: str) -> Path:
    path = Path(path)
    config_raw = config_text.encode("utf-8")
    parts = [
        _MAGIC,
        struct.pack("<I", _VERSION),
        struct.pack("<I", len(config_raw)),
        config_raw,
        hashlib.sha256(config_raw).digest(),
    ]
    state = model.state_dict()
    names = sorted(state.keys())
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        tensor = state[name].detach().to(torch.float64).cpu().numpy()
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    """Returns (config snapshot text, name -> float64 array)."""
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise DataFormatError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", data, 8)
    off = 12
    config_text = data[off : off + cfg_len].decode("utf-8")
    off += cfg_len
    stored_hash = data[off : off + 32]
    off += 32
    if hashlib.sha256(config_text.encode("utf-8")).digest() != stored_hash:
        raise DataFormatError(f"{path}: config snapshot hash mismatch")
    (n_tensors,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off)
        off += count * 8
        tensors[name] = arr.reshape(shape).copy()
    return config_text, tensors


def apply_checkpoint(model, tensors: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    missing = sorted(set(state) - set(tensors))
    extra = sorted(set(tensors) - set(state))
    if missing or extra:
        raise DataFormatError(
            f"checkpoint does not match model: missing {missing}, extra {extra}"
        )
    with torch.no_grad():
        for name, param in state.items():
            param.copy_(torch.from_numpy(tensors[name]).to(param.dtype))
