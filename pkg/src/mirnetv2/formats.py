"""Binary file formats: ERTF tensor fixtures and ERCK checkpoints.

ERTF layout (all little-endian)::

    b"ERTF" | version u8 | dtype u8 (0=f32, 1=f64) | rank u8 | extents u32 * rank | raw data

ERCK layout::

    b"ERCK" | version u8 | header_len u32 | header (UTF-8 JSON) | records

The JSON header holds the model config, free-form metadata (training state
scalars, RNG state) and the record count. Each record is::

    name_len u16 | name (UTF-8) | dtype u8 | rank u8 | extents u32 * rank | raw data

Only unique parameters are written; shared-RCB aliases are rebuilt from the
config on load. Extra arrays (e.g. Adam moments) use the same record form
under an ``extra/`` name prefix.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .blocks import ParamStore, param_layout
from .config import ModelConfig
from .tensor import FLOAT32, FLOAT64, Tensor

ERTF_MAGIC = b"ERTF"
ERCK_MAGIC = b"ERCK"
VERSION = 1
_CODES = {FLOAT32: 0, FLOAT64: 1}
_DTYPE_OF = {0: FLOAT32, 1: FLOAT64}


class FormatError(ValueError):
    pass


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(b)}")
    return b


def _write_array(f: BinaryIO, arr: np.ndarray) -> None:
    dt = np.dtype(arr.dtype)
    if dt not in _CODES:
        raise FormatError(f"unsupported dtype {dt}")
    f.write(struct.pack("<BB", _CODES[dt], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())


def _read_array(f: BinaryIO) -> np.ndarray:
    code, rank = struct.unpack("<BB", _read_exact(f, 2))
    if code not in _DTYPE_OF:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    dt = _DTYPE_OF[code]
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(f, count * dt.itemsize)
    return np.frombuffer(raw, dtype=dt.newbyteorder("<")).astype(dt).reshape(shape)


def write_tensor(path: str | Path, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    with open(path, "wb") as f:
        f.write(ERTF_MAGIC + struct.pack("<B", VERSION))
        _write_array(f, arr)


def read_tensor(path: str | Path) -> Tensor:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != ERTF_MAGIC:
            raise FormatError(f"{path}: not an ERTF file")
        (version,) = struct.unpack("<B", _read_exact(f, 1))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported ERTF version {version}")
        arr = _read_array(f)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return Tensor(arr)


def save_checkpoint(path: str | Path, cfg: ModelConfig, store: ParamStore, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    extra = extra or {}
    header = {"config": cfg.to_dict(), "meta": meta or {}, "params": len(store), "extra": len(extra)}
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(ERCK_MAGIC + struct.pack("<BI", VERSION, len(hb)) + hb)
        records = [(name, t.data) for name, t in store.items()]
        records += [(f"extra/{k}", v) for k, v in extra.items()]
        for name, arr in records:
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)) + nb)
            _write_array(f, arr)


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, ParamStore, dict, dict[str, np.ndarray]]:
    """Returns (config, params, meta, extra arrays)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != ERCK_MAGIC:
            raise FormatError(f"{path}: not an ERCK checkpoint")
        version, hlen = struct.unpack("<BI", _read_exact(f, 5))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(_read_exact(f, hlen).decode())
        cfg = ModelConfig.from_dict(header["config"])
        arrays = {}
        for _ in range(header["params"] + header["extra"]):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, nlen).decode()
            arrays[name] = _read_array(f)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes")

    lay = param_layout(cfg)
    store = ParamStore()
    for spec in lay.specs:
        if spec.name not in arrays:
            raise FormatError(f"{path}: missing parameter {spec.name!r}")
        arr = arrays.pop(spec.name)
        if arr.shape != spec.shape:
            raise FormatError(f"{path}: {spec.name} has shape {arr.shape}, config expects {spec.shape}")
        store.add(spec.name, Tensor(arr))
    for alias, target in lay.aliases.items():
        store.alias(alias, target)
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    unknown = [k for k in arrays if not k.startswith("extra/")]
    if unknown:
        raise FormatError(f"{path}: unexpected records {unknown[:3]}")
    return cfg, store, header["meta"], extra
