"""Weight file serialization.

Layout: magic ``RSV2``, version u16 (little-endian), u32 manifest byte
length, manifest as UTF-8 JSON (list of {name, dtype, shape, offset} with
offsets relative to the payload start), raw little-endian payloads, and a
trailing u32 CRC32 over everything before it.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

from .tensor import Tensor

MAGIC = b"RSV2"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class WeightFormatError(ValueError):
    """Malformed, corrupted, or mismatching weight file."""


def _dtype_tag(dt: np.dtype) -> str:
    for tag, d in _DTYPES.items():
        if d == dt.newbyteorder("<"):
            return tag
    raise WeightFormatError(f"unsupported dtype {dt}")


def save_weights(weights: dict[str, Tensor], path: str) -> None:
    """Atomically write an ordered name -> Tensor map."""
    manifest = []
    payload = bytearray()
    for name, t in weights.items():
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        manifest.append({"name": name, "dtype": _dtype_tag(arr.dtype),
                         "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    mbytes = json.dumps(manifest).encode("utf-8")
    body = MAGIC + struct.pack("<HI", VERSION, len(mbytes)) + mbytes + bytes(payload)
    body += struct.pack("<I", zlib.crc32(body))
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_weights(path: str) -> dict[str, Tensor]:
    """Read and verify a weight file; raises WeightFormatError on any defect."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 14:
        raise WeightFormatError(f"{path}: truncated file ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise WeightFormatError(f"{path}: CRC32 mismatch, file corrupted")
    version, mlen = struct.unpack("<HI", blob[4:10])
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    try:
        manifest = json.loads(blob[10:10 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"{path}: unreadable manifest: {exc}") from exc
    payload = blob[10 + mlen:-4]
    out: dict[str, Tensor] = {}
    for entry in manifest:
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise WeightFormatError(f"{path}: unknown dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * dt.itemsize
        off = entry["offset"]
        if off + n > len(payload):
            raise WeightFormatError(f"{path}: payload overrun for {entry['name']!r}")
        arr = np.frombuffer(payload[off:off + n], dtype=dt).reshape(shape)
        out[entry["name"]] = Tensor(arr.copy())
    return out


def check_against_plan(loaded: dict[str, Tensor],
                       plan: list[tuple[str, tuple[int, ...], str]]) -> None:
    """Verify a loaded weight map matches a config's parameter plan exactly."""
    plan_shapes = {name: tuple(shape) for name, shape, _ in plan}
    missing = sorted(set(plan_shapes) - set(loaded))
    extra = sorted(set(loaded) - set(plan_shapes))
    if missing or extra:
        raise WeightFormatError(
            f"parameter set mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, t in loaded.items():
        if t.shape != plan_shapes[name]:
            raise WeightFormatError(
                f"shape mismatch for {name!r}: file has {t.shape}, plan wants {plan_shapes[name]}")
