"""Machine-readable report emission (JSON / CSV) and raw tensor blobs.

Writes are atomic (temp file in the target directory, then rename), field
order is stable, and numbers keep full precision.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile

import numpy as np

from .tensor import Tensor

FORMATS = ("json", "csv")
RAW_MAGIC = b"RTEN"


def _atomic_write(path: str, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _as_rows(report) -> list[dict]:
    if isinstance(report, list):
        return report
    # flatten a scalar mapping to a single row, dropping nested structures
    return [{k: v for k, v in report.items() if not isinstance(v, (list, dict))}]


def render_report(report, fmt: str) -> bytes:
    if fmt == "json":
        return (json.dumps(report, indent=2) + "\n").encode("utf-8")
    if fmt == "csv":
        rows = _as_rows(report)
        buf = io.StringIO()
        if rows:
            writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()),
                                    lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
        return buf.getvalue().encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}; known: {FORMATS}")


def emit_report(report, fmt: str, path: str) -> None:
    _atomic_write(path, render_report(report, fmt))


def emit_profile_csv(profile, path: str) -> None:
    """Two-column (frequency, log_amplitude) CSV for one spectrum profile."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frequency", "log_amplitude"])
    for f, a in zip(profile.radial_bins, profile.log_amplitude):
        writer.writerow([repr(float(f)), repr(float(a))])
    _atomic_write(path, buf.getvalue().encode("utf-8"))


# -- raw tensor blobs (CLI input format) ------------------------------------

def write_raw_tensor(arr, path: str) -> None:
    """``RTEN`` magic, u32 ndim, u32 extents, little-endian f32 data."""
    data = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr,
                                dtype="<f4")
    head = RAW_MAGIC + struct.pack("<I", data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape)
    _atomic_write(path, head + data.tobytes())


def read_raw_tensor(path: str) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RAW_MAGIC:
        raise ValueError(f"{path}: bad raw-tensor magic {blob[:4]!r}")
    (ndim,) = struct.unpack("<I", blob[4:8])
    shape = struct.unpack(f"<{ndim}I", blob[8:8 + 4 * ndim])
    data = np.frombuffer(blob[8 + 4 * ndim:], dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload size does not match shape {shape}")
    return Tensor(data.reshape(shape).copy())
