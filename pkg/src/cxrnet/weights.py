"""Binary weight file reader/writer.

Layout (all integers little-endian)::

    b"SCW1"  u32 version  u32 count
    count x { u16 name_len, name (utf-8), u8 rank, rank x u32 dim, float32 LE values }
    u32 CRC-32 of every preceding byte

Both parameters and batch-norm running statistics are stored.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CompletenessError, CorruptFileError, ShapeError
from .io_utils import atomic_write_bytes

MAGIC = b"SCW1"
VERSION = 1


def encode_tensors(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes) -> dict:
    """Parse a weight file image into an ordered name -> float32 array dict."""
    if len(blob) < 16:
        raise CorruptFileError(f"file too short ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise CorruptFileError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFileError("CRC-32 mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CorruptFileError(f"unsupported format version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(body):
                raise CorruptFileError(f"tensor {name!r} runs past the end of the file")
            out[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"malformed tensor record: {exc}") from exc
    if pos != len(body):
        raise CorruptFileError(f"{len(body) - pos} trailing bytes after declared tensors")
    return out


def save_weights(graph, path, names=None):
    """Write the graph state (optionally only ``names``) atomically."""
    state = graph.state_arrays()
    if names is not None:
        state = {n: state[n] for n in names}
    atomic_write_bytes(path, encode_tensors(state))


@dataclass
class LoadReport:
    loaded: list = field(default_factory=list)
    missing: list = field(default_factory=list)
    missing_buffers: list = field(default_factory=list)
    extra: list = field(default_factory=list)


def load_weights(graph, path, allow_partial=False, only=None) -> LoadReport:
    """Load tensors into ``graph``.

    Everything is validated before the first array is written, so any
    error leaves the graph untouched. ``only`` restricts which graph names
    may be taken from the file; the rest keep their seeded initial values
    and are reported as missing.
    """
    with open(path, "rb") as fh:
        tensors = decode_tensors(fh.read())
    return load_state(graph, tensors, allow_partial, only)


def load_state(graph, tensors, allow_partial=False, only=None) -> LoadReport:
    targets = graph.state_arrays()
    wanted = set(targets) if only is None else set(only)
    report = LoadReport()
    for name, arr in targets.items():
        if name in tensors and name in wanted:
            if tensors[name].shape != arr.shape:
                raise ShapeError(
                    f"tensor {name!r}: file has shape {tensors[name].shape}, model expects {arr.shape}"
                )
            report.loaded.append(name)
        elif name in graph.params:
            report.missing.append(name)
        else:
            report.missing_buffers.append(name)
    report.extra = [n for n in tensors if n not in targets]
    if not allow_partial and (report.missing or report.missing_buffers):
        first = (report.missing + report.missing_buffers)[0]
        raise CompletenessError(
            f"{len(report.missing) + len(report.missing_buffers)} tensors missing from weight file, "
            f"first: {first!r}"
        )
    for name in report.loaded:
        np.copyto(targets[name], tensors[name].astype(targets[name].dtype))
    return report
