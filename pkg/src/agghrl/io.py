"""Persistence: the AGGH weight file format and JSONL session logs.

Weight file layout (all integers little-endian)::

    b"AGGH"                       magic
    u32 version
    u32 tensor count
    per tensor:
        u32 name length, name (UTF-8)
        u32 rank, rank x u64 dims
        float64 payload, row-major
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from collections.abc import Iterable, Iterator
from pathlib import Path

import numpy as np

from .qnet import QNetworkParams
from .types import PageLog, SessionLog, SlotRecord

MAGIC = b"AGGH"
FORMAT_VERSION = 1
LOG_FORMAT = "agghrl-sessionlog"
LOG_VERSION = 1


class WeightFormatError(ValueError):
    pass


class BadMagicError(WeightFormatError):
    pass


class UnsupportedVersionError(WeightFormatError):
    pass


class ChecksumError(WeightFormatError):
    pass


class ShapeMismatchError(WeightFormatError):
    pass


class LogFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# Weights


def encode_weights(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_weights(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("not an AGGH weight file (bad magic bytes)")
    if len(blob) < 16:
        raise ChecksumError("weight file truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    (version,) = struct.unpack_from("<I", body, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"weight format version {version} is not supported (expected {FORMAT_VERSION})")
    if zlib.crc32(body) != crc:
        raise ChecksumError("weight file checksum mismatch (corrupt or truncated)")
    (count,) = struct.unpack_from("<I", body, 8)
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", body, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as e:
        raise WeightFormatError(f"malformed weight file: {e}") from e
    if off != len(body):
        raise WeightFormatError(f"{len(body) - off} trailing bytes after the last tensor")
    return out


def save_weights(tensors: dict[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(encode_weights(tensors))


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    return decode_weights(Path(path).read_bytes())


def network_tensors(params: QNetworkParams, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in params.tensors().items()}


def assign_network(params: QNetworkParams, tensors: dict[str, np.ndarray], prefix: str) -> None:
    """Copy ``prefix.*`` tensors into ``params`` in place (keeps views intact)."""
    for k, dst in params.tensors().items():
        key = f"{prefix}.{k}"
        if key not in tensors:
            raise ShapeMismatchError(f"tensor {key!r} missing from weight file")
        src = tensors[key]
        if src.shape != dst.shape:
            raise ShapeMismatchError(f"tensor {key!r}: file shape {src.shape} != model shape {dst.shape}")
        dst[...] = src
    extra = sorted(k for k in tensors if k.startswith(prefix + ".") and k[len(prefix) + 1:] not in params.tensors())
    if extra:
        raise ShapeMismatchError(f"unexpected tensors in weight file: {', '.join(extra)}")


# --------------------------------------------------------------------------
# Session logs


def session_to_dict(slog: SessionLog) -> dict:
    return dataclasses.asdict(slog)


def session_from_dict(d: dict) -> SessionLog:
    try:
        pages = [
            PageLog(
                int(p["page_number"]),
                [float(v) for v in p["user_features"]],
                [[int(i) for i in ids] for ids in p["candidates"]],
                [SlotRecord(int(s["item_id"]), int(s["source"]), int(s["click"]), float(s["pay"]),
                            float(s["dwell_ms"]), bool(s.get("examined", True))) for s in p["slots"]],
                None if p.get("option") is None else int(p["option"]),
                None if p.get("actions") is None else [int(a) for a in p["actions"]],
            )
            for p in d["pages"]
        ]
        return SessionLog(str(d["session_id"]), int(d["user_id"]), [float(v) for v in d["query"]], pages,
                          str(d.get("policy", "")))
    except (KeyError, TypeError) as e:
        raise LogFormatError(f"malformed session record: {e!r}") from e


def write_session_logs(logs: Iterable[SessionLog], path: str | Path) -> int:
    """Write a header line plus one JSON object per session; returns the count."""
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"format": LOG_FORMAT, "version": LOG_VERSION}) + "\n")
        for slog in logs:
            f.write(json.dumps(session_to_dict(slog), separators=(",", ":")) + "\n")
            n += 1
    return n


def iter_session_logs(path: str | Path) -> Iterator[SessionLog]:
    with open(path, encoding="utf-8") as f:
        first = f.readline()
        if not first:
            raise LogFormatError(f"{path}: empty file (missing header)")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as e:
            raise LogFormatError(f"{path}: unreadable header") from e
        if not isinstance(header, dict) or header.get("format") != LOG_FORMAT:
            raise LogFormatError(f"{path}: not a session log file")
        if header.get("version") != LOG_VERSION:
            raise LogFormatError(f"{path}: unsupported session log version {header.get('version')}")
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                yield session_from_dict(json.loads(line))
            except json.JSONDecodeError as e:
                raise LogFormatError(f"{path}:{lineno}: {e}") from e


def read_session_logs(path: str | Path) -> list[SessionLog]:
    return list(iter_session_logs(path))


# --------------------------------------------------------------------------
# Whole policies


def policy_tensors(policy) -> dict[str, np.ndarray]:
    """Online-network tensors of an HRL agent (``selector.*``, ``presenter.*``)
    or a flat agent (``flat.*``)."""
    if hasattr(policy, "high") and hasattr(policy, "low"):
        return {**network_tensors(policy.high.online, "selector"), **network_tensors(policy.low.online, "presenter")}
    if hasattr(policy, "bundle"):
        return network_tensors(policy.bundle.online, "flat")
    raise TypeError(f"cannot serialize {type(policy).__name__}")


def weights_kind(tensors: dict[str, np.ndarray]) -> str:
    prefixes = {k.split(".", 1)[0] for k in tensors}
    if prefixes == {"selector", "presenter"}:
        return "hrl"
    if prefixes == {"flat"}:
        return "flat"
    raise WeightFormatError(f"unrecognized tensor prefixes {sorted(prefixes)}")


def load_policy_weights(policy, tensors: dict[str, np.ndarray]) -> None:
    """Copy saved online weights into ``policy``; target networks follow."""
    if hasattr(policy, "high") and hasattr(policy, "low"):
        pairs = [(policy.high, "selector"), (policy.low, "presenter")]
    else:
        pairs = [(policy.bundle, "flat")]
    for bundle, prefix in pairs:
        assign_network(bundle.online, tensors, prefix)
        bundle.target.assign_from(bundle.online)
