"""Framed binary container: magic | u32 version | u64 header length | JSON header | payload | u32 CRC-32.

All integers are little-endian; the CRC covers the payload only.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

from .errors import FormatError, IntegrityError, VersionError

_PREFIX = struct.Struct("<4sIQ")


def write_container(path, magic: bytes, version: int, header: dict, payload: bytes) -> None:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = _PREFIX.pack(magic, version, len(head)) + head + payload + struct.pack("<I", zlib.crc32(payload))
    with open(os.fspath(path), "wb") as fh:
        fh.write(blob)


def read_container(path, magic: bytes, max_version: int) -> tuple[int, dict, bytes]:
    with open(os.fspath(path), "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != magic:
        raise FormatError(f"{path}: bad magic bytes {blob[:4]!r}, expected {magic!r}")
    if len(blob) < _PREFIX.size:
        raise IntegrityError(f"{path}: truncated prefix")
    _, version, head_len = _PREFIX.unpack_from(blob)
    if version > max_version:
        raise VersionError(f"{path}: format version {version} is newer than supported {max_version}")
    start = _PREFIX.size
    if len(blob) < start + head_len + 4:
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    payload_len = header.get("payload_bytes")
    payload = blob[start + head_len : -4]
    if payload_len is not None and len(payload) != payload_len:
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, header declares {payload_len}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise IntegrityError(f"{path}: payload CRC mismatch")
    return version, header, payload
