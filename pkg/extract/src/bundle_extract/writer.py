"""Writer for the engine's embedding-bundle interchange format.

Layout (little-endian, independent reimplementation of the documented
format): 8-byte magic ``EMBUNDL1``, u32 version (1), u32 dim, u32 section
count (3), a section table of (tag u32, count u64) for patches (1), bbox
crops (2) and text prompts (3), then each section's records sorted by key,
and a trailing CRC32 over everything before it. Strings are u32 length +
UTF-8; patch keys serialize as image_id, grid u32, row u32, col u32,
bbox_id.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"EMBUNDL1"
VERSION = 1
SECTION_PATCHES = 1
SECTION_BBOXES = 2
SECTION_TEXTS = 3

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _str_bytes(s: str) -> bytes:
    b = s.encode("utf-8")
    return _U32.pack(len(b)) + b


def _patch_key_bytes(image_id: str, grid: int, row: int, col: int) -> bytes:
    return (
        _str_bytes(image_id)
        + _U32.pack(grid)
        + _U32.pack(row)
        + _U32.pack(col)
        + _str_bytes("")
    )


def write_bundle(
    path: str | Path,
    dim: int,
    patches: dict[tuple[str, int, int, int], np.ndarray],
    bboxes: dict[str, np.ndarray],
    texts: dict[str, np.ndarray],
) -> None:
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(dim), _U32.pack(3)]
    sections = [
        (SECTION_PATCHES, sorted(patches.items())),
        (SECTION_BBOXES, sorted(bboxes.items())),
        (SECTION_TEXTS, sorted(texts.items())),
    ]
    for tag, items in sections:
        chunks.append(_U32.pack(tag))
        chunks.append(_U64.pack(len(items)))
    for tag, items in sections:
        for key, vec in items:
            arr = np.ascontiguousarray(vec, dtype="<f4")
            if arr.shape != (dim,):
                raise ValueError(f"vector for {key!r} has shape {arr.shape}, expected ({dim},)")
            if tag == SECTION_PATCHES:
                chunks.append(_patch_key_bytes(*key))
            else:
                chunks.append(_str_bytes(key))
            chunks.append(arr.tobytes())
    body = b"".join(chunks)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + _U32.pack(crc))
