"""
Trace I/O
SAGT binary attention traces, JSON sidecars, and CSV/JSON report writers

Layout: 24-byte header ("SAGT", version, L, H, steps, N as little-endian u32)
followed by L*H*steps*N little-endian float32 scores in layer, head, step, position
order. Rows shorter than N are zero-padded.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Union

import numpy as np
import pandas as pd

from config import CSV_FLOAT_FORMAT
from errors import BadMagic, BadVersion, ShapeMismatch, TruncatedPayload

logger = logging.getLogger(__name__)

MAGIC = b"SAGT"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")
PAYLOAD_DTYPE = np.dtype("<f4")

PathLike = Union[str, Path]


# ============================================================================
# Types
# ============================================================================

@dataclass(frozen=True, eq=False)
class AttentionTrace:
    """Dense score rows, shape (L, H, steps, N), float32"""

    scores: np.ndarray

    def __post_init__(self):
        if self.scores.ndim != 4:
            raise ShapeMismatch(f"trace must be 4-D (L, H, steps, N), got {self.scores.shape}")

    @property
    def layers(self) -> int:
        return self.scores.shape[0]

    @property
    def heads(self) -> int:
        return self.scores.shape[1]

    @property
    def steps(self) -> int:
        return self.scores.shape[2]

    @property
    def positions(self) -> int:
        return self.scores.shape[3]

    def row(self, layer: int, head: int, step: int) -> np.ndarray:
        return self.scores[layer, head, step]

    def bit_equal(self, other: "AttentionTrace") -> bool:
        a = np.ascontiguousarray(self.scores, dtype=PAYLOAD_DTYPE)
        b = np.ascontiguousarray(other.scores, dtype=PAYLOAD_DTYPE)
        return a.shape == b.shape and np.array_equal(a.view(np.uint32), b.view(np.uint32))

    @classmethod
    def from_rows(cls, rows, layers: int, heads: int, width: Optional[int] = None) -> "AttentionTrace":
        """
        Pack ragged rows into a dense zero-padded trace

        Args:
            rows: rows[step][layer][head] -> 1-D score vector
            width: padded N (defaults to the longest row)
        """
        steps = len(rows)
        if width is None:
            width = max((len(r) for step in rows for row in step for r in row), default=0)
        dense = np.zeros((layers, heads, steps, width), dtype=np.float32)
        for s, step in enumerate(rows):
            for layer in range(layers):
                for head in range(heads):
                    r = step[layer][head]
                    dense[layer, head, s, : len(r)] = r
        return cls(dense)


@dataclass(frozen=True)
class TraceHeader:
    layers: int
    heads: int
    steps: int
    positions: int
    version: int = VERSION

    @property
    def payload_bytes(self) -> int:
        return self.layers * self.heads * self.steps * self.positions * PAYLOAD_DTYPE.itemsize

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.layers, self.heads, self.steps, self.positions)

    @classmethod
    def unpack(cls, raw: bytes) -> "TraceHeader":
        if raw[:4] != MAGIC:
            raise BadMagic(f"expected magic {MAGIC!r}, got {raw[:4]!r}")
        if len(raw) < HEADER.size:
            raise TruncatedPayload(f"header needs {HEADER.size} bytes, got {len(raw)}")
        _, version, layers, heads, steps, positions = HEADER.unpack(raw[: HEADER.size])
        if version != VERSION:
            raise BadVersion(f"unsupported trace version {version} (expected {VERSION})")
        return cls(layers, heads, steps, positions, version)


# ============================================================================
# Traces
# ============================================================================

def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".meta.json")


def write_trace(trace: AttentionTrace, path: PathLike, metadata: Optional[Mapping[str, Any]] = None) -> None:
    """Write header + float32 payload; optional metadata goes to the .meta.json sidecar"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = TraceHeader(trace.layers, trace.heads, trace.steps, trace.positions)
    payload = np.ascontiguousarray(trace.scores, dtype=PAYLOAD_DTYPE).tobytes()
    with open(path, "wb") as f:
        f.write(header.pack())
        f.write(payload)
    if metadata is not None:
        write_sidecar(metadata, path)
    logger.info("wrote trace %s (%d bytes payload)", path, len(payload))


def read_trace(path: PathLike) -> AttentionTrace:
    """Read and validate a SAGT file"""
    raw = Path(path).read_bytes()
    header = TraceHeader.unpack(raw)
    payload = raw[HEADER.size:]
    if len(payload) != header.payload_bytes:
        raise TruncatedPayload(
            f"payload is {len(payload)} bytes, header promises {header.payload_bytes}"
        )
    scores = np.frombuffer(payload, dtype=PAYLOAD_DTYPE).reshape(
        header.layers, header.heads, header.steps, header.positions
    )
    return AttentionTrace(scores.astype(np.float32))


def write_sidecar(metadata: Mapping[str, Any], path: PathLike) -> Path:
    """Config, seed and policy parameters next to the trace at `path`"""
    meta = sidecar_path(path)
    write_json(metadata, meta)
    return meta


def read_sidecar(path: PathLike) -> Optional[Dict[str, Any]]:
    meta = sidecar_path(path)
    if not meta.exists():
        return None
    return json.loads(meta.read_text(encoding="utf-8"))


# ============================================================================
# Reports
# ============================================================================

def write_json(data: Mapping[str, Any], path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(table: Union[pd.DataFrame, Iterable[Mapping[str, Any]]], path: PathLike) -> None:
    """Header row + data rows; floats at 6 significant digits, column order as given"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = table if isinstance(table, pd.DataFrame) else pd.DataFrame(list(table))
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
