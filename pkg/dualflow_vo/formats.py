"""
dualflow-vo File Formats

Readers and writers for the interchange formats: Middlebury .flo flow
files, PFM float maps and 8-bit PGM images/masks.
"""

from __future__ import annotations

from pathlib import Path
from typing import Tuple

import numpy as np

from .core.dualflow import DynamicMask, FlowField
from .errors import ParseError


FLO_MAGIC = 202021.25
UNKNOWN_FLOW = 1e10
UNKNOWN_FLOW_THRESHOLD = 1e9


def write_flo(path: Path, flow: FlowField) -> None:
    """Write a .flo file; invalid pixels store the unknown-flow sentinel."""
    path.parent.mkdir(parents=True, exist_ok=True)
    data = flow.as_array().astype(np.float32)
    data[~flow.valid] = UNKNOWN_FLOW
    height, width = flow.shape
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([width, height], dtype="<i4").tofile(f)
        data.astype("<f4").tofile(f)


def read_flo(path: Path) -> FlowField:
    raw = path.read_bytes()
    if len(raw) < 12:
        raise ParseError("truncated .flo header", path=str(path))
    magic = np.frombuffer(raw[:4], dtype="<f4")[0]
    if magic != np.float32(FLO_MAGIC):
        raise ParseError(f"bad .flo magic {magic}", path=str(path))
    width, height = (int(x) for x in np.frombuffer(raw[4:12], dtype="<i4"))
    expected = 12 + width * height * 2 * 4
    if width <= 0 or height <= 0 or len(raw) != expected:
        raise ParseError(f".flo size mismatch for {width}x{height}", path=str(path))
    data = np.frombuffer(raw[12:], dtype="<f4").reshape(height, width, 2).astype(np.float64)
    valid = (np.abs(data) < UNKNOWN_FLOW_THRESHOLD).all(axis=-1)
    data[~valid] = 0.0
    return FlowField.from_array(data, valid=valid)


def write_pfm(path: Path, values: np.ndarray) -> None:
    """Single-channel little-endian PFM (scale -1.0), rows stored bottom-up."""
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = values.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    body = np.flipud(values).astype("<f4").tobytes()
    path.write_bytes(header + body)


def _read_header_tokens(raw: bytes, count: int, path: Path) -> Tuple[list, int]:
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated header", path=str(path))
        tokens.append(raw[start:pos].decode("ascii"))
    # exactly one whitespace byte separates header and data
    return tokens, pos + 1


def read_pfm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens, offset = _read_header_tokens(raw, 4, path)
    if tokens[0] != "Pf":
        raise ParseError(f"unsupported PFM type {tokens[0]!r}", path=str(path))
    try:
        width, height, scale = int(tokens[1]), int(tokens[2]), float(tokens[3])
    except ValueError as e:
        raise ParseError(f"bad PFM header: {e}", path=str(path)) from e
    dtype = "<f4" if scale < 0 else ">f4"
    body = raw[offset:]
    if len(body) != width * height * 4:
        raise ParseError("PFM body size mismatch", path=str(path))
    values = np.frombuffer(body, dtype=dtype).reshape(height, width)
    return np.flipud(values).astype(np.float64)


def write_pgm(path: Path, values: np.ndarray) -> None:
    """Binary 8-bit PGM of values in [0, 1]."""
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = values.shape
    pixels = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """Read a binary 8-bit PGM as floats in [0, 1]."""
    raw = path.read_bytes()
    tokens, offset = _read_header_tokens(raw, 4, path)
    if tokens[0] != "P5":
        raise ParseError(f"unsupported PGM type {tokens[0]!r}", path=str(path))
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ParseError("only 8-bit PGM is supported", path=str(path))
    body = raw[offset:]
    if len(body) != width * height:
        raise ParseError("PGM body size mismatch", path=str(path))
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).astype(np.float64) / 255.0


def write_mask(path: Path, mask: DynamicMask) -> None:
    """Binarized mask as PGM: 255 = static, 0 = dynamic."""
    write_pgm(path, mask.binarized().astype(np.float64))


def read_mask(path: Path) -> DynamicMask:
    return DynamicMask(values=(read_pgm(path) >= 0.5).astype(np.float64))
