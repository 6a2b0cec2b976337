"""Binary field-stack files.

Layout: 8-byte magic ``RFSTACK1``, a uint32 little-endian header length,
the UTF-8 JSON header, then float32 little-endian values, row-major and
frame-major. Multi-channel stacks (motion fields) store channels
innermost per frame: frame 0 channel 0, frame 0 channel 1, ...
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .fields import FieldSequence, RainField, ReflectivityField

MAGIC = b"RFSTACK1"
UNITS = ("mm/h", "dBZ", "px/step", "mm/h/step")
_REQUIRED = ("frames", "height", "width", "dx_km", "step_minutes", "units", "t0_index")


class StackFormatError(ValueError):
    """Base class for field-stack decoding errors."""


class MalformedHeaderError(StackFormatError):
    pass


class DimensionMismatchError(StackFormatError):
    pass


class TruncatedPayloadError(StackFormatError):
    pass


def write_array(path, data, units="mm/h", dx_km=1.0, step_minutes=5, t0_index=0):
    """Write a (frames, H, W) or (frames, channels, H, W) array."""
    data = np.asarray(data)
    if data.ndim == 3:
        channels = 1
        frames, height, width = data.shape
    elif data.ndim == 4:
        frames, channels, height, width = data.shape
    else:
        raise DimensionMismatchError(f"expected 3 or 4 dims, got shape {data.shape}")
    if units not in UNITS:
        raise MalformedHeaderError(f"unknown units {units!r}")
    header = {
        "frames": int(frames), "height": int(height), "width": int(width),
        "dx_km": float(dx_km), "step_minutes": int(step_minutes), "units": units,
        "t0_index": int(t0_index),
    }
    if channels != 1:
        header["channels"] = int(channels)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def read_array(path):
    """Return ``(array, header)``; array is float32 with a channel axis only
    when the header declares more than one channel."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise MalformedHeaderError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict) or any(k not in header for k in _REQUIRED):
        raise MalformedHeaderError(f"{path}: header missing keys {[k for k in _REQUIRED if k not in header]}")
    if header["units"] not in UNITS:
        raise MalformedHeaderError(f"{path}: unknown units {header['units']!r}")
    frames, height, width = header["frames"], header["height"], header["width"]
    channels = header.get("channels", 1)
    for name, v in (("frames", frames), ("height", height), ("width", width), ("channels", channels)):
        if not isinstance(v, int) or v < 0:
            raise DimensionMismatchError(f"{path}: invalid {name} {v!r}")
    if frames > 0 and (height == 0 or width == 0 or channels == 0):
        raise DimensionMismatchError(f"{path}: zero-sized frame geometry with {frames} frames")
    expected = frames * channels * height * width * 4
    payload = raw[12 + hlen:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, header needs {expected}")
    if len(payload) > expected:
        raise DimensionMismatchError(f"{path}: payload has {len(payload) - expected} bytes beyond header dimensions")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    shape = (frames, channels, height, width) if channels != 1 else (frames, height, width)
    return arr.reshape(shape), header


def write_stack(seq: FieldSequence, path, units=None):
    if units is None:
        units = "dBZ" if len(seq) and isinstance(seq[0], ReflectivityField) else "mm/h"
    if len(seq) == 0:
        write_array(path, np.zeros((0, 0, 0), np.float32), units=units, step_minutes=seq.step_minutes)
        return
    write_array(path, seq.stack(), units=units, dx_km=seq[0].dx,
                step_minutes=seq.step_minutes, t0_index=seq[0].timestamp)


def read_stack(path) -> FieldSequence:
    arr, header = read_array(path)
    if arr.ndim != 3:
        raise DimensionMismatchError(f"{path}: expected single-channel stack, got {header.get('channels')} channels")
    t0 = header["t0_index"]
    dx = header["dx_km"]
    kind = ReflectivityField if header["units"] == "dBZ" else RainField
    return FieldSequence(tuple(kind(a, dx=dx, timestamp=t0 + i) for i, a in enumerate(arr)),
                         step_minutes=header["step_minutes"])
