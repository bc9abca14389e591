"""Minimal RIFF/WAVE reader and IEEE-float32 writer."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

WAVE_FORMAT_PCM = 1
WAVE_FORMAT_IEEE_FLOAT = 3
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def write_wav(path: str | Path, signal: np.ndarray, sample_rate: int) -> None:
    """Write float32 samples; ``signal`` is ``(N,)`` mono or ``(C, N)``."""
    data = np.asarray(signal, dtype=np.float64)
    if data.ndim == 1:
        data = data[None]
    if data.ndim != 2:
        raise DataError(f"write_wav expects (N,) or (C, N) samples, got shape {data.shape}")
    if data.size and np.max(np.abs(data)) > 1.0:
        raise DataError(f"write_wav: peak amplitude {np.max(np.abs(data)):.4f} exceeds 1.0")
    channels = data.shape[0]
    payload = data.T.astype("<f4").tobytes()
    block = 4 * channels
    fmt = struct.pack("<HHIIHH", WAVE_FORMAT_IEEE_FLOAT, channels, sample_rate, sample_rate * block, block, 32)
    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(payload)))
        fh.write(b"WAVE")
        fh.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
        fh.write(b"data" + struct.pack("<I", len(payload)))
        fh.write(payload)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Return ``(samples, sample_rate)``; mono gives ``(N,)``, otherwise ``(C, N)``.

    Accepts IEEE float (32/64-bit) and integer PCM (16/24/32-bit).
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise DataError(f"{path}: malformed RIFF header (chunk 'RIFF')")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise DataError(f"{path}: chunk {cid.decode('latin-1')!r} truncated ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise DataError(f"{path}: chunk 'fmt ' too short ({size} bytes)")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE and size >= 40:
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise DataError(f"{path}: missing chunk 'fmt '")
    if data is None:
        raise DataError(f"{path}: missing chunk 'data'")
    tag, channels, rate, _, block, bits = fmt
    if channels < 1 or block != channels * bits // 8:
        raise DataError(f"{path}: inconsistent chunk 'fmt ' (channels={channels}, block={block}, bits={bits})")
    n = len(data) // block
    data = data[:n * block]
    if tag == WAVE_FORMAT_IEEE_FLOAT and bits in (32, 64):
        samples = np.frombuffer(data, dtype="<f4" if bits == 32 else "<f8").astype(np.float64)
    elif tag == WAVE_FORMAT_PCM and bits in (16, 32):
        kind = "<i2" if bits == 16 else "<i4"
        samples = np.frombuffer(data, dtype=kind).astype(np.float64) / float(2 ** (bits - 1))
    elif tag == WAVE_FORMAT_PCM and bits == 24:
        b = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        samples = ints.astype(np.float64) / float(1 << 23)
    else:
        raise DataError(f"{path}: unsupported encoding in chunk 'fmt ' (format {tag}, {bits} bits)")
    samples = samples.reshape(n, channels).T
    return (samples[0].copy() if channels == 1 else samples.copy()), rate
