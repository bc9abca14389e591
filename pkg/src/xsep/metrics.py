"""Energy-ratio SDR with median-of-frames, median-of-tracks aggregation."""
from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError

SDR_CLAMP_DB = 60.0
EPS = 1e-12


def sdr_db(ref, est) -> float | None:
    """``10 log10(|ref|^2 / (|ref - est|^2 + eps))`` clamped to [-60, 60] dB.

    Returns ``None`` for an all-zero reference (a silent frame).
    """
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise DataError(f"sdr_db: reference {ref.shape} and estimate {est.shape} differ")
    energy = float(np.sum(ref * ref))
    if energy == 0.0:
        return None
    err = float(np.sum((ref - est) ** 2))
    if err == 0.0:
        return SDR_CLAMP_DB
    value = 10.0 * np.log10(energy / (err + EPS))
    return float(np.clip(value, -SDR_CLAMP_DB, SDR_CLAMP_DB))


def median_or_none(values: Sequence[float | None]) -> float | None:
    kept = [v for v in values if v is not None]
    return statistics.median(kept) if kept else None


@dataclass
class FrameSDR:
    frames: list[float | None]
    median: float | None


def framewise_median_sdr(ref, est, frame_length_s: float = 1.0, sample_rate: int = 8000) -> FrameSDR:
    """SDR per non-overlapping frame and the median over non-silent frames.

    A trailing partial frame is dropped unless the signal is shorter than one
    frame, in which case the whole signal is a single frame.
    """
    if frame_length_s <= 0:
        raise ValueError(f"frame_length_s must be positive, got {frame_length_s}")
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise DataError(f"reference {ref.shape} and estimate {est.shape} differ")
    size = max(1, int(round(frame_length_s * sample_rate)))
    count = max(1, len(ref) // size)
    if len(ref) < size:
        size = len(ref)
    values = [sdr_db(ref[k * size:(k + 1) * size], est[k * size:(k + 1) * size]) for k in range(count)]
    return FrameSDR(values, median_or_none(values))


@dataclass
class EvalResult:
    sources: list[str]
    per_track: dict[str, dict[str, FrameSDR]] = field(default_factory=dict)
    frame_length_s: float = 1.0

    def aggregate(self, source: str) -> float | None:
        """Median over tracks of each track's median over frames."""
        return median_or_none([self.per_track[t][source].median for t in sorted(self.per_track)])

    def average(self) -> float | None:
        vals = [self.aggregate(s) for s in self.sources]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def csv_rows(self) -> list[tuple[str, str, float | None]]:
        rows = [(t, s, self.per_track[t][s].median) for t in sorted(self.per_track) for s in self.sources]
        rows += [("ALL", s, self.aggregate(s)) for s in self.sources]
        rows.append(("ALL", "Avg.", self.average()))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["track", "source", "median_sdr_db"])
        for track, source, value in self.csv_rows():
            writer.writerow([track, source, "" if value is None else f"{value:.6f}"])
        return buf.getvalue()


def evaluate_estimates(
    tracks: Sequence[tuple[str, np.ndarray, np.ndarray]],
    sources: Sequence[str],
    sample_rate: int,
    frame_length_s: float = 1.0,
) -> EvalResult:
    """Score ``(track_id, references (J, N), estimates (J, N))`` triples."""
    result = EvalResult(list(sources), frame_length_s=frame_length_s)
    for tid, refs, ests in tracks:
        if refs.shape != ests.shape:
            raise DataError(f"track {tid}: estimate shape {ests.shape} does not match reference {refs.shape}")
        result.per_track[tid] = {
            s: framewise_median_sdr(refs[j], ests[j], frame_length_s, sample_rate) for j, s in enumerate(sources)
        }
    return result


def evaluate_model(network, manifest, split: str = "test", frame_length_s: float = 1.0) -> EvalResult:
    """Separate every mixture of ``split`` and score the estimates."""
    from .data import load_split
    from .network import separate

    loaded = load_split(manifest, split)
    if not loaded:
        raise DataError(f"split '{split}' is empty")
    labels = loaded[0][1].family_labels
    triples = [(entry.id, track.sources, separate(network, track.mixture)) for entry, track in loaded]
    return evaluate_estimates(triples, labels, loaded[0][1].sample_rate, frame_length_s)
