"""Deterministic synthetic multi-source tracks and on-disk datasets.

Source ``j`` is drawn from family ``j % 4``: a harmonic note sequence
("vocals"), decaying noise bursts ("drums"), a low tone below 200 Hz ("bass")
and band-limited noise ("other"). The spectra overlap on purpose so that
leakage between estimates actually happens.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .wavio import read_wav, write_wav

FAMILIES = ("vocals", "drums", "bass", "other")
SPLITS = ("train", "valid", "test")
PEAK = 0.9
BASS_CUTOFF_HZ = 200.0
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class SourceSet:
    sources: np.ndarray
    mixture: np.ndarray
    sample_rate: int
    seed: int
    family_labels: list[str]

    @property
    def J(self) -> int:
        return self.sources.shape[0]

    @property
    def length(self) -> int:
        return self.sources.shape[1]


def family_labels(J: int) -> list[str]:
    return [FAMILIES[j % 4] + (str(j // 4) if j >= 4 else "") for j in range(J)]


def _envelope(n: int, sr: int, ramp_s: float = 0.01) -> np.ndarray:
    env = np.ones(n)
    r = min(n // 2, max(1, int(ramp_s * sr)))
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
    env[:r] = ramp
    env[n - r:] = ramp[::-1]
    return env


def _note_track(rng, n: int, sr: int, f_lo: float, f_hi: float, dur_lo: float, dur_hi: float, harmonics, rest_p: float):
    out = np.zeros(n)
    pos = 0
    while pos < n:
        length = min(n - pos, int(rng.uniform(dur_lo, dur_hi) * sr))
        if length <= 0:
            break
        if rng.random() >= rest_p:
            f0 = rng.uniform(f_lo, f_hi)
            t = np.arange(length) / sr
            note = np.zeros(length)
            for h, amp in harmonics(f0):
                note += amp * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
            out[pos:pos + length] = note * _envelope(length, sr)
        pos += length
    return out


def _lowpass(x: np.ndarray, sr: int, cutoff: float) -> np.ndarray:
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / sr)
    spec[freqs >= cutoff] = 0.0
    return np.fft.irfft(spec, n=len(x))


def _harmonic(rng, n, sr):
    nyq = 0.45 * sr

    def partials(f0):
        count = int(min(12, nyq // f0))
        return [(h, rng.uniform(0.6, 1.0) / h) for h in range(1, count + 1)]

    return _note_track(rng, n, sr, 80.0, 400.0, 0.2, 0.6, partials, rest_p=0.15)


def _drums(rng, n, sr):
    out = np.zeros(n)
    step = 60.0 / rng.uniform(90, 160) / 2
    t = 0.0
    while t < n / sr:
        if rng.random() < 0.7:
            start = int(t * sr)
            tau = rng.uniform(0.02, 0.08)
            length = min(n - start, int(6 * tau * sr))
            decay = np.exp(-np.arange(length) / (tau * sr))
            out[start:start + length] += rng.uniform(0.5, 1.0) * decay * rng.standard_normal(length)
        t += step
    return out


def _bass(rng, n, sr):
    def partials(f0):
        return [(1, 1.0)] + ([(2, 0.4)] if 2 * f0 < BASS_CUTOFF_HZ else [])

    tone = _note_track(rng, n, sr, 40.0, 100.0, 0.25, 0.8, partials, rest_p=0.1)
    return _lowpass(tone, sr, BASS_CUTOFF_HZ)


def _other(rng, n, sr):
    lo = rng.uniform(300.0, min(1500.0, 0.3 * sr))
    hi = min(lo + rng.uniform(400.0, 1500.0), 0.45 * sr)
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    noise = np.fft.irfft(spec, n=n)
    lfo = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.3, 2.0) * np.arange(n) / sr + rng.uniform(0, 2 * np.pi))
    return noise * lfo


_GENERATORS = (_harmonic, _drums, _bass, _other)


def generate_track(seed: int, J: int = 4, duration_s: float = 6.0, sample_rate: int = 8000) -> SourceSet:
    """Deterministic J-source track; the mixture is the exact sample-wise sum."""
    if not 2 <= J <= 8:
        raise ValueError(f"J must lie in [2, 8], got {J}")
    if duration_s <= 0:
        raise ValueError(f"duration_s must be positive, got {duration_s}")
    n = int(round(duration_s * sample_rate))
    seq = np.random.SeedSequence(seed)
    children = seq.spawn(J + 1)
    gains = np.random.default_rng(children[-1]).uniform(0.5, 1.0, size=J)
    sources = np.zeros((J, n))
    for j in range(J):
        sig = _GENERATORS[j % 4](np.random.default_rng(children[j]), n, sample_rate)
        rms = np.sqrt(np.mean(sig ** 2))
        if rms > 0:
            sources[j] = gains[j] * sig / rms
    peak = max(np.max(np.abs(sources.sum(axis=0))), np.max(np.abs(sources)))
    if peak > 0:
        sources *= PEAK / peak
    return SourceSet(sources, sources.sum(axis=0), sample_rate, seed, family_labels(J))


# -- datasets ----------------------------------------------------------------

@dataclass
class DatasetConfig:
    n_train: int = 30
    n_valid: int = 5
    n_test: int = 10
    duration_s: float = 6.0
    sample_rate: int = 8000
    J: int = 4
    seed: int = 0

    def counts(self) -> dict[str, int]:
        return {"train": self.n_train, "valid": self.n_valid, "test": self.n_test}


@dataclass
class TrackEntry:
    id: str
    seed: int
    duration: float
    split: str
    path: str
    sources: list[str]


@dataclass
class DatasetManifest:
    config: DatasetConfig
    tracks: list[TrackEntry] = field(default_factory=list)
    root: Path | None = None

    def split(self, name: str) -> list[TrackEntry]:
        return [t for t in self.tracks if t.split == name]

    def to_json(self) -> str:
        doc = {
            "version": MANIFEST_VERSION,
            "config": asdict(self.config),
            "tracks": [asdict(t) for t in self.tracks],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, root: Path | None = None) -> DatasetManifest:
        try:
            doc = json.loads(text)
            if doc.get("version") != MANIFEST_VERSION:
                raise DataError(f"unsupported manifest version {doc.get('version')!r}")
            config = DatasetConfig(**doc["config"])
            tracks = [TrackEntry(**t) for t in doc["tracks"]]
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"malformed manifest: {exc}") from exc
        return cls(config, tracks, root)


def track_seed(dataset_seed: int, split: str, index: int) -> int:
    state = np.random.SeedSequence([dataset_seed, SPLITS.index(split), index]).generate_state(1)
    return int(state[0])


def build_dataset(out_dir: str | Path, config: DatasetConfig | None = None, overwrite: bool = False) -> DatasetManifest:
    """Write per-track source and mixture WAVs plus ``manifest.json`` under ``out_dir``."""
    config = config or DatasetConfig()
    for split, count in config.counts().items():
        if count < 1:
            raise DataError(f"split '{split}' needs at least one track, got {count}")
    root = Path(out_dir)
    manifest_path = root / MANIFEST_NAME
    if manifest_path.exists() and not overwrite:
        raise DataError(f"{manifest_path} already exists (pass overwrite to replace it)")
    labels = family_labels(config.J)
    manifest = DatasetManifest(config, root=root)
    for split, count in config.counts().items():
        for i in range(count):
            tid = f"{split}{i:03d}"
            seed = track_seed(config.seed, split, i)
            track = generate_track(seed, config.J, config.duration_s, config.sample_rate)
            tdir = root / split / tid
            tdir.mkdir(parents=True, exist_ok=True)
            for label, sig in zip(labels, track.sources):
                write_wav(tdir / f"{label}.wav", sig, config.sample_rate)
            write_wav(tdir / "mixture.wav", track.mixture, config.sample_rate)
            rel = tdir.relative_to(root).as_posix()
            manifest.tracks.append(TrackEntry(tid, seed, config.duration_s, split, rel, labels))
    manifest_path.write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"no manifest at {path}")
    return DatasetManifest.from_json(path.read_text(encoding="utf-8"), root)


def load_track(manifest: DatasetManifest, entry: TrackEntry) -> SourceSet:
    """Read a track's stems; the mixture is re-summed from them so it stays exact."""
    tdir = Path(manifest.root) / entry.path
    stems = []
    rate = None
    for label in entry.sources:
        sig, sr = read_wav(tdir / f"{label}.wav")
        if sig.ndim != 1:
            raise DataError(f"{tdir / label}.wav: expected mono stems")
        if rate is not None and sr != rate:
            raise DataError(f"{entry.id}: stems disagree on sample rate ({sr} vs {rate})")
        rate = sr
        stems.append(sig)
    if len({len(s) for s in stems}) != 1:
        raise DataError(f"{entry.id}: stems have different lengths")
    sources = np.stack(stems)
    return SourceSet(sources, sources.sum(axis=0), rate, entry.seed, list(entry.sources))


def load_split(manifest: DatasetManifest, split: str) -> list[tuple[TrackEntry, SourceSet]]:
    return [(e, load_track(manifest, e)) for e in manifest.split(split)]
