"""Differentiable STFT/ISTFT built from explicit DFT matrix products.

Frames start at sample 0 with no centre padding. The analysis window is
folded into the forward DFT matrix and the synthesis window into the inverse
one, so gradients flow through ordinary matmul backward. The inverse divides
the overlap-added frames by the squared-window envelope (least-squares ISTFT),
which makes ``istft(stft(x))`` exact wherever the envelope is non-zero.

DFT scaling is a config constant: ``"ortho"`` (1/sqrt(n) both ways, default)
or ``"backward"`` (unscaled forward, 1/n inverse, the numpy/torch default).
With ``"ortho"`` the one-sided energy identity reads

    sum_t sum_f c_f |X[t, f]|^2 == sum_k env[k] * x[k]^2

where ``c_f`` is 1 at DC/Nyquist and 2 elsewhere, and ``env`` is the
squared-window overlap envelope (1.5 in the interior for Hann at 75% overlap).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

MAG_EPS = 1e-24
ENVELOPE_FLOOR = 1e-12
NORMALIZATIONS = ("ortho", "backward")


@dataclass(frozen=True)
class SpectralConfig:
    window_length: int = 256
    hop: int = 64
    sample_rate: int = 8000
    normalization: str = "ortho"

    def __post_init__(self):
        if self.window_length < 2 or self.window_length % 2:
            raise ValueError(f"window_length must be even and >= 2, got {self.window_length}")
        if not 0 < self.hop <= self.window_length:
            raise ValueError(f"hop must lie in (0, window_length], got {self.hop}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")

    @classmethod
    def full_scale(cls, sample_rate: int = 44100) -> SpectralConfig:
        """4096-sample Hann window at 75% overlap."""
        return cls(window_length=4096, hop=1024, sample_rate=sample_rate)

    @property
    def bins(self) -> int:
        return self.window_length // 2 + 1

    def num_frames(self, length: int) -> int:
        if length < self.window_length:
            return 0
        return 1 + (length - self.window_length) // self.hop

    def to_dict(self) -> dict:
        return asdict(self)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window ``0.5 - 0.5 cos(2 pi k / n)``."""
    if n < 2 or n % 2:
        raise ValueError(f"Hann window length must be even and >= 2, got {n}")
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


@lru_cache(maxsize=8)
def _analysis_matrices(n: int, normalization: str) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(n)[:, None]
    f = np.arange(n // 2 + 1)[None, :]
    ang = 2.0 * np.pi * k * f / n
    s = 1.0 / np.sqrt(n) if normalization == "ortho" else 1.0
    w = hann_window(n)[:, None]
    re, im = w * np.cos(ang) * s, -w * np.sin(ang) * s
    re.flags.writeable = False
    im.flags.writeable = False
    return re, im


@lru_cache(maxsize=8)
def _synthesis_matrices(n: int, normalization: str) -> tuple[np.ndarray, np.ndarray]:
    f = np.arange(n // 2 + 1)[:, None]
    k = np.arange(n)[None, :]
    ang = 2.0 * np.pi * f * k / n
    weight = np.full((n // 2 + 1, 1), 2.0)
    weight[0] = weight[-1] = 1.0
    s = 1.0 / np.sqrt(n) if normalization == "ortho" else 1.0 / n
    w = hann_window(n)[None, :]
    re, im = weight * np.cos(ang) * s * w, -weight * np.sin(ang) * s * w
    re.flags.writeable = False
    im.flags.writeable = False
    return re, im


def overlap_envelope(config: SpectralConfig, frames: int, length: int | None = None) -> np.ndarray:
    """Sum of squared shifted windows over ``frames`` frames."""
    n, hop = config.window_length, config.hop
    total = (frames - 1) * hop + n
    env = np.zeros(max(total, length or 0))
    w2 = hann_window(n) ** 2
    for t in range(frames):
        env[t * hop:t * hop + n] += w2
    return env


@dataclass
class Spectrogram:
    """One-sided complex spectrogram; ``real``/``imag`` are ``(..., frames, bins)``."""

    real: Tensor
    imag: Tensor
    config: SpectralConfig

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"spectrogram parts differ: {self.real.shape} vs {self.imag.shape}")
        if self.real.shape[-1] != self.config.bins:
            raise ShapeError(f"expected {self.config.bins} bins, got {self.real.shape[-1]}")

    @property
    def frames(self) -> int:
        return self.real.shape[-2]

    @property
    def bins(self) -> int:
        return self.real.shape[-1]

    def complex(self) -> np.ndarray:
        return self.real.values + 1j * self.imag.values


def stft(x: Tensor | np.ndarray, config: SpectralConfig) -> Spectrogram:
    x = ad.constant(x)
    n = config.window_length
    if x.shape[-1] < n:
        raise ShapeError(f"stft: signal of {x.shape[-1]} samples is shorter than the {n}-sample window")
    frames = ad.frame_signal(x, n, config.hop)
    c, s = _analysis_matrices(n, config.normalization)
    return Spectrogram(ad.matmul(frames, Tensor(c)), ad.matmul(frames, Tensor(s)), config)


def istft(spec: Spectrogram, out_length: int) -> Tensor:
    """Least-squares overlap-add inverse, truncated or zero-padded to ``out_length``."""
    if out_length <= 0:
        raise ValueError(f"out_length must be positive, got {out_length}")
    cfg = spec.config
    if spec.frames < 1:
        raise ShapeError("istft: spectrogram has no frames")
    n, hop = cfg.window_length, cfg.hop
    c, s = _synthesis_matrices(n, cfg.normalization)
    frames = ad.add(ad.matmul(spec.real, Tensor(c)), ad.matmul(spec.imag, Tensor(s)))
    total = (spec.frames - 1) * hop + n
    signal = ad.overlap_add(frames, hop, total)
    env = overlap_envelope(cfg, spec.frames)
    inv = 1.0 / np.maximum(env, ENVELOPE_FLOOR)
    signal = ad.mul(signal, Tensor(np.broadcast_to(inv, signal.shape)))
    if out_length <= total:
        return ad.slice_(signal, (Ellipsis, slice(0, out_length)))
    pad = Tensor(np.zeros(signal.shape[:-1] + (out_length - total,)))
    return ad.concat([signal, pad], axis=-1)


def magnitude_and_phase(spec: Spectrogram) -> tuple[Tensor, tuple[np.ndarray, np.ndarray]]:
    """Differentiable magnitude plus the (constant) unit phase pair ``(cos, sin)``.

    Zero bins get phase ``(1, 0)``.
    """
    power = ad.add(ad.square(spec.real), ad.square(spec.imag))
    mag = ad.sqrt(ad.add(power, Tensor(np.full(power.shape, MAG_EPS))))
    re, im, m = spec.real.values, spec.imag.values, mag.values
    zero = (re == 0) & (im == 0)
    cos = np.where(zero, 1.0, re / m)
    sin = np.where(zero, 0.0, im / m)
    return mag, (cos, sin)


def polar_to_spectrogram(mag: Tensor, phase: tuple[np.ndarray, np.ndarray], config: SpectralConfig) -> Spectrogram:
    cos, sin = phase
    return Spectrogram(ad.mul(mag, Tensor(cos)), ad.mul(mag, Tensor(sin)), config)


def spectrogram_energy(spec: Spectrogram) -> float:
    """One-sided energy ``sum c_f |X|^2`` (see module docstring for the identity)."""
    power = spec.real.values ** 2 + spec.imag.values ** 2
    weight = np.full(spec.bins, 2.0)
    weight[0] = weight[-1] = 1.0
    total = float(np.sum(power * weight))
    if spec.config.normalization == "backward":
        total /= spec.config.window_length
    return total
