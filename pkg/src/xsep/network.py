"""Multi-branch mask-estimation network with parameter-free bridging.

Each of the J branches is the block stack

    1. Affine + tanh            (bins -> hidden)
    2. bidirectional tanh RNN   (hidden -> 2 * hidden)
    3. Affine + relu            (2 * hidden -> hidden)
    4. Affine + sigmoid head    (hidden -> bins), the mask

Bridging at gap ``g`` (after block ``g``) replaces every branch's activation
with the branch mean, so all J next blocks read the same tensor.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ShapeError
from .spectral import SpectralConfig, istft, magnitude_and_phase, polar_to_spectrogram, stft

NUM_BLOCKS = 4
VALID_GAPS = frozenset(range(1, NUM_BLOCKS))
MAGIC = b"XSEP"
FORMAT_VERSION = 1
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class NetworkConfig:
    J: int = 4
    bins: int = 129
    hidden: int = 64
    bridge_gaps: tuple[int, ...] = ()

    def __post_init__(self):
        if self.J < 1:
            raise ValueError(f"J must be >= 1, got {self.J}")
        if self.hidden < 1 or self.bins < 1:
            raise ValueError("hidden and bins must be >= 1")
        gaps = tuple(sorted(set(int(g) for g in self.bridge_gaps)))
        bad = [g for g in gaps if g not in VALID_GAPS]
        if bad:
            raise ValueError(f"invalid bridge gap(s) {bad}; allowed gaps are {sorted(VALID_GAPS)}")
        object.__setattr__(self, "bridge_gaps", gaps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bridge_gaps"] = list(self.bridge_gaps)
        return d


def layer_shapes(config: NetworkConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Per-branch ``(name, shape, fan_in)`` in declaration order."""
    f, h = config.bins, config.hidden
    return [
        ("affine1.weight", (f, h), f),
        ("affine1.bias", (h,), f),
        ("rnn_fwd.input", (h, h), h),
        ("rnn_fwd.recurrent", (h, h), h),
        ("rnn_fwd.bias", (h,), h),
        ("rnn_bwd.input", (h, h), h),
        ("rnn_bwd.recurrent", (h, h), h),
        ("rnn_bwd.bias", (h,), h),
        ("affine3.weight", (2 * h, h), 2 * h),
        ("affine3.bias", (h,), 2 * h),
        ("head.weight", (h, f), h),
        ("head.bias", (f,), h),
    ]


@dataclass
class SeparationOutput:
    masks: list[Tensor]
    est_mags: list[Tensor]
    est_times: list[Tensor]


@dataclass
class Network:
    config: NetworkConfig
    params: dict[str, Tensor]
    input_mean: np.ndarray = field(default=None)
    input_std: np.ndarray = field(default=None)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)

    def __post_init__(self):
        if self.input_mean is None:
            self.input_mean = np.zeros(self.config.bins)
        if self.input_std is None:
            self.input_std = np.ones(self.config.bins)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def branch_params(self, j: int) -> dict[str, Tensor]:
        prefix = f"branch{j}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def set_normalization(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.input_mean = np.asarray(mean, dtype=np.float64).copy()
        self.input_std = np.maximum(np.asarray(std, dtype=np.float64), STD_FLOOR)

    def with_gaps(self, gaps: Sequence[int]) -> Network:
        """Same parameters (shared tensors), different bridging."""
        cfg = NetworkConfig(self.config.J, self.config.bins, self.config.hidden, tuple(gaps))
        return Network(cfg, self.params, self.input_mean, self.input_std, self.spectral)

    def masks(self, mixture_mag) -> list[Tensor]:
        """Per-source masks in (0, 1) for a ``(frames, bins)`` or ``(B, frames, bins)`` magnitude."""
        mag = mixture_mag.values if isinstance(mixture_mag, Tensor) else np.asarray(mixture_mag, dtype=np.float64)
        if mag.shape[-1] != self.config.bins or mag.ndim not in (2, 3):
            raise ShapeError(f"mixture magnitude shape {mag.shape} does not match {self.config.bins} bins")
        squeeze = mag.ndim == 2
        if squeeze:
            mag = mag[None]
        x = Tensor((mag - self.input_mean) / self.input_std)
        gaps = self.config.bridge_gaps
        J = self.config.J
        p = [self.branch_params(j) for j in range(J)]

        h = [ad.tanh(ad.add_bias(ad.matmul(x, p[j]["affine1.weight"]), p[j]["affine1.bias"])) for j in range(J)]
        h = _bridge(h) if 1 in gaps else h
        h = [
            ad.concat(
                [
                    ad.rnn_scan(h[j], p[j]["rnn_fwd.input"], p[j]["rnn_fwd.recurrent"], p[j]["rnn_fwd.bias"]),
                    ad.rnn_scan(h[j], p[j]["rnn_bwd.input"], p[j]["rnn_bwd.recurrent"], p[j]["rnn_bwd.bias"], reverse=True),
                ],
                axis=-1,
            )
            for j in range(J)
        ]
        h = _bridge(h) if 2 in gaps else h
        h = [ad.relu(ad.add_bias(ad.matmul(h[j], p[j]["affine3.weight"]), p[j]["affine3.bias"])) for j in range(J)]
        h = _bridge(h) if 3 in gaps else h
        out = [ad.sigmoid(ad.add_bias(ad.matmul(h[j], p[j]["head.weight"]), p[j]["head.bias"])) for j in range(J)]
        if squeeze:
            out = [ad.reshape(m, m.shape[1:]) for m in out]
        return out


def _bridge(h: list[Tensor]) -> list[Tensor]:
    shared = ad.branch_mean(h)
    return [shared] * len(h)


def build_network(config: NetworkConfig, seed: int, spectral: SpectralConfig | None = None) -> Network:
    """Initialise every parameter from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    spectral = spectral or SpectralConfig()
    if spectral.bins != config.bins:
        raise ValueError(f"network has {config.bins} bins but spectral config gives {spectral.bins}")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for j in range(config.J):
        for name, shape, fan_in in layer_shapes(config):
            bound = 1.0 / np.sqrt(fan_in)
            key = f"branch{j}.{name}"
            params[key] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=key)
    return Network(config, params, spectral=spectral)


def parameter_count(network: Network) -> int:
    return sum(p.size for p in network.params.values())


def padded_length(length: int, spectral: SpectralConfig) -> tuple[int, int]:
    """Left pad and total padded length so every input sample sees full window overlap."""
    n, hop = spectral.window_length, spectral.hop
    left = n - hop
    body = left + length + left
    frames = max(1, -(-(body - n) // hop) + 1)
    return left, (frames - 1) * hop + n


def pad_signal(x: np.ndarray, spectral: SpectralConfig) -> np.ndarray:
    left, total = padded_length(x.shape[-1], spectral)
    out = np.zeros(x.shape[:-1] + (total,))
    out[..., left:left + x.shape[-1]] = x
    return out


def analyse_mixture(mixture: np.ndarray, spectral: SpectralConfig) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Magnitude and phase of the zero-padded mixture (constants, no graph)."""
    spec = stft(Tensor(pad_signal(np.asarray(mixture, dtype=np.float64), spectral)), spectral)
    mag, phase = magnitude_and_phase(spec)
    return mag.values, phase


def target_magnitudes(sources: np.ndarray, spectral: SpectralConfig) -> np.ndarray:
    """Magnitudes of padded source signals; works on any leading shape."""
    spec = stft(Tensor(pad_signal(np.asarray(sources, dtype=np.float64), spectral)), spectral)
    return magnitude_and_phase(spec)[0].values


def forward_separate(
    network: Network,
    mixture_mag: np.ndarray,
    mixture_phase: tuple[np.ndarray, np.ndarray],
    out_length: int,
) -> SeparationOutput:
    """Masks, masked magnitudes, and mixture-phase resynthesis per source.

    ``mixture_mag``/``mixture_phase`` come from :func:`analyse_mixture`;
    time estimates are cropped back to ``out_length`` unpadded samples.
    """
    spectral = network.spectral
    mag = np.asarray(mixture_mag, dtype=np.float64)
    if mag.shape != mixture_phase[0].shape:
        raise ShapeError(f"mixture magnitude {mag.shape} and phase {mixture_phase[0].shape} differ")
    left, total = padded_length(out_length, spectral)
    if spectral.num_frames(total) != mag.shape[-2]:
        raise ShapeError(
            f"{mag.shape[-2]} frames do not match a {out_length}-sample signal ({spectral.num_frames(total)} expected)"
        )
    masks = network.masks(mag)
    mix = Tensor(mag)
    est_mags, est_times = [], []
    for m in masks:
        est = ad.mul(m, mix)
        est_mags.append(est)
        wave = istft(polar_to_spectrogram(est, mixture_phase, spectral), total)
        est_times.append(ad.slice_(wave, (Ellipsis, slice(left, left + out_length))))
    return SeparationOutput(masks, est_mags, est_times)


def separate(network: Network, mixture: np.ndarray) -> np.ndarray:
    """Inference helper: ``(J, N)`` source estimates for a 1-d mixture."""
    mixture = np.asarray(mixture, dtype=np.float64)
    mag, phase = analyse_mixture(mixture, network.spectral)
    out = forward_separate(network, mag, phase, mixture.shape[-1])
    return np.stack([t.values for t in out.est_times])


# -- checkpoint --------------------------------------------------------------

def _header(network: Network) -> bytes:
    meta = {
        "network": network.config.to_dict(),
        "spectral": network.spectral.to_dict(),
        "input_mean": network.input_mean.tolist(),
        "input_std": network.input_std.tolist(),
        "params": [[k, list(v.shape)] for k, v in network.params.items()],
    }
    return json.dumps(meta, sort_keys=True).encode("utf-8")


def save_checkpoint(network: Network, path: str | Path) -> None:
    blob = _header(network)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in network.params.values():
            fh.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Network:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header at offset {len(data)} (need 12 bytes)")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {data[:4]!r} at offset 0")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} at offset 4")
    (size,) = struct.unpack_from("<I", data, 8)
    if 12 + size > len(data):
        raise CheckpointError(f"{path}: config truncated at offset {len(data)} (need {12 + size})")
    try:
        meta = json.loads(data[12:12 + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable config at offset 12: {exc}") from exc
    net = meta["network"]
    config = NetworkConfig(net["J"], net["bins"], net["hidden"], tuple(net["bridge_gaps"]))
    spectral = SpectralConfig(**meta["spectral"])
    offset = 12 + size
    params: dict[str, Tensor] = {}
    for name, shape in meta["params"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: parameter '{name}' truncated at offset {len(data)} (need {end})")
        values = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        params[name] = Tensor(values, requires_grad=True, name=name)
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes at offset {offset}")
    return Network(
        config,
        params,
        np.asarray(meta["input_mean"], dtype=np.float64),
        np.asarray(meta["input_std"], dtype=np.float64),
        spectral,
    )
