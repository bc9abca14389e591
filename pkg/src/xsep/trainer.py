"""Training loop, Adam, cropping, and seed sweeps for the ablation modes.

Loss modes
----------
* ``use_mdl=False, use_cl=False``: per-source spectral MSE (baseline).
* ``use_mdl=True``: MSE + alpha * (wSDR + 1) over the J sources.
* ``use_cl=True``: the mean of the above over every proper source subset;
  without ``use_mdl`` each subset term is MSE only.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import DatasetManifest, SourceSet, load_split
from .errors import DataError, NumericalError
from .losses import combination_loss, separate_loss
from .metrics import EvalResult, evaluate_model
from .network import (
    Network,
    NetworkConfig,
    analyse_mixture,
    build_network,
    forward_separate,
    save_checkpoint,
    target_magnitudes,
)
from .spectral import SpectralConfig

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 5.0
LOG_NAME = "train_log.csv"
CHECKPOINT_NAME = "best.xsep"
DEFAULT_GAPS = (1,)


@dataclass
class TrainConfig:
    use_mdl: bool = True
    bridge_gaps: tuple[int, ...] = DEFAULT_GAPS
    use_cl: bool = True
    alpha: float = 10.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 4
    crop_seconds: float = 1.0
    epochs: int = 60
    seed: int = 0
    hidden: int = 64
    wsdr_reduction: str = "mean"
    spectral: SpectralConfig = field(default_factory=SpectralConfig)

    def __post_init__(self):
        if isinstance(self.spectral, dict):
            self.spectral = SpectralConfig(**self.spectral)
        self.bridge_gaps = tuple(sorted(set(int(g) for g in self.bridge_gaps)))
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.crop_seconds <= 0:
            raise ValueError("crop_seconds must be > 0")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.use_mdl else 0.0

    @classmethod
    def baseline(cls, **kw) -> TrainConfig:
        return cls(**{"use_mdl": False, "bridge_gaps": (), "use_cl": False, **kw})

    @classmethod
    def xscheme(cls, **kw) -> TrainConfig:
        return cls(**{"use_mdl": True, "bridge_gaps": DEFAULT_GAPS, "use_cl": True, **kw})

    @classmethod
    def full_scale(cls, **kw) -> TrainConfig:
        """Full-scale settings: 4096/75% STFT at 44.1 kHz, batch 14, 6 s crops, 1000 epochs."""
        kw.setdefault("spectral", SpectralConfig.full_scale())
        return cls(batch_size=14, crop_seconds=6.0, epochs=1000, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bridge_gaps"] = list(self.bridge_gaps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# -- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[ad.Tensor]) -> AdamState:
        return cls([np.zeros_like(p.values) for p in params], [np.zeros_like(p.values) for p in params])


def adam_step(
    params: Sequence[ad.Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> AdamState:
    """One in-place Adam update with L2 weight decay folded into the gradient."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient at Adam step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        g = g + weight_decay * p.values
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g
        p.values -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + ADAM_EPS)
    return state


def clip_gradients(grads: list[np.ndarray], max_norm: float = CLIP_NORM) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        for g in grads:
            g *= max_norm / total
    return total


# -- data --------------------------------------------------------------------

def sample_crop(track: SourceSet, crop_seconds: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Same random offset for every source; returns ``(sources (J, n), mixture (n,))``."""
    n = int(round(crop_seconds * track.sample_rate))
    if n > track.length:
        raise DataError(f"track {track.seed}: crop needs {n} samples, only {track.length} available")
    start = int(rng.integers(0, track.length - n + 1))
    sources = track.sources[:, start:start + n]
    return sources, sources.sum(axis=0)


def normalization_stats(tracks: Sequence[SourceSet], spectral: SpectralConfig) -> tuple[np.ndarray, np.ndarray]:
    mags = np.concatenate([analyse_mixture(t.mixture, spectral)[0] for t in tracks], axis=0)
    return mags.mean(axis=0), mags.std(axis=0)


# -- loss --------------------------------------------------------------------

def batch_loss(network: Network, sources: np.ndarray, mixture: np.ndarray, config: TrainConfig):
    """Active training objective for ``sources (B, J, n)`` and ``mixture (B, n)``."""
    spectral = network.spectral
    mag, phase = analyse_mixture(mixture, spectral)
    out = forward_separate(network, mag, phase, mixture.shape[-1])
    J = sources.shape[1]
    tgt_times = [sources[:, j] for j in range(J)]
    tgt_mags = [target_magnitudes(t, spectral) for t in tgt_times]
    fn = combination_loss if config.use_cl else separate_loss
    return fn(out.est_mags, tgt_mags, out.est_times, tgt_times, mixture, config.effective_alpha, config.wsdr_reduction)


# -- loop --------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    wall_seconds: float


@dataclass
class TrainResult:
    network: Network
    history: list[EpochRecord]
    best_epoch: int
    checkpoint: Path | None = None

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "valid_loss", "wall_seconds"])
            for r in self.history:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.valid_loss), f"{r.wall_seconds:.3f}"])


def _stack(batch: Sequence[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([b[0] for b in batch]), np.stack([b[1] for b in batch])


def validation_loss(network: Network, tracks: Sequence[SourceSet], config: TrainConfig) -> float:
    """Objective on whole validation tracks, averaged over tracks."""
    if not tracks:
        return float("nan")
    by_len: dict[int, list[SourceSet]] = {}
    for t in tracks:
        by_len.setdefault(t.length, []).append(t)
    total, count = 0.0, 0
    for group in by_len.values():
        loss, _ = batch_loss(network, np.stack([t.sources for t in group]), np.stack([t.mixture for t in group]), config)
        total += loss.item() * len(group)
        count += len(group)
    return total / count


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train one model; keeps the best-validation parameters and checkpoint."""
    train_tracks = [t for _, t in load_split(manifest, "train")]
    valid_tracks = [t for _, t in load_split(manifest, "valid")]
    if not train_tracks:
        raise DataError("training split is empty")
    J = train_tracks[0].J
    spectral = config.spectral
    if train_tracks[0].sample_rate != spectral.sample_rate:
        raise DataError(
            f"dataset sample rate {train_tracks[0].sample_rate} differs from spectral config {spectral.sample_rate}"
        )
    rng = np.random.default_rng(config.seed)
    net_cfg = NetworkConfig(J=J, bins=spectral.bins, hidden=config.hidden, bridge_gaps=config.bridge_gaps)
    network = build_network(net_cfg, int(rng.integers(2**32)), spectral)
    network.set_normalization(*normalization_stats(train_tracks, spectral))
    params = network.parameters()
    state = AdamState.zeros_like(params)

    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / CHECKPOINT_NAME if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    history: list[EpochRecord] = []
    best = (math.inf, 0, [p.values.copy() for p in params])
    start = time.perf_counter()
    result = TrainResult(network, history, 0, ckpt)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_tracks))
        losses = []
        for b in range(0, len(order), config.batch_size):
            batch = [sample_crop(train_tracks[i], config.crop_seconds, rng) for i in order[b:b + config.batch_size]]
            sources, mixture = _stack(batch)
            ad.zero_grad(params)
            try:
                loss, _ = batch_loss(network, sources, mixture, config)
                ad.backward(loss)
                grads = [p.grad for p in params]
                clip_gradients(grads)
                adam_step(params, grads, state, config.learning_rate, config.weight_decay)
            except NumericalError as exc:
                _restore(params, best[2])
                if out:
                    result.write_log(out / LOG_NAME)
                raise NumericalError(f"training diverged at epoch {epoch}: {exc}") from exc
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        valid_loss = validation_loss(network, valid_tracks, config) if valid_tracks else train_loss
        history.append(EpochRecord(epoch, train_loss, valid_loss, time.perf_counter() - start))
        log.info("epoch %d train %.6f valid %.6f", epoch, train_loss, valid_loss)
        if valid_loss < best[0]:
            best = (valid_loss, epoch, [p.values.copy() for p in params])
            if ckpt:
                save_checkpoint(network, ckpt)
        if out:
            result.write_log(out / LOG_NAME)
    _restore(params, best[2])
    result.best_epoch = best[1]
    return result


def _restore(params: Sequence[ad.Tensor], values: Sequence[np.ndarray]) -> None:
    for p, v in zip(params, values):
        p.values[...] = v


# -- sweeps ------------------------------------------------------------------

@dataclass
class SweepRow:
    seed: int
    source: str
    sdr_db: float | None


@dataclass
class SeedSweepResult:
    sources: list[str]
    rows: list[SweepRow]
    averages: dict[int, float | None]

    def stats(self, source: str) -> tuple[float, float]:
        vals = [r.sdr_db for r in self.rows if r.source == source and r.sdr_db is not None]
        return float(np.mean(vals)), float(np.std(vals))

    def average_stats(self) -> tuple[float, float]:
        vals = [v for v in self.averages.values() if v is not None]
        return float(np.mean(vals)), float(np.std(vals))

    def to_csv(self) -> str:
        lines = ["seed,source,sdr_db,std_db"]
        for r in self.rows:
            lines.append(f"{r.seed},{r.source},{'' if r.sdr_db is None else f'{r.sdr_db:.6f}'},")
        for s in self.sources:
            mean, std = self.stats(s)
            lines.append(f"MEAN,{s},{mean:.6f},{std:.6f}")
        return "\n".join(lines) + "\n"


def run_and_evaluate(config: TrainConfig, manifest: DatasetManifest, out_dir: str | Path | None = None) -> EvalResult:
    result = train(config, manifest, out_dir)
    return evaluate_model(result.network, manifest, "test")


def seed_sweep(
    config: TrainConfig,
    manifest: DatasetManifest,
    seeds: Sequence[int],
    results: dict[int, EvalResult] | None = None,
) -> SeedSweepResult:
    """Train and test one model per seed; mean and population std per source.

    ``results`` may supply already-computed evaluations keyed by seed.
    """
    if len(seeds) < 2:
        raise ValueError(f"seed_sweep needs at least 2 seeds, got {len(seeds)}")
    results = dict(results or {})
    for s in seeds:
        if s not in results:
            results[s] = run_and_evaluate(replace(config, seed=s), manifest)
    sources = results[seeds[0]].sources
    rows = [SweepRow(s, src, results[s].aggregate(src)) for s in seeds for src in sources]
    return SeedSweepResult(sources, rows, {s: results[s].average() for s in seeds})
