"""Finite-difference suites for every primitive, loss and the full pipeline."""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .gradcheck import GradCheckReport, finite_difference_check
from .losses import combination_loss, mdl, mse_loss, wsdr_term
from .network import NetworkConfig, analyse_mixture, build_network, forward_separate, target_magnitudes
from .spectral import SpectralConfig, Spectrogram, istft, magnitude_and_phase, stft

LOSS_TOL = 1e-4
PIPELINE_TOL = 1e-3
STEP = 1e-5


def _u(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable[..., ad.Tensor], dict[str, np.ndarray]]]:
    """Scalar programs exercising each primitive on inputs drawn from [-1, 1]."""
    rng = np.random.default_rng(seed)
    w = _u(rng, 3, 4)
    pos = rng.uniform(0.5, 1.5, size=(3, 4))
    s = ad.sum_
    return {
        "add": (lambda a, b: s(ad.square(ad.add(a, b))), {"a": w, "b": _u(rng, 3, 4)}),
        "subtract": (lambda a, b: s(ad.square(ad.sub(a, b))), {"a": w, "b": _u(rng, 3, 4)}),
        "multiply": (lambda a, b: s(ad.mul(a, b)), {"a": w, "b": _u(rng, 3, 4)}),
        "scalar_multiply": (lambda a, c: s(ad.square(ad.mul(a, c))), {"a": w, "c": np.array(0.7)}),
        "matmul": (lambda a, b, c: s(ad.square(ad.matmul(ad.matmul(a, b), c))), {"a": _u(rng, 4, 4), "b": _u(rng, 4, 4), "c": _u(rng, 4, 4)}),
        "batched_matmul": (lambda a, b: s(ad.square(ad.matmul(a, b))), {"a": _u(rng, 2, 3, 4), "b": _u(rng, 4, 5)}),
        "tanh": (lambda a: s(ad.tanh(a)), {"a": w}),
        "sigmoid": (lambda a: s(ad.square(ad.sigmoid(a))), {"a": w}),
        "relu": (lambda a: s(ad.square(ad.relu(a))), {"a": _kinkless(rng, (3, 4))}),
        "sum_axis": (lambda a: s(ad.square(ad.sum_(a, axis=1))), {"a": w}),
        "square": (lambda a: s(ad.square(a)), {"a": w}),
        "sqrt": (lambda a: s(ad.sqrt(a)), {"a": pos}),
        "norm": (lambda a: ad.norm(a), {"a": w}),
        "norm_axis": (lambda a: s(ad.norm(a, axis=-1)), {"a": w}),
        "dot": (lambda a, b: ad.dot(a, b), {"a": w, "b": _u(rng, 3, 4)}),
        "divide": (lambda a, b: s(ad.divide(a, b)), {"a": w, "b": pos}),
        "concatenate": (lambda a, b: s(ad.square(ad.concat([a, b], axis=0))), {"a": w, "b": _u(rng, 2, 4)}),
        "slice": (lambda a: s(ad.square(a[1:, ::2])), {"a": w}),
        "reshape": (lambda a, b: s(ad.mul(ad.reshape(a, (4, 3)), b)), {"a": w, "b": _u(rng, 4, 3)}),
        "add_bias": (lambda a, b: s(ad.square(ad.add_bias(a, b))), {"a": _u(rng, 2, 3, 4), "b": _u(rng, 4)}),
        "branch_mean": (
            lambda a, b, c: s(ad.square(ad.branch_mean([a, b, c]))),
            {"a": w, "b": _u(rng, 3, 4), "c": _u(rng, 3, 4)},
        ),
        "frame": (lambda a: s(ad.square(ad.frame_signal(a, 8, 2))), {"a": _u(rng, 2, 20)}),
        "overlap_add": (lambda a: s(ad.square(ad.overlap_add(a, 2, 16))), {"a": _u(rng, 5, 8)}),
        "rnn_scan": (
            lambda x, w, u, b: s(ad.square(ad.rnn_scan(x, w, u, b))),
            {"x": _u(rng, 2, 5, 3), "w": _u(rng, 3, 4), "u": _u(rng, 4, 4), "b": _u(rng, 4)},
        ),
        "rnn_scan_reverse": (
            lambda x, w, u, b: s(ad.square(ad.rnn_scan(x, w, u, b, reverse=True))),
            {"x": _u(rng, 2, 5, 3), "w": _u(rng, 3, 4), "u": _u(rng, 4, 4), "b": _u(rng, 4)},
        ),
    }


def _kinkless(rng, shape) -> np.ndarray:
    v = _u(rng, *shape)
    return np.where(np.abs(v) < 0.05, 0.5, v)


def loss_cases(seed: int = 0):
    """Losses on random 3-source, 64-sample signals with small magnitude grids."""
    rng = np.random.default_rng(seed)
    J, n = 3, 64
    y = rng.standard_normal((J, n))
    x = y.sum(axis=0)
    yh = y + 0.5 * rng.standard_normal((J, n))
    tm = rng.uniform(0, 1, (J, 3, 4))
    em = tm + 0.3 * rng.standard_normal((J, 3, 4))
    inputs = {f"m{j}": em[j] for j in range(J)} | {f"t{j}": yh[j] for j in range(J)}

    def mags(kw):
        return [kw[f"m{j}"] for j in range(J)]

    def times(kw):
        return [kw[f"t{j}"] for j in range(J)]

    return {
        "mse": (lambda **kw: mse_loss(mags(kw), list(tm)), inputs),
        "wsdr": (lambda **kw: wsdr_term(y[0], kw["t0"], x), inputs),
        "mdl": (lambda **kw: mdl(mags(kw), list(tm), times(kw), list(y), x, 10.0)[0], inputs),
        "combination": (lambda **kw: combination_loss(mags(kw), list(tm), times(kw), list(y), x, 10.0)[0], inputs),
    }


def spectral_cases(seed: int = 0):
    rng = np.random.default_rng(seed)
    cfg = SpectralConfig(window_length=16, hop=4, sample_rate=8000)
    sig = rng.standard_normal(48)
    spec = stft(sig, cfg)
    weights = rng.standard_normal(48)

    def through_istft(re, im):
        out = istft(Spectrogram(re, im, cfg), 48)
        return ad.sum_(ad.mul(ad.Tensor(weights), out))

    def through_magnitude(x):
        mag, _ = magnitude_and_phase(stft(x, cfg))
        return ad.sum_(ad.square(mag))

    return {
        "istft": (through_istft, {"re": spec.real.values, "im": spec.imag.values}),
        "stft_magnitude": (through_magnitude, {"x": sig}),
    }


def pipeline_case(seed: int = 0, J: int = 2, gaps=(1, 2, 3)):
    """Combination loss through the toy network (hidden=4, bins=9) back to every parameter."""
    rng = np.random.default_rng(seed)
    cfg = SpectralConfig(window_length=16, hop=4, sample_rate=8000)
    n = 8
    sources = 0.3 * rng.standard_normal((J, n))
    mixture = sources.sum(axis=0)
    net = build_network(NetworkConfig(J=J, bins=cfg.bins, hidden=4, bridge_gaps=gaps), seed, cfg)
    mag, phase = analyse_mixture(mixture, cfg)
    tgt_mags = [target_magnitudes(s, cfg) for s in sources]
    names = list(net.params)

    def program(**kw):
        for k in names:
            net.params[k] = kw[k]
        out = forward_separate(net, mag, phase, n)
        return combination_loss(out.est_mags, tgt_mags, out.est_times, list(sources), mixture, 10.0)[0]

    return program, {k: v.values.copy() for k, v in net.params.items()}


def run_all(seed: int = 0) -> Iterator[tuple[str, GradCheckReport]]:
    for name, (prog, inputs) in primitive_cases(seed).items():
        yield f"primitive:{name}", finite_difference_check(prog, inputs, STEP, LOSS_TOL)
    for name, (prog, inputs) in spectral_cases(seed).items():
        yield f"spectral:{name}", finite_difference_check(prog, inputs, STEP, LOSS_TOL)
    for name, (prog, inputs) in loss_cases(seed).items():
        yield f"loss:{name}", finite_difference_check(prog, inputs, STEP, LOSS_TOL)
    prog, inputs = pipeline_case(seed)
    yield "pipeline:network_istft_combination", finite_difference_check(prog, inputs, STEP, PIPELINE_TOL)
