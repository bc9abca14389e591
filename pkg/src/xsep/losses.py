"""X-scheme losses: spectral MSE, weighted SDR, multi-domain and combination loss.

All estimates are autodiff tensors; targets and the mixture are constants
(numpy arrays or non-grad tensors). Every function accepts an optional leading
batch axis: magnitude grids are ``(frames, bins)`` or ``(B, frames, bins)`` and
time signals ``(samples,)`` or ``(B, samples)``. Per-example losses follow the
formulas exactly; the returned scalar is their mean over the batch.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

EPS = 1e-12
WSDR_REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True, order=True)
class CombinationSpec:
    """A non-empty proper subset of the J source indices."""

    indices: tuple[int, ...]
    J: int

    def __post_init__(self):
        idx = tuple(self.indices)
        if not 1 <= len(idx) <= self.J - 1:
            raise ValueError(f"combination size must be in [1, {self.J - 1}], got {idx}")
        if list(idx) != sorted(set(idx)) or idx[0] < 0 or idx[-1] >= self.J:
            raise ValueError(f"indices must be sorted, unique and in [0, {self.J}), got {idx}")
        object.__setattr__(self, "indices", idx)

    @property
    def label(self) -> str:
        return "+".join(str(i) for i in self.indices)

    def __str__(self) -> str:
        return "{" + ", ".join(str(i) for i in self.indices) + "}"


@dataclass
class LossReport:
    total: float
    mse_part: float
    wsdr_part: float
    alpha: float
    per_combination: dict[CombinationSpec, tuple[float, float, float]] = field(default_factory=dict)

    def csv_rows(self) -> list[tuple[str, float, float, float]]:
        return [(c.label, *vals) for c, vals in self.per_combination.items()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["subset", "mse", "wsdr", "mdl"])
        for label, mse, wsdr, mdl in self.csv_rows():
            writer.writerow([label, repr(mse), repr(wsdr), repr(mdl)])
        return buf.getvalue()


def enumerate_combinations(J: int) -> list[CombinationSpec]:
    """All subsets of size 1..J-1, ordered by size then lexicographically."""
    if J < 2:
        raise ValueError(f"need at least 2 sources, got J={J}")
    return [CombinationSpec(c, J) for size in range(1, J) for c in combinations(range(J), size)]


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _batch_size(shape: tuple[int, ...], example_ndim: int) -> int:
    if len(shape) == example_ndim:
        return 1
    if len(shape) == example_ndim + 1:
        return shape[0]
    raise ShapeError(f"expected {example_ndim}-d example or batch thereof, got shape {shape}")


def mse_loss(est_mags: Sequence[Tensor], tgt_mags: Sequence) -> Tensor:
    """Sum over sources, frames and bins of squared magnitude error."""
    if len(est_mags) != len(tgt_mags) or not est_mags:
        raise ShapeError(f"mse_loss: {len(est_mags)} estimates vs {len(tgt_mags)} targets")
    total = None
    for est, tgt in zip(est_mags, tgt_mags):
        tgt = ad.constant(tgt)
        if est.shape != tgt.shape:
            raise ShapeError(f"mse_loss: shapes {est.shape} and {tgt.shape} are incompatible")
        term = ad.sum_(ad.square(ad.sub(est, tgt)))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / _batch_size(est_mags[0].shape, 2))


def energy_ratio(y, x) -> np.ndarray | float:
    """``|y|^2 / (|y|^2 + |x - y|^2 + eps)`` along the last axis."""
    y, x = _values(y), _values(x)
    if y.shape != x.shape:
        raise ShapeError(f"energy_ratio: shapes {y.shape} and {x.shape} are incompatible")
    ey = np.sum(y * y, axis=-1)
    er = np.sum((x - y) ** 2, axis=-1)
    rho = ey / (ey + er + EPS)
    return float(rho) if np.ndim(rho) == 0 else rho


def _cosine(a_const: np.ndarray, b: Tensor) -> Tensor:
    """Row-wise cosine between a constant and a tensor, norms clamped at 1e-12."""
    num = ad.sum_(ad.mul(Tensor(a_const), b), axis=-1)
    na = np.maximum(np.linalg.norm(a_const, axis=-1), EPS)
    return ad.divide(ad.divide(num, Tensor(na)), ad.norm(b, axis=-1))


def _wsdr_rows(y, y_hat: Tensor, x) -> Tensor:
    yv, xv = _values(y), _values(x)
    if not (yv.shape == xv.shape == y_hat.shape):
        raise ShapeError(f"wsdr_term: shapes {yv.shape}, {y_hat.shape}, {xv.shape} are incompatible")
    batched = yv.ndim == 2
    if not batched:
        yv, xv = yv[None], xv[None]
        y_hat = ad.reshape(y_hat, (1, -1))
    rho = np.atleast_1d(energy_ratio(yv, xv))
    target = _cosine(yv, y_hat)
    residual = _cosine(xv - yv, ad.sub(Tensor(xv), y_hat))
    return ad.sub(ad.mul(Tensor(-rho), target), ad.mul(Tensor(1.0 - rho), residual))


def wsdr_term(y, y_hat: Tensor, x) -> Tensor:
    """Weighted SDR term for one source; value lies in [-1, 1]."""
    return ad.mean(_wsdr_rows(y, y_hat, x))


@dataclass
class MdlParts:
    mse: float
    wsdr: float
    total: float


def mdl(
    est_mags: Sequence[Tensor],
    tgt_mags: Sequence,
    est_times: Sequence[Tensor],
    tgt_times: Sequence,
    mixture_time,
    alpha: float,
    wsdr_reduction: str = "mean",
) -> tuple[Tensor, MdlParts]:
    """``MSE + alpha * (wSDR + 1)`` over J sources.

    With ``wsdr_reduction="mean"`` the wSDR part is averaged over sources, which
    keeps it in [-1, 1]; ``"sum"`` is the literal per-source sum.
    """
    j = len(est_mags)
    if not (j == len(tgt_mags) == len(est_times) == len(tgt_times)) or j == 0:
        raise ShapeError(
            f"mdl: inconsistent counts {len(est_mags)}, {len(tgt_mags)}, {len(est_times)}, {len(tgt_times)}"
        )
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if wsdr_reduction not in WSDR_REDUCTIONS:
        raise ValueError(f"wsdr_reduction must be one of {WSDR_REDUCTIONS}")
    mse = mse_loss(est_mags, tgt_mags)
    if alpha == 0:
        wsdr_val = float(np.mean([wsdr_term(t, e, mixture_time).item() for t, e in zip(tgt_times, _const(est_times))]))
        if wsdr_reduction == "sum":
            wsdr_val *= j
        return mse, MdlParts(mse.item(), wsdr_val, mse.item())
    wsdr = None
    for tgt, est in zip(tgt_times, est_times):
        term = wsdr_term(tgt, est, mixture_time)
        wsdr = term if wsdr is None else ad.add(wsdr, term)
    if wsdr_reduction == "mean":
        wsdr = ad.scale(wsdr, 1.0 / j)
    shifted = ad.add(wsdr, Tensor(1.0))
    total = ad.add(mse, ad.scale(shifted, alpha))
    return total, MdlParts(mse.item(), wsdr.item(), total.item())


def _const(tensors: Sequence[Tensor]) -> list[Tensor]:
    return [Tensor(t.values) for t in tensors]


def _sum_tensors(items: Sequence[Tensor]) -> Tensor:
    out = items[0]
    for t in items[1:]:
        out = ad.add(out, t)
    return out


def combination_loss(
    est_mags: Sequence[Tensor],
    tgt_mags: Sequence,
    est_times: Sequence[Tensor],
    tgt_times: Sequence,
    mixture_time,
    alpha: float,
    wsdr_reduction: str = "mean",
) -> tuple[Tensor, LossReport]:
    """Mean multi-domain loss over every non-empty proper subset of sources.

    A subset's estimate (target) magnitude is the elementwise sum of its
    members' magnitudes and its time signal the sample-wise sum; the subset is
    then scored as a single pseudo-source.
    """
    J = len(est_mags)
    if J < 2:
        raise ValueError(f"combination_loss needs J >= 2, got {J}")
    tgt_mags = [_values(t) for t in tgt_mags]
    tgt_times = [_values(t) for t in tgt_times]
    per: dict[CombinationSpec, tuple[float, float, float]] = {}
    total = None
    for combo in enumerate_combinations(J):
        idx = combo.indices
        em = _sum_tensors([est_mags[i] for i in idx])
        et = _sum_tensors([est_times[i] for i in idx])
        tm = np.sum([tgt_mags[i] for i in idx], axis=0)
        tt = np.sum([tgt_times[i] for i in idx], axis=0)
        loss, parts = mdl([em], [tm], [et], [tt], mixture_time, alpha, wsdr_reduction)
        per[combo] = (parts.mse, parts.wsdr, parts.total)
        total = loss if total is None else ad.add(total, loss)
    n = len(per)
    total = ad.scale(total, 1.0 / n)
    report = LossReport(
        total=total.item(),
        mse_part=float(np.mean([v[0] for v in per.values()])),
        wsdr_part=float(np.mean([v[1] for v in per.values()])),
        alpha=alpha,
        per_combination=per,
    )
    return total, report


def separate_loss(
    est_mags: Sequence[Tensor],
    tgt_mags: Sequence,
    est_times: Sequence[Tensor],
    tgt_times: Sequence,
    mixture_time,
    alpha: float,
    wsdr_reduction: str = "mean",
) -> tuple[Tensor, LossReport]:
    """MDL over the J sources without combinations, wrapped in a :class:`LossReport`."""
    loss, parts = mdl(est_mags, tgt_mags, est_times, tgt_times, mixture_time, alpha, wsdr_reduction)
    return loss, LossReport(parts.total, parts.mse, parts.wsdr, alpha)


def correlation_term_probe(y1, y2, e1, e2) -> tuple[float, float, float]:
    """Squared-error sums for a combined pair versus the two sources separately.

    With estimates ``y_j + e_j`` returns ``(combined, separate_sum, cross)``
    where ``cross = combined - separate_sum`` equals ``2 * sum(e1 * e2)`` up
    to rounding.
    """
    y1, y2, e1, e2 = (np.asarray(v, dtype=np.float64) for v in (y1, y2, e1, e2))
    if not (y1.shape == y2.shape == e1.shape == e2.shape):
        raise ShapeError("correlation_term_probe: all signals must share one shape")
    u = y1 + y2
    u_hat = (y1 + e1) + (y2 + e2)
    combined = float(np.sum((u - u_hat) ** 2))
    separate = float(np.sum((y1 - (y1 + e1)) ** 2) + np.sum((y2 - (y2 + e2)) ** 2))
    return combined, separate, combined - separate
