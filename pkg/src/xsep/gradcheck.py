"""Central finite-difference validation of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, backward

DENOM_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    per_input: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_error={self.max_rel_error:.3e} (tol {self.tolerance:g}, {self.checked} entries)"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return np.abs(analytic - numeric) / den


def finite_difference_check(
    program: Callable[..., Tensor],
    inputs: Mapping[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    wrt: list[str] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward gradients of ``program(**inputs)`` against central differences.

    ``wrt`` limits which inputs are differentiated (default: all). With
    ``max_entries`` a seeded random subset of each input's entries is probed.
    A failing check is reported, never raised.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    names = list(inputs) if wrt is None else list(wrt)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    tensors = {k: Tensor(v, requires_grad=k in names, name=k) for k, v in arrays.items()}
    out = program(**tensors)
    if out.size != 1:
        raise ValueError(f"program must return a scalar, got shape {out.shape}")
    backward(out)

    def scalar_at(k: str, idx, delta: float) -> float:
        probe = arrays[k].copy()
        probe[idx] += delta
        consts = {n: Tensor(probe if n == k else arrays[n]) for n in arrays}
        return program(**consts).item()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, tolerance, 0)
    for k in names:
        flat_count = arrays[k].size
        picks = np.arange(flat_count)
        if max_entries is not None and flat_count > max_entries:
            picks = np.sort(rng.choice(flat_count, size=max_entries, replace=False))
        analytic = tensors[k].grad.reshape(-1)[picks]
        numeric = np.empty(len(picks))
        for n, flat in enumerate(picks):
            idx = np.unravel_index(flat, arrays[k].shape)
            numeric[n] = (scalar_at(k, idx, step) - scalar_at(k, idx, -step)) / (2 * step)
        err = float(relative_error(analytic, numeric).max(initial=0.0))
        report.per_input[k] = err
        report.max_rel_error = max(report.max_rel_error, err)
        report.checked += len(picks)
    return report
