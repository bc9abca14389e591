import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xsep.autodiff import Tensor
from xsep.errors import ShapeError
from xsep.gradcheck import finite_difference_check
from xsep.losses import (
    CombinationSpec,
    _cosine,
    _wsdr_rows,
    combination_loss,
    correlation_term_probe,
    energy_ratio,
    enumerate_combinations,
    mdl,
    mse_loss,
    wsdr_term,
)
from xsep.selfcheck import loss_cases


# -- independent oracles (plain Python / numpy, no autodiff) -----------------

def mse_oracle(est, tgt):
    total = 0.0
    for e, t in zip(est, tgt):
        for row_e, row_t in zip(e, t):
            for a, b in zip(row_e, row_t):
                total += (b - a) ** 2
    return total


def cos_oracle(a, b):
    return float(a @ b / (max(np.linalg.norm(a), 1e-12) * max(np.linalg.norm(b), 1e-12)))


def wsdr_oracle(y, yh, x):
    ey, er = float(y @ y), float((x - y) @ (x - y))
    rho = ey / (ey + er + 1e-12)
    return -rho * cos_oracle(y, yh) - (1 - rho) * cos_oracle(x - y, x - yh)


def cl_oracle(em, tm, et, tt, x, alpha):
    J = len(em)
    terms = []
    for mask in range(1, 2 ** J - 1):
        idx = [j for j in range(J) if mask >> j & 1]
        e_m, t_m = sum(em[i] for i in idx), sum(tm[i] for i in idx)
        e_t, t_t = sum(et[i] for i in idx), sum(tt[i] for i in idx)
        terms.append(np.sum((t_m - e_m) ** 2) + alpha * (wsdr_oracle(t_t, e_t, x) + 1.0))
    return float(np.mean(terms)), len(terms)


def problem(J, seed, n=64, grid=(3, 4), noise=0.3):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((J, n))
    x = y.sum(axis=0)
    yh = y + noise * rng.standard_normal((J, n))
    tm = rng.uniform(0, 1, (J, *grid))
    em = tm + noise * rng.standard_normal((J, *grid))
    return y, x, yh, tm, em


# -- MSE -----------------------------------------------------------------------

def test_mse_zero_on_equal():
    g = np.random.default_rng(0).uniform(size=(3, 4))
    assert mse_loss([Tensor(g)], [g]).item() == 0.0


def test_mse_unit_errors_count():
    est = [Tensor(np.zeros((3, 4))) for _ in range(2)]
    assert mse_loss(est, [np.ones((3, 4))] * 2).item() == 24.0


def test_mse_matches_loop_oracle():
    _, _, _, tm, em = problem(3, 1, grid=(5, 6))
    assert mse_loss([Tensor(e) for e in em], list(tm)).item() == pytest.approx(mse_oracle(em, tm), abs=1e-12)


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse_loss([Tensor(np.zeros((3, 4)))], [np.zeros((4, 3))])


def test_mse_batch_is_mean_of_examples():
    _, _, _, tm, em = problem(2, 2, grid=(3, 4))
    batch_e = [Tensor(np.stack([e, 2 * e])) for e in em]
    batch_t = [np.stack([t, t]) for t in tm]
    expected = 0.5 * (mse_oracle(em, tm) + mse_oracle(2 * em, tm))
    assert mse_loss(batch_e, batch_t).item() == pytest.approx(expected, rel=1e-12)


# -- energy ratio and wSDR ----------------------------------------------------------

def test_energy_ratio_cases():
    y = np.array([1.0, -2.0, 0.5])
    assert energy_ratio(y, y) == pytest.approx(1.0)
    assert energy_ratio(np.zeros(3), y) == pytest.approx(0.0)
    assert energy_ratio(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(0.5)


def test_wsdr_perfect_and_inverted():
    rng = np.random.default_rng(3)
    y, other = rng.standard_normal(32), rng.standard_normal(32)
    x = y + other
    assert wsdr_term(y, Tensor(y), x).item() == pytest.approx(-1.0, abs=1e-12)
    # y_hat = -y and x - y_hat = -(x - y) hold together when x = 0
    assert wsdr_term(y, Tensor(-y), np.zeros(32)).item() == pytest.approx(1.0, abs=1e-12)


def test_wsdr_matches_oracle():
    y, x, yh, _, _ = problem(3, 4)
    for j in range(3):
        assert wsdr_term(y[j], Tensor(yh[j]), x).item() == pytest.approx(wsdr_oracle(y[j], yh[j], x), abs=1e-12)


def test_wsdr_monte_carlo_bound():
    rng = np.random.default_rng(5)
    y, yh, x = (rng.standard_normal((10_000, 64)) for _ in range(3))
    rows = _wsdr_rows(y, Tensor(yh), x).values
    assert rows.shape == (10_000,)
    assert rows.min() >= -1 - 1e-12 and rows.max() <= 1 + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_wsdr_bound_property(seed, scale):
    rng = np.random.default_rng(seed)
    y, yh, x = (scale * rng.standard_normal(16) for _ in range(3))
    assert -1 - 1e-12 <= wsdr_term(y, Tensor(yh), x).item() <= 1 + 1e-12


# -- enumeration -------------------------------------------------------------

def test_enumeration_j4():
    combos = enumerate_combinations(4)
    assert len(combos) == 14
    assert all(c.indices != (0, 1, 2, 3) for c in combos)
    assert combos[0].indices == (0,) and combos[-1].indices == (1, 2, 3)


def test_enumeration_small():
    assert [c.indices for c in enumerate_combinations(2)] == [(0,), (1,)]
    assert len(enumerate_combinations(3)) == 6
    with pytest.raises(ValueError):
        enumerate_combinations(1)


@pytest.mark.parametrize("J", range(2, 9))
def test_enumeration_matches_powerset(J):
    powerset = {s for r in range(1, J) for s in itertools.combinations(range(J), r)}
    got = [c.indices for c in enumerate_combinations(J)]
    assert len(got) == 2 ** J - 2 == len(powerset)
    assert set(got) == powerset
    assert got == sorted(got, key=lambda s: (len(s), s))


def test_combination_spec_validation():
    with pytest.raises(ValueError):
        CombinationSpec((0, 1, 2), 3)
    with pytest.raises(ValueError):
        CombinationSpec((1, 0), 3)
    with pytest.raises(ValueError):
        CombinationSpec((), 3)
    assert str(CombinationSpec((0, 2), 4)) == "{0, 2}"


# -- MDL and CL --------------------------------------------------------------

def _perfect(J, seed=0):
    y, x, _, tm, _ = problem(J, seed)
    return [Tensor(m) for m in tm], list(tm), [Tensor(t) for t in y], list(y), x


def test_mdl_zero_at_truth():
    em, tm, et, tt, x = _perfect(3)
    loss, parts = mdl(em, tm, et, tt, x, 10.0)
    assert loss.item() == pytest.approx(0.0, abs=1e-9)
    assert parts.wsdr == pytest.approx(-1.0)


def test_mdl_alpha_zero_is_mse():
    y, x, yh, tm, em = problem(3, 7)
    ets = [Tensor(t) for t in yh]
    emt = [Tensor(m) for m in em]
    assert mdl(emt, list(tm), ets, list(y), x, 0.0)[0].item() == mse_loss(emt, list(tm)).item()


def test_mdl_shift_range_and_errors():
    y, x, yh, tm, em = problem(2, 8)
    loss, parts = mdl([Tensor(m) for m in em], list(tm), [Tensor(t) for t in yh], list(y), x, 10.0)
    assert 0.0 <= loss.item() - parts.mse <= 20.0
    with pytest.raises(ShapeError):
        mdl([Tensor(em[0])], list(tm), [Tensor(t) for t in yh], list(y), x, 10.0)
    with pytest.raises(ValueError):
        mdl([Tensor(m) for m in em], list(tm), [Tensor(t) for t in yh], list(y), x, -1.0)


def test_mdl_sum_reduction_is_literal_sum():
    y, x, yh, tm, em = problem(3, 9)
    args = ([Tensor(m) for m in em], list(tm), [Tensor(t) for t in yh], list(y), x, 2.0)
    literal = mse_oracle(em, tm) + 2.0 * (sum(wsdr_oracle(y[j], yh[j], x) for j in range(3)) + 1.0)
    assert mdl(*args, wsdr_reduction="sum")[0].item() == pytest.approx(literal, rel=1e-12)


@pytest.mark.parametrize("J", [2, 3, 4])
def test_combination_zero_at_truth(J):
    loss, report = combination_loss(*_perfect(J, J), 10.0)
    assert abs(loss.item()) < 1e-9
    assert len(report.per_combination) == 2 ** J - 2
    for mse, wsdr, total in report.per_combination.values():
        assert mse == 0.0 and wsdr == pytest.approx(-1.0) and abs(total) < 1e-9


@pytest.mark.parametrize("J,seed", [(2, 0), (3, 1), (4, 2)])
def test_combination_matches_bruteforce(J, seed):
    y, x, yh, tm, em = problem(J, seed)
    loss, report = combination_loss([Tensor(m) for m in em], list(tm), [Tensor(t) for t in yh], list(y), x, 10.0)
    expected, n = cl_oracle(em, tm, yh, y, x, 10.0)
    assert len(report.per_combination) == n
    assert loss.item() == pytest.approx(expected, abs=1e-10)
    assert report.total == pytest.approx(report.mse_part + 10.0 * (report.wsdr_part + 1.0), abs=1e-9)


def test_singleton_terms_equal_per_source_mdl():
    y, x, yh, tm, em = problem(4, 11)
    _, report = combination_loss([Tensor(m) for m in em], list(tm), [Tensor(t) for t in yh], list(y), x, 10.0)
    for j in range(4):
        single, _ = mdl([Tensor(em[j])], [tm[j]], [Tensor(yh[j])], [y[j]], x, 10.0)
        assert report.per_combination[CombinationSpec((j,), 4)][2] == pytest.approx(single.item(), abs=1e-10)


def test_strictly_positive_off_truth():
    rng = np.random.default_rng(12)
    em, tm, et, tt, x = _perfect(3)
    em[1] = Tensor(tm[1] + 1e-3 * rng.standard_normal(tm[1].shape))
    assert mdl(em, tm, et, tt, x, 10.0)[0].item() > 0
    assert combination_loss(em, tm, et, tt, x, 10.0)[0].item() > 0


def test_combination_needs_two_sources():
    em, tm, et, tt, x = _perfect(2)
    with pytest.raises(ValueError):
        combination_loss(em[:1], tm[:1], et[:1], tt[:1], x, 1.0)


def test_report_csv():
    _, report = combination_loss(*_perfect(3), 10.0)
    lines = report.to_csv().strip().splitlines()
    assert lines[0] == "subset,mse,wsdr,mdl"
    assert len(lines) == 7 and lines[4].startswith("0+1,")


@pytest.mark.parametrize("name", ["mse", "wsdr", "mdl", "combination"])
def test_loss_gradients(name):
    prog, inputs = loss_cases()[name]
    report = finite_difference_check(prog, inputs, 1e-5, 1e-4)
    assert report.passed, report


# -- cross term and orthogonality --------------------------------------------

def test_probe_examples():
    z = np.zeros(2)
    assert correlation_term_probe(z, z, z, z) == (0.0, 0.0, 0.0)
    e = np.array([1.0, 0.0])
    assert correlation_term_probe(z, z, e, e)[2] == 2.0
    combined, separate, cross = correlation_term_probe(z, z, e, -e)
    assert (combined, separate, cross) == (0.0, 2.0, -2.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cross_term_identity(seed):
    y1, y2, e1, e2 = np.random.default_rng(seed).standard_normal((4, 50))
    combined, separate, cross = correlation_term_probe(y1, y2, e1, e2)
    assert cross == pytest.approx(2 * np.sum(e1 * e2), abs=1e-12 * (combined + separate + 1))


def orthogonal_instance():
    """y1=(1,0), y1_hat=(0,-1), y2=(0,1), y2_hat=(-1,0) plus a third, perfectly estimated source."""
    y = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    yh = np.array([[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    return y, yh, y.sum(axis=0)


def test_orthogonal_errors_visible_only_in_combination():
    y, yh, x = orthogonal_instance()
    single = [_cosine(y[j][None], Tensor(yh[j][None])).item() for j in range(2)]
    pair = _cosine((y[0] + y[1])[None], Tensor((yh[0] + yh[1])[None])).item()
    assert single == pytest.approx([0.0, 0.0], abs=1e-12)
    assert pair == pytest.approx(-1.0, abs=1e-12)

    mags = [Tensor(np.ones((1, 2))) for _ in range(3)]
    times = [Tensor(v, requires_grad=True) for v in yh]
    loss, report = combination_loss(mags, [np.ones((1, 2))] * 3, times, list(y), x, 1.0)
    singles = [v[2] for c, v in report.per_combination.items() if len(c.indices) == 1]
    assert loss.item() > np.mean(singles)
    loss.backward()
    assert np.linalg.norm(times[0].grad) > 0.1
