import itertools
import struct

import numpy as np
import pytest

from xsep import autodiff as ad
from xsep.errors import CheckpointError, ShapeError
from xsep.gradcheck import finite_difference_check
from xsep.network import (
    MAGIC,
    Network,
    NetworkConfig,
    analyse_mixture,
    build_network,
    forward_separate,
    load_checkpoint,
    padded_length,
    parameter_count,
    save_checkpoint,
    separate,
)
from xsep.selfcheck import pipeline_case
from xsep.spectral import SpectralConfig

TOY = SpectralConfig(window_length=16, hop=4)
ALL_GAPS = [g for r in range(4) for g in itertools.combinations((1, 2, 3), r)]


def toy_net(J=2, gaps=(), hidden=4, seed=0):
    return build_network(NetworkConfig(J=J, bins=TOY.bins, hidden=hidden, bridge_gaps=gaps), seed, TOY)


def toy_mixture(n=40, seed=0):
    return np.random.default_rng(seed).uniform(-0.5, 0.5, n)


def test_default_config_matches_desk_scale():
    cfg = NetworkConfig()
    assert (cfg.J, cfg.bins, cfg.hidden) == (4, 129, 64)


def test_invalid_gap_rejected():
    for bad in [(0,), (4,), (1, 5)]:
        with pytest.raises(ValueError, match="gap"):
            NetworkConfig(bridge_gaps=bad)


def test_single_affine_count_formula():
    bins, hidden = 129, 64
    net = build_network(NetworkConfig(bins=bins, hidden=hidden, J=1), 0)
    p = net.branch_params(0)
    assert p["affine1.weight"].size + p["affine1.bias"].size == bins * hidden + hidden


def test_parameter_count_invariant_under_bridging():
    counts = {g: parameter_count(build_network(NetworkConfig(bridge_gaps=g), 0)) for g in ALL_GAPS}
    assert len(ALL_GAPS) == 8
    assert len(set(counts.values())) == 1


def test_doubling_sources_doubles_count():
    assert parameter_count(toy_net(J=4)) == 2 * parameter_count(toy_net(J=2))


def test_single_branch_bridging_is_identity():
    base = toy_net(J=1)
    x = toy_mixture()
    reference = separate(base, x)
    for gaps in ALL_GAPS[1:]:
        assert np.array_equal(separate(base.with_gaps(gaps), x), reference)


def test_unbridged_branches_are_independent():
    """Branch 0 of a 2-branch net equals a 1-branch net built from branch-0 parameters."""
    net = toy_net(J=2)
    solo = Network(NetworkConfig(J=1, bins=TOY.bins, hidden=4), {k: v for k, v in net.params.items() if k.startswith("branch0.")}, spectral=TOY)
    x = toy_mixture()
    assert np.array_equal(separate(net, x)[0], separate(solo, x)[0])


def test_masks_strictly_inside_unit_interval_and_bounded_estimates():
    net = toy_net(J=3, gaps=(1, 2))
    x = toy_mixture(64)
    mag, phase = analyse_mixture(x, TOY)
    out = forward_separate(net, mag, phase, len(x))
    for m, e, t in zip(out.masks, out.est_mags, out.est_times):
        assert np.all(m.values > 0) and np.all(m.values < 1)
        assert np.all(e.values <= mag)
        assert t.shape == x.shape


def _saturate(net, value):
    for j in range(net.config.J):
        net.params[f"branch{j}.head.bias"].values[:] = value


def test_saturated_masks():
    x = toy_mixture(64)
    mag, phase = analyse_mixture(x, TOY)
    net = toy_net(J=2)
    _saturate(net, 60.0)
    out = forward_separate(net, mag, phase, len(x))
    for e in out.est_mags:
        assert np.allclose(e.values, mag, rtol=1e-15, atol=0)
    _saturate(net, -60.0)
    out = forward_separate(net, mag, phase, len(x))
    for t in out.est_times:
        assert np.max(np.abs(t.values)) < 1e-20


def test_full_mask_resynthesis_reproduces_mixture():
    x = toy_mixture(64)
    net = toy_net(J=1)
    _saturate(net, 60.0)
    assert np.allclose(separate(net, x)[0], x, atol=1e-12)


def test_shape_mismatch_errors():
    net = toy_net()
    with pytest.raises(ShapeError):
        net.masks(np.zeros((5, TOY.bins + 1)))
    mag, phase = analyse_mixture(toy_mixture(40), TOY)
    with pytest.raises(ShapeError):
        forward_separate(net, mag, phase, 80)


def test_padding_covers_signal_with_full_overlap():
    left, total = padded_length(1000, SpectralConfig())
    assert left == 192 and total >= left + 1000 + left
    assert (total - 256) % 64 == 0


def test_determinism_same_seed():
    x = toy_mixture()
    assert np.array_equal(separate(toy_net(seed=5, gaps=(2,)), x), separate(toy_net(seed=5, gaps=(2,)), x))
    assert not np.array_equal(separate(toy_net(seed=5), x), separate(toy_net(seed=6), x))


def test_pipeline_gradients_toy():
    prog, inputs = pipeline_case()
    report = finite_difference_check(prog, inputs, 1e-5, 1e-3)
    assert report.passed, report


def _branch_loss_grads(gaps):
    net = toy_net(J=3, gaps=gaps, seed=1)
    x = toy_mixture(48, seed=2)
    mag, phase = analyse_mixture(x, TOY)
    out = forward_separate(net, mag, phase, len(x))
    ad.backward(ad.sum_(ad.square(out.est_times[0])))
    return {k: p.grad for k, p in net.params.items()}


def test_gradient_coupling_switch():
    grads = _branch_loss_grads(())
    for k, g in grads.items():
        if not k.startswith("branch0."):
            assert not g.any(), k
    coupled = _branch_loss_grads((1,))
    cross = [np.max(np.abs(g)) for k, g in coupled.items() if k.startswith("branch1.affine1")]
    assert max(cross) > 1e-8
    # blocks after the last bridge stay private to their branch
    assert not coupled["branch1.head.weight"].any()


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = toy_net(J=3, gaps=(1, 3), seed=4)
    net.set_normalization(np.linspace(0.1, 1, TOY.bins), np.linspace(1, 2, TOY.bins) / 3)
    path = tmp_path / "m.xsep"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    assert loaded.config == net.config and loaded.spectral == net.spectral
    for k in net.params:
        assert loaded.params[k].values.tobytes() == net.params[k].values.tobytes()
    assert np.array_equal(loaded.input_mean, net.input_mean) and np.array_equal(loaded.input_std, net.input_std)
    x = toy_mixture()
    assert np.array_equal(separate(loaded, x), separate(net, x))


def test_checkpoint_layout(tmp_path):
    net = toy_net()
    path = tmp_path / "m.xsep"
    save_checkpoint(net, path)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    version, size = struct.unpack_from("<II", raw, 4)
    assert version == 1
    assert len(raw) == 12 + size + 8 * parameter_count(net)
    first = next(iter(net.params.values())).values.reshape(-1)[0]
    assert struct.unpack_from("<d", raw, 12 + size)[0] == first


def test_checkpoint_errors(tmp_path):
    net = toy_net()
    path = tmp_path / "m.xsep"
    save_checkpoint(net, path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.xsep"
    bad.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="offset"):
        load_checkpoint(bad)


def test_default_checkpoint_size(tmp_path):
    net = build_network(NetworkConfig(bridge_gaps=(1, 2)), 0)
    count = parameter_count(net)
    # 4 branches x (129*64+64 + 2*(64*64*2+64) + 128*64+64 + 64*129+129)
    assert count == 4 * (129 * 64 + 64 + 2 * (2 * 64 * 64 + 64) + 128 * 64 + 64 + 64 * 129 + 129) == 165_892
    path = tmp_path / "d.xsep"
    save_checkpoint(net, path)
    assert path.stat().st_size < 5 * 1024 * 1024
    assert path.stat().st_size - 8 * count < 16_384
