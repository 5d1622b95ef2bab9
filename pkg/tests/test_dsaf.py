"""The dual-branch enhancement block: shape contract, the channel split and
raw passthrough in single-branch modes, parameter bookkeeping, and the
background smoothing diagnostic."""

import numpy as np
import pytest

import fsce.tensor as T
from fsce.dsaf import DsafBlock, background_smoothness
from fsce.errors import ConfigError, DegenerateStatsError, ShapeError
from fsce.tensor import Tape, Tensor


def make(channels=8, seed=0, **kw):
    return DsafBlock(channels, rng=np.random.default_rng(seed), **kw)


def rand_input(shape=(2, 8, 8, 8), seed=3):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


@pytest.mark.parametrize("branches", ["both", "spatial", "frequency"])
def test_output_shape_matches_input(branches):
    block = make(channels=16, branches=branches).eval()
    x = rand_input((2, 16, 32, 32))
    assert block(Tensor(x)).data.shape == (2, 16, 32, 32)


def test_spatial_only_passes_second_half_through():
    block = make(branches="spatial").eval()
    x = rand_input()
    out = block(Tensor(x)).data
    assert np.array_equal(out[:, 4:], x[:, 4:])
    assert not np.allclose(out[:, :4], x[:, :4])


def test_frequency_only_passes_first_half_through():
    block = make(branches="frequency").eval()
    x = rand_input()
    out = block(Tensor(x)).data
    assert np.array_equal(out[:, :4], x[:, :4])
    assert not np.allclose(out[:, 4:], x[:, 4:])


def test_branch_halves_are_independent():
    # each processed half may only read its own half of the input
    block = make(branches="both").eval()
    x = rand_input()
    base = block(Tensor(x)).data
    bumped = x.copy()
    bumped[:, 4:] += 1.0                       # perturb the frequency half
    out = block(Tensor(bumped)).data
    assert np.array_equal(out[:, :4], base[:, :4])
    bumped = x.copy()
    bumped[:, :4] += 1.0
    out = block(Tensor(bumped)).data
    assert np.array_equal(out[:, 4:], base[:, 4:])


def test_single_branch_modes_drop_the_unused_parameters():
    names_s = {n for n, _ in make(branches="spatial").named_parameters()}
    names_f = {n for n, _ in make(branches="frequency").named_parameters()}
    names_b = {n for n, _ in make(branches="both").named_parameters()}
    assert not any(n.startswith(("wt.", "bn_f.", "cbam_f.")) for n in names_s)
    assert not any(n.startswith(("scale_convs", "fuse", "bn_s", "cbam_s"))
                   for n in names_f)
    assert names_b == names_s | names_f
    assert any(n.startswith("scale_convs.3") for n in names_b)  # four scales


def test_eval_forward_is_bitwise_reproducible():
    block = make().eval()
    x = rand_input()
    a = block(Tensor(x)).data
    b = block(Tensor(x)).data
    assert np.array_equal(a, b)


def test_gradients_reach_every_parameter():
    block = make(channels=4)          # training mode by default
    x = Tensor(rand_input((2, 4, 8, 8)))
    with Tape() as tape:
        loss = T.tsum(block(x))
    tape.backward(loss)
    for name, p in block.named_parameters():
        assert p.grad is not None, name
    assert x.grad is not None


@pytest.mark.parametrize("kw", [
    dict(channels=3), dict(channels=0),
    dict(channels=8, branches="fused"),
    dict(channels=8, kernel_sizes=(3, 4)),
    dict(channels=8, kernel_sizes=()),
    dict(channels=8, wt_kernel=2),
])
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        DsafBlock(rng=np.random.default_rng(0), **kw)


def test_wrong_input_channels():
    block = make(channels=8)
    with pytest.raises(ShapeError):
        block(Tensor(np.zeros((1, 6, 8, 8), dtype=np.float32)))


def test_flops_totals_are_consistent():
    block = make(channels=8)
    trace = []
    total, out_shape = block.flops((8, 16, 16), trace)
    assert out_shape == (8, 16, 16)
    assert total == sum(row["flops"] for row in trace)
    # both branches priced: wavelet rows and four scale convs
    assert sum(1 for r in trace if r["kind"] == "dwt") == 1
    assert sum(1 for r in trace if r["kind"] == "conv") >= 7


# -------------------------------------------------- background diagnostic

def _scene(seed=0):
    rng = np.random.default_rng(seed)
    clean = np.zeros((2, 4, 16, 16), dtype=np.float32)
    clean[:, :, 4:12, 4:12] = 1.0
    noisy = clean + rng.normal(0, 0.1, clean.shape).astype(np.float32)
    return noisy, clean


def test_background_smoothness_returns_positive_ratio():
    noisy, clean = _scene()
    block = make(channels=4, seed=1)
    r = background_smoothness(block, noisy, clean)
    assert isinstance(r, float) and r > 0.0


def test_background_smoothness_restores_training_mode():
    noisy, clean = _scene()
    block = make(channels=4)
    assert block.training
    background_smoothness(block, noisy, clean)
    assert block.training
    block.eval()
    background_smoothness(block, noisy, clean)
    assert not block.training


def test_background_smoothness_guards():
    noisy, clean = _scene()
    block = make(channels=4)
    with pytest.raises(ShapeError):
        background_smoothness(block, noisy[:1], clean)
    with pytest.raises(DegenerateStatsError):
        background_smoothness(block, noisy, np.ones_like(clean))  # flat clean
    flat = np.full_like(noisy, 0.5)
    with pytest.raises(DegenerateStatsError):
        background_smoothness(block, flat, clean)  # flat background input
