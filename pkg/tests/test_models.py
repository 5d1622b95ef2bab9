"""Backbone construction, parameter/FLOP accounting against independent
closed-form oracles, and the checkpoint container format."""

import struct

import numpy as np
import pytest

from fsce.dsaf import DsafBlock
from fsce.errors import ConfigError, FormatError
from fsce.models import (PRESETS, Backbone, ModelConfig, build_model,
                         count_flops, count_params, get_preset,
                         insertion_channels, load_checkpoint, save_checkpoint)
from fsce.nn import Conv2d
from fsce.tensor import Tensor


def state(model):
    return (list(model.named_parameters()), list(model.named_buffers()))


def rand_images(n=2, c=1, hw=32, seed=0):
    return np.random.default_rng(seed).standard_normal((n, c, hw, hw)) \
        .astype(np.float32)


def test_build_is_deterministic():
    cfg = get_preset("student-M")
    a, b = build_model(cfg, 7), build_model(cfg, 7)
    pa, ba = state(a)
    pb, bb = state(b)
    assert [n for n, _ in pa] == [n for n, _ in pb]
    for (_, x), (_, y) in zip(pa, pb):
        assert np.array_equal(x.data, y.data)
    for (_, x), (_, y) in zip(ba, bb):
        assert np.array_equal(x, y)


def test_seeds_change_the_init():
    cfg = get_preset("student-M")
    a, b = build_model(cfg, 7), build_model(cfg, 8)
    diffs = [np.abs(x.data - y.data).max()
             for x, y in zip(a.parameters(), b.parameters())]
    assert max(diffs) > 1e-4


def test_get_preset_is_case_insensitive():
    assert get_preset("STUDENT-m") is PRESETS["student-M"]
    with pytest.raises(ConfigError):
        get_preset("student-XXL")


@pytest.mark.parametrize("insertion", ["none", "pre", "s1", "s4"])
def test_logits_shape_is_insertion_invariant(insertion):
    cfg = ModelConfig("residual", ((2, 16), (2, 32), (2, 64), (2, 128)),
                      insertion=insertion)
    model = build_model(cfg, 0).eval()
    out = model(Tensor(rand_images())).data
    assert out.shape == (2, 4)


def test_forward_with_tap():
    cfg = ModelConfig("residual", ((2, 16), (2, 32), (2, 64), (2, 128)),
                      insertion="s1")
    model = build_model(cfg, 0).eval()
    logits, tapped = model.forward_with_tap(Tensor(rand_images()), "s1")
    assert logits.shape == (2, 4)
    assert tapped.shape == (2, 16, 16, 16)
    _, tapped = model.forward_with_tap(Tensor(rand_images()), "s3")
    assert tapped.shape == (2, 64, 4, 4)
    with pytest.raises(ConfigError):
        model.forward_with_tap(Tensor(rand_images()), "s5")


def test_features_shape():
    model = build_model(get_preset("teacher-S"), 1).eval()
    feats = model.features(Tensor(rand_images())).data
    assert feats.shape == (2, model.feature_dim)
    assert model.feature_dim == 48


def test_insertion_adds_exactly_one_enhancement_block():
    base = ModelConfig("plain", ((1, 8), (1, 16), (1, 32), (1, 64)))
    for insertion in ("pre", "s2", "s4"):
        cfg = ModelConfig("plain", base.stages, insertion=insertion)
        extra = count_params(build_model(cfg, 0)) - count_params(build_model(base, 0))
        bare = DsafBlock(insertion_channels(cfg), rng=np.random.default_rng(0))
        assert extra == count_params(bare)


def closed_form_params(cfg: ModelConfig) -> int:
    c0 = cfg.stages[0][1]
    total = c0 * cfg.in_channels * 9 + 2 * c0
    cin = c0
    for blocks, cout in cfg.stages:
        for b in range(blocks):
            stride = 2 if b == 0 else 1
            if cfg.block == "residual":
                total += cin * cout * 9 + 2 * cout
                total += cout * cout * 9 + 2 * cout
                if stride != 1 or cin != cout:
                    total += cin * cout + 2 * cout
            else:
                total += cin * cout * 9 + 2 * cout
            cin = cout
    return total + cfg.num_classes * cin + cfg.num_classes


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_param_count_matches_closed_form(name):
    cfg = get_preset(name)
    assert count_params(build_model(cfg, 0)) == closed_form_params(cfg)


def test_conv_param_example():
    conv = Conv2d(3, 16, 3, rng=np.random.default_rng(0))
    assert count_params(conv) == 16 * 3 * 9 + 16 == 448


def test_conv_flops_example():
    conv = Conv2d(3, 16, 3, padding=1, bias=False, rng=np.random.default_rng(0))
    total, out_shape = conv.flops((3, 32, 32))
    assert out_shape == (16, 32, 32)
    assert total == 2 * 16 * 32 * 32 * 27 == 884_736


def reprice(row) -> int:
    """Recompute a trace row's cost from its descriptive fields alone."""
    k = row["kind"]
    if k == "conv":
        f = 2 * row["cout"] * row["ho"] * row["wo"] * row["cig"] * row["kh"] * row["kw"]
        return f + (row["cout"] * row["ho"] * row["wo"] if row["bias"] else 0)
    if k == "bn":
        return 2 * row["c"] * row["h"] * row["w"]
    if k in ("act", "add", "mul", "pool", "scale"):
        return row["elems"]
    if k == "linear":
        return 2 * row["cin"] * row["cout"] + (row["cout"] if row["bias"] else 0)
    if k == "mlp":
        per_call = 4 * row["cin"] * row["hidden"] + row["hidden"]
        return row["calls"] * per_call + (row["cin"] if row["calls"] == 2 else 0)
    if k in ("dwt", "iwt"):
        return 8 * row["c"] * row["h"] * row["w"]
    raise AssertionError(f"unpriced row kind {k!r}")


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_flops_match_per_layer_oracle(name):
    model = build_model(get_preset(name), 0)
    trace = []
    total = count_flops(model, (1, 32, 32), trace)
    assert total == sum(r["flops"] for r in trace)
    assert total == sum(reprice(r) for r in trace)


def test_flops_oracle_covers_the_enhanced_model():
    cfg = ModelConfig("plain", ((1, 8), (1, 16), (1, 32), (1, 64)),
                      insertion="s1")
    model = build_model(cfg, 0)
    trace = []
    total = count_flops(model, (1, 64, 64), trace)
    assert total == sum(reprice(r) for r in trace)
    assert any(r["kind"] == "dwt" for r in trace)
    assert any(r["kind"] == "mlp" for r in trace)


def test_student_m_total_flops_closed_form():
    model = build_model(get_preset("student-M"), 0)
    assert count_flops(model, (1, 32, 32)) == 921_604


@pytest.mark.parametrize("cfg", [
    ModelConfig("dense", ((1, 8),)),
    ModelConfig("plain", ()),
    ModelConfig("plain", ((0, 8),)),
    ModelConfig("plain", ((1, 8),), num_classes=0),
    ModelConfig("plain", ((1, 8),), num_classes=1),
    ModelConfig("plain", ((1, 8),), insertion="s2"),
    ModelConfig("plain", ((1, 8),), insertion="s0"),
    ModelConfig("plain", ((1, 8),), insertion="stage1"),
    ModelConfig("plain", ((1, 8),), in_channels=0),
])
def test_bad_configs_are_rejected(cfg):
    with pytest.raises(ConfigError):
        build_model(cfg, 0)


# ------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    cfg = ModelConfig("plain", ((1, 8), (1, 16)), insertion="s1")
    model = build_model(cfg, 11)
    # make the BN buffers non-initial so the roundtrip carries real state
    model.stem.bn.running_mean[...] = 0.25
    model.stem.bn.running_var[...] = 1.75
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, 11)
    loaded, cfg2, seed2 = load_checkpoint(path)
    assert cfg2 == cfg and seed2 == 11
    for (na, a), (nb, b) in zip(model.named_parameters(),
                                loaded.named_parameters()):
        assert na == nb and np.array_equal(a.data, b.data)
    for (na, a), (nb, b) in zip(model.named_buffers(), loaded.named_buffers()):
        assert na == nb and np.array_equal(a, b)
    path2 = tmp_path / "again.ckpt"
    save_checkpoint(path2, loaded, seed2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_checkpoint_rejects_truncation(tmp_path):
    cfg = ModelConfig("plain", ((1, 8),))
    p = tmp_path / "full.ckpt"
    save_checkpoint(p, build_model(cfg, 0), 0)
    blob = p.read_bytes()
    for cut in (3, 7, len(blob) // 2, len(blob) - 1):
        q = tmp_path / f"cut{cut}.ckpt"
        q.write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(q)


def test_checkpoint_rejects_trailing_bytes(tmp_path):
    cfg = ModelConfig("plain", ((1, 8),))
    p = tmp_path / "full.ckpt"
    save_checkpoint(p, build_model(cfg, 0), 0)
    q = tmp_path / "trail.ckpt"
    q.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        load_checkpoint(q)


def test_checkpoint_rejects_wrong_count(tmp_path):
    cfg = ModelConfig("plain", ((1, 8),))
    p = tmp_path / "full.ckpt"
    save_checkpoint(p, build_model(cfg, 0), 0)
    blob = bytearray(p.read_bytes())
    (count,) = struct.unpack("<I", blob[4:8])
    blob[4:8] = struct.pack("<I", count + 3)
    q = tmp_path / "count.ckpt"
    q.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(q)
