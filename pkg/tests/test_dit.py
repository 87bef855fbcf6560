import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from motionflow.checkpoint import load_checkpoint, read_manifest
from motionflow.conditioning import ConditionSet
from motionflow.dit import (VARIANTS, ModelConfig, MotionDiT, StreamBlock, StreamPath, adaln_modulate,
                            build_model, enumerate_params, joint_attention, param_count, rope_apply)
from motionflow.engine import load_model, save_model
from motionflow.exceptions import ConfigError, DimensionError, ValidationError

from .conftest import randomize_

torch.set_default_dtype(torch.float32)


def np_rope(x, positions, base):
    """Loop-based rotary transform on (L, H, hd) arrays."""
    out = x.copy()
    hd = x.shape[-1]
    for l, p in enumerate(positions):
        for i in range(hd // 2):
            theta = p * base ** (-2 * i / hd)
            a, b = x[l, :, 2 * i], x[l, :, 2 * i + 1]
            out[l, :, 2 * i] = a * math.cos(theta) - b * math.sin(theta)
            out[l, :, 2 * i + 1] = a * math.sin(theta) + b * math.cos(theta)
    return out


def np_joint_attention(streams, positions, paths, n_heads, base=10000.0):
    """Reference: explicit projections, per-head softmax, manual split."""
    qs, ks, vs = [], [], []
    for x, pos, path in zip(streams, positions, paths):
        w, b = path.qkv.weight.detach().numpy(), path.qkv.bias.detach().numpy()
        qkv = x @ w.T + b
        d = x.shape[-1]
        hd = d // n_heads
        q, k, v = (qkv[:, i * d:(i + 1) * d].reshape(-1, n_heads, hd) for i in range(3))
        qs.append(np_rope(q, pos, base))
        ks.append(np_rope(k, pos, base))
        vs.append(v)
    q, k, v = np.concatenate(qs), np.concatenate(ks), np.concatenate(vs)
    L, H, hd = q.shape
    out = np.zeros((L, H, hd))
    for h in range(H):
        logits = q[:, h] @ k[:, h].T / math.sqrt(hd)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        out[:, h] = p @ v[:, h]
    out = out.reshape(L, H * hd)
    res, start = [], 0
    for x, path in zip(streams, paths):
        piece = out[start:start + x.shape[0]]
        start += x.shape[0]
        res.append(piece @ path.proj.weight.detach().numpy().T + path.proj.bias.detach().numpy())
    return res


def make_paths(n, d, seed=0):
    torch.manual_seed(seed)
    return [StreamPath(d).double() for _ in range(n)]


def test_rope_position_zero_and_norm(rng):
    x = torch.from_numpy(rng.normal(size=(5, 3, 8)))
    np.testing.assert_array_equal(rope_apply(x, torch.zeros(5, dtype=torch.long)).numpy(), x.numpy())
    y = rope_apply(x, torch.arange(5) * 37)
    np.testing.assert_allclose(y.norm(dim=-1).numpy(), x.norm(dim=-1).numpy(), rtol=1e-12)
    np.testing.assert_allclose(y.numpy(), np_rope(x.numpy(), np.arange(5) * 37, 10000.0), atol=1e-12)
    with pytest.raises(ConfigError):
        rope_apply(torch.zeros(2, 1, 5), torch.arange(2))
    with pytest.raises(DimensionError):
        rope_apply(torch.zeros(2, 1, 4), torch.arange(3))


def test_rope_inner_products_depend_on_offsets_only(rng):
    for _ in range(20):
        q = torch.from_numpy(rng.normal(size=(1, 1, 16)))
        k = torch.from_numpy(rng.normal(size=(1, 1, 16)))
        p1, p2, s = (int(v) for v in rng.integers(0, 200, size=3))
        a = (rope_apply(q, [p1]) * rope_apply(k, [p2])).sum()
        b = (rope_apply(q, [p1 + s]) * rope_apply(k, [p2 + s])).sum()
        assert abs(float(a - b)) <= 1e-5


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=12, n_heads=4)  # head_dim 3 is odd
    with pytest.raises(ConfigError):
        ModelConfig(variant="unet")
    with pytest.raises(ConfigError):
        ModelConfig(n_two_stream=-1)
    assert ModelConfig(variant="CABA").variant == "caba"


def test_zero_initialised_block_is_identity(rng):
    block = StreamBlock(["motion", "audio"], 16, 2, 10000.0).double()
    streams = [torch.from_numpy(rng.normal(size=(2, 5, 16))), torch.from_numpy(rng.normal(size=(2, 3, 16)))]
    pos = [torch.arange(5), torch.arange(3)]
    out = block(streams, pos, torch.from_numpy(rng.normal(size=(2, 16))))
    for a, b in zip(out, streams):
        assert torch.equal(a, b)


def test_adaln_modulation(rng):
    path = StreamPath(16).double()
    x = torch.from_numpy(rng.normal(size=(1, 4, 16)))
    f = torch.from_numpy(rng.normal(size=(1, 16)))
    h, (g1, g2) = adaln_modulate(x, f, path)
    assert torch.equal(g1, torch.zeros_like(g1)) and torch.equal(g2, torch.zeros_like(g2))
    np.testing.assert_allclose(h.detach().numpy(), path.norm1(x).numpy())
    randomize_(path)
    a, _ = adaln_modulate(x, f, path)
    b, _ = adaln_modulate(x, f, path)
    assert torch.equal(a, b)


def test_block_output_is_sensitive_to_timestep_feature(rng):
    block = randomize_(StreamBlock(["motion", "audio"], 16, 2, 10000.0).double(), std=0.3)
    streams = [torch.from_numpy(rng.normal(size=(1, 5, 16))), torch.from_numpy(rng.normal(size=(1, 5, 16)))]
    pos = [torch.arange(5)] * 2
    f = torch.from_numpy(rng.normal(size=(1, 16)))
    df = torch.zeros_like(f)
    df[0, 3] = 1e-4
    diff = block(streams, pos, f + df)[0] - block(streams, pos, f - df)[0]
    assert diff.abs().max() > 1e-8


def test_single_stream_joint_attention_is_self_attention(rng):
    (path,) = make_paths(1, 16)
    x = rng.normal(size=(7, 16))
    pos = np.arange(7)
    out = joint_attention([torch.from_numpy(x)[None]], [torch.from_numpy(pos)], [path], 2)
    ref = np_joint_attention([x], [pos], [path], 2)
    assert out[0].shape == (1, 7, 16)
    assert np.max(np.abs(out[0][0].detach().numpy() - ref[0])) <= 1e-6


def test_two_stream_joint_attention_matches_reference(rng):
    paths = make_paths(2, 16, seed=1)
    xs = [rng.normal(size=(6, 16)), rng.normal(size=(4, 16))]
    pos = [np.arange(6), np.arange(4) + 2]
    out = joint_attention([torch.from_numpy(x)[None] for x in xs], [torch.from_numpy(p) for p in pos], paths, 4)
    ref = np_joint_attention(xs, pos, paths, 4)
    for o, r in zip(out, ref):
        assert np.max(np.abs(o[0].detach().numpy() - r)) <= 1e-6


def test_joint_attention_rejects_bad_bundles():
    with pytest.raises(ValidationError):
        joint_attention([], [], [], 2)
    paths = make_paths(2, 16)
    with pytest.raises(DimensionError):
        joint_attention([torch.zeros(1, 2, 16, dtype=torch.float64), torch.zeros(1, 2, 8, dtype=torch.float64)],
                        [torch.arange(2)] * 2, paths, 2)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.integers(0, 10_000))
def test_stream_boundaries_preserved(lengths, seed):
    r = np.random.default_rng(seed)
    paths = make_paths(len(lengths), 8, seed=seed % 7)
    xs = [r.normal(size=(n, 8)) for n in lengths]
    pos = [np.arange(n) for n in lengths]
    out = joint_attention([torch.from_numpy(x)[None] for x in xs], [torch.from_numpy(p) for p in pos], paths, 2)
    ref = np_joint_attention(xs, pos, paths, 2)
    assert [o.shape[1] for o in out] == lengths
    for o, rf in zip(out, ref):
        assert np.max(np.abs(o[0].detach().numpy() - rf)) <= 1e-6


def test_joint_attention_is_invariant_to_uniform_position_shift(rng):
    paths = make_paths(3, 16, seed=2)
    xs = [torch.from_numpy(rng.normal(size=(1, n, 16))) for n in (5, 5, 3)]
    pos = [torch.arange(5), torch.arange(5), torch.arange(3)]
    a = joint_attention(xs, pos, paths, 2)
    b = joint_attention(xs, [p + 11 for p in pos], paths, 2)
    for x, y in zip(a, b):
        assert (x - y).abs().max() <= 1e-9


def full_conditions(rng, T, cfg):
    return ConditionSet(audio=rng.normal(size=(T, cfg.audio_dim)), identity=rng.normal(size=cfg.identity_dim),
                        emotion=1, guide=rng.normal(size=cfg.motion_dim))


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_shape_and_zero_init(variant, tiny_cfg, rng):
    cfg = ModelConfig(**{**tiny_cfg.to_dict(), "variant": variant})
    model = build_model(cfg, seed=0, dtype=torch.float64)
    cs = full_conditions(rng, 6, cfg)
    out = model(torch.from_numpy(rng.normal(size=(6, 70))), 0.4, cs)
    assert out.shape == (6, 70)
    assert torch.equal(out, torch.zeros_like(out))
    batched = model(torch.from_numpy(rng.normal(size=(3, 6, 70))), torch.tensor([0.1, 0.5, 0.9]), cs)
    assert batched.shape == (3, 6, 70)


def test_forward_validates_lengths(tiny_cfg, rng):
    model = build_model(tiny_cfg, dtype=torch.float64)
    with pytest.raises(ValidationError):
        model(torch.zeros(6, 70, dtype=torch.float64), 0.5, full_conditions(rng, 5, tiny_cfg))
    with pytest.raises(DimensionError):
        model(torch.zeros(6, 69, dtype=torch.float64), 0.5, ConditionSet())
    with pytest.raises(ValidationError):
        model(torch.zeros(6, 70, dtype=torch.float64), 1.5, ConditionSet())


def test_cross_attention_variant_differs_from_fusion(tiny_cfg, rng):
    z = torch.from_numpy(rng.normal(size=(6, 70)))
    cs = full_conditions(rng, 6, tiny_cfg)
    outs = {}
    for variant in ("c2f", "caba"):
        cfg = ModelConfig(**{**tiny_cfg.to_dict(), "variant": variant})
        model = randomize_(build_model(cfg, seed=5, dtype=torch.float64), seed=5)
        outs[variant] = model(z, 0.5, cs)
    assert not torch.allclose(outs["c2f"], outs["caba"])


def test_conditions_reach_the_motion_output(tiny_cfg, rng):
    model = randomize_(build_model(tiny_cfg, dtype=torch.float64), seed=1)
    z = torch.from_numpy(rng.normal(size=(6, 70)))
    cs = full_conditions(rng, 6, tiny_cfg)
    base = model(z, 0.5, cs)
    for key in ("audio", "emotion", "identity", "guide"):
        assert not torch.allclose(base, model(z, 0.5, cs.without(key))), key


def test_param_counts_match_enumeration():
    for d in (16, 32, 64):
        for variant in VARIANTS:
            cfg = ModelConfig(d_model=d, n_heads=2, n_four_stream=1, n_two_stream=2, n_single_stream=3,
                              variant=variant, time_freq_dim=32)
            assert param_count(cfg) == enumerate_params(cfg)
            assert param_count(cfg) == sum(p.numel() for p in build_model(cfg).parameters())


def test_param_count_grows_quadratically_in_width():
    small = ModelConfig(d_model=32, n_heads=2, time_freq_dim=32)
    big = ModelConfig(d_model=64, n_heads=2, time_freq_dim=32)
    zero_small = ModelConfig(d_model=32, n_heads=2, n_four_stream=0, n_two_stream=0, n_single_stream=0,
                             time_freq_dim=32)
    zero_big = ModelConfig(d_model=64, n_heads=2, n_four_stream=0, n_two_stream=0, n_single_stream=0,
                           time_freq_dim=32)
    paths = 3 * 4 + 6 * 2 + 12 * 1
    # per path: 18 d^2 + 15 d
    assert param_count(small) - param_count(zero_small) == paths * (18 * 32 ** 2 + 15 * 32)
    assert param_count(big) - param_count(zero_big) == paths * (18 * 64 ** 2 + 15 * 64)
    assert param_count(big) == enumerate_params(big)


def test_zero_block_config_counts_embeddings_only():
    cfg = ModelConfig(d_model=16, n_heads=2, n_four_stream=0, n_two_stream=0, n_single_stream=0,
                      time_freq_dim=16)
    model = build_model(cfg)
    embed_and_final = sum(p.numel() for p in model.embed.parameters()) + sum(p.numel() for p in model.final.parameters())
    assert param_count(cfg) == embed_and_final == enumerate_params(cfg)


def test_no_c2f_has_more_parameters():
    c2f = ModelConfig(d_model=64, n_heads=4)
    no = ModelConfig(d_model=64, n_heads=4, variant="no_c2f")
    assert param_count(no) > param_count(c2f)


def test_checkpoint_roundtrip_and_names(tmp_path, tiny_cfg, rng):
    model = randomize_(build_model(tiny_cfg), seed=3)
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    manifest = read_manifest(path)
    names = [t["name"] for t in manifest["tensors"]]
    assert "four.0.audio.qkv.weight" in names
    assert "two.0.cond.ffn_in.bias" in names
    assert "single.0.joint.mod.weight" in names
    assert manifest["kind"] == "dit" and manifest["config"]["d_model"] == 16
    assert all(t["dtype"] == "f32" for t in manifest["tensors"])
    loaded, _, _ = load_model(path)
    z = torch.from_numpy(rng.normal(size=(5, 70)).astype(np.float32))
    cs = full_conditions(rng, 5, tiny_cfg)
    assert torch.equal(model(z, 0.3, cs), loaded(z, 0.3, cs))
    _, tensors = load_checkpoint(path)
    assert tensors["four.0.audio.qkv.weight"].shape == (48, 16)
