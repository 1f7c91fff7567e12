import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynmlp import autograd as ag
from dynmlp.autograd import Tensor
from dynmlp.backbones import ImageEncoderConfig, MetadataBackboneConfig
from dynmlp.errors import ConfigError
from dynmlp.fusion import (
    DynamicMLP,
    FusionConfig,
    FusionModel,
    block_schedule,
    dynamic_block_forward,
    fuse_and_classify,
    generate_dynamic_weights,
)
from dynmlp.gradcheck import ALL_CONFIGS, TINY_BACKBONE, TINY_ENCODER, TINY_FUSION, config_for, model_gradcheck
from dynmlp.nn import Linear

ENC = ImageEncoderConfig(mode="mlp", input_dim=6, output_dim=10, hidden=[8])
BB = MetadataBackboneConfig(embed_dim=7, residual_blocks=1)


def fusion(strategy="dynamic", **kw):
    base = dict(strategy=strategy, variant="C", d=6, h=3, N=2, num_classes=4)
    base.update(kw)
    if base["variant"] != "C":
        base.setdefault("ip_concat", False)
        base.setdefault("mp_concat", False)
    return FusionConfig(**base)


def model_for(strategy="dynamic", seed=0, **kw):
    return FusionModel(ENC, BB, fusion(strategy, **kw), seed=seed)


# --- schedule ---------------------------------------------------------------

def test_schedule_examples():
    assert block_schedule(256, 64, 1) == [(256, 256)]
    assert block_schedule(256, 64, 2) == [(256, 64), (64, 256)]
    assert block_schedule(256, 64, 4) == [(256, 64), (64, 64), (64, 64), (64, 256)]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 6))
def test_schedule_invariants(d, h, N):
    if h > d:
        with pytest.raises(ConfigError):
            block_schedule(d, h, N)
        return
    s = block_schedule(d, h, N)
    assert len(s) == N
    assert s[0][0] == d and s[-1][1] == d
    for (_, out), (nxt, _) in zip(s[:-1], s[1:]):
        assert out == nxt == h


def test_config_validation_names_keys():
    for kw, key in [(dict(h=8, d=4), "fusion.h"), (dict(N=0), "fusion.N"), (dict(strategy="max"), "fusion.strategy"),
                    (dict(variant="D"), "fusion.variant"), (dict(ip_concat=False, mp_concat=False), "fusion.ip_concat")]:
        with pytest.raises(ConfigError) as exc:
            fusion(**kw).validate()
        assert exc.value.key == key


def test_variant_flags_resolve():
    assert FusionConfig(variant="C").ip_concat and FusionConfig(variant="C").mp_concat
    a = FusionConfig(variant="A")
    assert not a.ip_concat and not a.mp_concat
    a.validate()


# --- weight generation ------------------------------------------------------

def test_generator_shape_at_full_width(rng):
    gen = Linear(256, 256 * 64, rng)
    assert gen.out_dim == 16384
    W = generate_dynamic_weights(Tensor(rng.normal(size=256)), gen, 256, 64)
    assert W.shape == (256, 64)


def test_zero_guide_zero_bias_gives_zero_weights(rng):
    gen = Linear(5, 12, rng)
    W = generate_dynamic_weights(Tensor(np.zeros(5)), gen, 3, 4)
    np.testing.assert_array_equal(W.data, np.zeros((3, 4)))


def test_generator_row_selection(rng):
    gen = Linear(2, 6, rng)
    first = np.arange(6.0)
    gen.weight.data = np.stack([first, -first])
    W = generate_dynamic_weights(Tensor([1.0, 0.0]), gen, 2, 3)
    np.testing.assert_array_equal(W.data, first.reshape(2, 3))


def test_guide_length_mismatch(rng):
    with pytest.raises(ag.ShapeError, match="guide length"):
        generate_dynamic_weights(Tensor(np.zeros(4)), Linear(5, 6, rng), 2, 3)


def test_batched_weights_are_per_instance(rng):
    gen = Linear(3, 8, rng)
    guides = rng.normal(size=(4, 3))
    W = generate_dynamic_weights(Tensor(guides), gen, 2, 4)
    assert W.shape == (4, 2, 4)
    for j in range(4):
        single = generate_dynamic_weights(Tensor(guides[j]), gen, 2, 4)
        np.testing.assert_allclose(W.data[j], single.data, rtol=0, atol=1e-15)


# --- block forward ----------------------------------------------------------

def test_identity_block_keeps_pair_then_relu():
    out = dynamic_block_forward(Tensor([1.0, -1.0]), Tensor(np.eye(2)))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-5)
    np.testing.assert_array_equal(out.data, [1.0 / np.sqrt(1 + 1e-5), 0.0])


def test_zero_block_gives_zero(rng):
    out = dynamic_block_forward(Tensor(rng.normal(size=3)), Tensor(np.zeros((3, 5))))
    np.testing.assert_array_equal(out.data, np.zeros(5))


def test_last_block_expands(rng):
    out = dynamic_block_forward(Tensor(rng.normal(size=64)), Tensor(rng.normal(size=(64, 256))))
    assert out.shape == (256,)


def test_block_shape_mismatch(rng):
    with pytest.raises(ag.ShapeError, match="dynamic block"):
        dynamic_block_forward(Tensor(np.ones(3)), Tensor(np.ones((4, 2))))


def test_ln_contract_in_block(rng):
    z, W = rng.normal(size=(50, 8)), rng.normal(size=(50, 8, 6))
    proj = np.einsum("bi,bio->bo", z, W)
    normed = ag.layer_norm(Tensor(proj)).data
    assert np.abs(normed.mean(axis=1)).max() <= 1e-10
    assert np.abs(normed.var(axis=1) - 1).max() <= 1e-4


# --- dynamic MLP --------------------------------------------------------------

@pytest.mark.parametrize("N", [1, 2, 3, 4])
def test_full_width_shape_contract(N):
    cfg = FusionConfig(d=256, h=64, N=N, variant="A")
    mlp = DynamicMLP(cfg, guide_dim=8, rng=np.random.default_rng(0))
    trace = {}
    out = mlp(Tensor(np.random.default_rng(1).normal(size=(2, 256))), Tensor(np.ones((2, 8))), trace)
    assert out.shape == (2, 256)
    expected = [256] if N == 1 else [64] * (N - 1) + [256]
    assert trace["widths"] == expected


def test_single_block_identity_weights_is_relu_ln(rng):
    cfg = FusionConfig(d=4, h=4, N=1, variant="A", ln_affine=False)
    mlp = DynamicMLP(cfg, guide_dim=3, rng=rng)
    gen = mlp.blocks[0].generator
    gen.weight.data[...] = 0
    gen.bias.data = np.eye(4).reshape(-1)
    z = rng.normal(size=4)
    out = mlp(Tensor(z), Tensor(rng.normal(size=3)))
    np.testing.assert_array_equal(out.data, np.maximum(ag.layer_norm(Tensor(z)).data, 0))


def _np_ln(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


@pytest.mark.parametrize("variant", ["A", "B", "C"])
def test_tiny_mlp_matches_straight_line_oracle(variant):
    rng = np.random.default_rng(5)
    cfg = FusionConfig(d=4, h=2, N=2, variant=variant)
    mlp = DynamicMLP(cfg, guide_dim=3, rng=rng)
    for p in mlp.parameters():
        p.data = rng.normal(size=p.shape)
    z0, e = rng.normal(size=4), rng.normal(size=3)

    def lin(layer, x):
        return x @ layer.weight.data + layer.bias.data

    def stack(s, x):
        y = _np_ln(lin(s.linear, x))
        if s.norm.gain is not None:
            y = y * s.norm.gain.data + s.norm.bias.data
        return np.maximum(y, 0)

    z, g = z0, e
    if variant == "C":
        joint = np.concatenate([z0, e])
        z = np.maximum(lin(mlp.ip_embed, joint), 0)
        g = np.maximum(lin(mlp.mp_embed, joint), 0)
    for block, (i, o) in zip(mlp.blocks, [(4, 2), (2, 4)]):
        gb = g
        for s in block.guide_stacks:
            gb = stack(s, gb)
        for s in block.image_stacks:
            z = stack(s, z)
        W = lin(block.generator, gb).reshape(i, o)
        y = _np_ln(z @ W) * block.norm.gain.data + block.norm.bias.data
        z = np.maximum(y, 0)
    np.testing.assert_allclose(mlp(Tensor(z0), Tensor(e)).data, z, rtol=0, atol=1e-12)


def test_variant_b_has_one_stack_per_path_per_block(rng):
    mlp = DynamicMLP(FusionConfig(d=6, h=3, N=3, variant="B"), guide_dim=5, rng=rng)
    for block, (i, _) in zip(mlp.blocks, block_schedule(6, 3, 3)):
        assert len(block.image_stacks) == 1 and len(block.guide_stacks) == 1
        assert block.image_stacks[0].linear.in_dim == i
    deeper = DynamicMLP(FusionConfig(d=6, h=3, N=2, variant="B", static_depth=2), guide_dim=5, rng=rng)
    assert all(len(b.image_stacks) == 2 for b in deeper.blocks)
    plain = DynamicMLP(FusionConfig(d=6, h=3, N=2, variant="A"), guide_dim=5, rng=rng)
    assert all(not b.image_stacks and not b.guide_stacks for b in plain.blocks)


def test_generators_independent_unless_shared(rng):
    mlp = DynamicMLP(FusionConfig(d=6, h=3, N=4, variant="A"), guide_dim=5, rng=rng)
    assert len({id(b.generator) for b in mlp.blocks}) == 4
    shared = DynamicMLP(FusionConfig(d=6, h=3, N=4, variant="A", share_generators=True), guide_dim=5, rng=rng)
    assert shared.blocks[1].generator is shared.blocks[2].generator
    assert len({id(b.generator) for b in shared.blocks}) == 3
    names = [n for n, _ in shared.named_parameters()]
    assert len(names) == len(set(names))


def test_variant_c_input_modes(rng):
    both = DynamicMLP(FusionConfig(d=6, h=3, N=2, variant="C"), guide_dim=5, rng=rng)
    ip = DynamicMLP(FusionConfig(d=6, h=3, N=2, variant="C", mp_concat=False), guide_dim=5, rng=rng)
    mp = DynamicMLP(FusionConfig(d=6, h=3, N=2, variant="C", ip_concat=False), guide_dim=5, rng=rng)
    assert both.ip_embed is not None and both.mp_embed is not None
    assert ip.mp_embed is None and mp.ip_embed is None
    assert both.ip_embed.in_dim == 11 and both.mp_embed.out_dim == 5


# --- fuse_and_classify ----------------------------------------------------------

def test_concat_padding_identity(rng):
    m = model_for("concat")
    zi, ze = rng.normal(size=(5, 10)), rng.normal(size=(5, 7))
    out = fuse_and_classify(m, Tensor(zi), Tensor(ze))
    padded = np.concatenate([zi, np.zeros((5, 7))], 1) + np.concatenate([np.zeros((5, 10)), ze], 1)
    ref = padded @ m.head.weight.data + m.head.bias.data
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_addition_sums_logits(rng):
    m = model_for("addition")
    zi, ze = rng.normal(size=(3, 10)), rng.normal(size=(3, 7))
    ref = (zi @ m.head.weight.data + m.head.bias.data) + (ze @ m.head_e.weight.data + m.head_e.bias.data)
    np.testing.assert_allclose(fuse_and_classify(m, Tensor(zi), Tensor(ze)), ref, rtol=0, atol=1e-12)


def test_multiplication_is_normalized_product(rng):
    m = model_for("multiplication")
    zi, ze = rng.normal(size=(3, 10)), rng.normal(size=(3, 7))
    a = zi @ m.head.weight.data + m.head.bias.data
    b = ze @ m.head_e.weight.data + m.head_e.bias.data
    pa = np.exp(a) / np.exp(a).sum(1, keepdims=True)
    pb = np.exp(b) / np.exp(b).sum(1, keepdims=True)
    ref = pa * pb / (pa * pb).sum(1, keepdims=True)
    out = fuse_and_classify(m, Tensor(zi), Tensor(ze))
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)
    assert np.abs(out.sum(1) - 1).max() <= 1e-12


def test_multiplication_uniform_metadata_head_cancels(rng):
    m = model_for("multiplication")
    m.head_e.weight.data[...] = 0
    m.head_e.bias.data[...] = 0.3
    zi, ze = rng.normal(size=(3, 10)), rng.normal(size=(3, 7))
    a = zi @ m.head.weight.data + m.head.bias.data
    ref = np.exp(a - a.max(1, keepdims=True))
    ref /= ref.sum(1, keepdims=True)
    np.testing.assert_allclose(fuse_and_classify(m, Tensor(zi), Tensor(ze)), ref, rtol=0, atol=1e-15)


def test_dynamic_zero_increase_is_image_only(rng):
    m = model_for("dynamic")
    m.adapters.increase.weight.data[...] = 0
    m.adapters.increase.bias.data[...] = 0
    zi, ze = rng.normal(size=(4, 10)), rng.normal(size=(4, 7))
    ref = zi @ m.head.weight.data + m.head.bias.data
    np.testing.assert_array_equal(fuse_and_classify(m, Tensor(zi), Tensor(ze)), ref)


def test_image_only_has_no_metadata_path():
    m = model_for("image_only")
    assert m.metadata is None
    assert m.head.in_dim == 10


def test_unknown_strategy_rejected():
    with pytest.raises(ConfigError, match="unknown strategy"):
        model_for("attention")


@pytest.mark.parametrize("variant", ["A", "B", "C"])
def test_dynamic_sensitivity_to_guide(variant, rng):
    m = model_for("dynamic", variant=variant)
    img = model_for("image_only")
    zi = rng.normal(size=(1, 10))
    e1, e2 = rng.normal(size=(1, 7)), rng.normal(size=(1, 7))
    d = np.abs(fuse_and_classify(m, Tensor(zi), Tensor(e1)) - fuse_and_classify(m, Tensor(zi), Tensor(e2)))
    assert d.max() > 1e-6
    np.testing.assert_array_equal(fuse_and_classify(img, Tensor(zi), None), fuse_and_classify(img, Tensor(zi), None))
    feats, enc1, enc2 = rng.normal(size=(1, 6)), rng.normal(size=(1, 6)), rng.normal(size=(1, 6))
    np.testing.assert_array_equal(img.predict(feats, enc1), img.predict(feats, enc2))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["A", "B", "C"]))
def test_batch_permutation_equivariance(seed, variant):
    rng = np.random.default_rng(seed)
    m = model_for("dynamic", variant=variant)
    feats, enc = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    perm = rng.permutation(5)
    np.testing.assert_allclose(m.predict(feats[perm], enc[perm]), m.predict(feats, enc)[perm], rtol=0, atol=1e-14)


def test_trace_weights_per_block(rng):
    m = model_for("dynamic", N=3)
    trace = {}
    m(Tensor(rng.normal(size=(2, 6))), Tensor(rng.normal(size=(2, 6))), trace)
    assert [w.shape for w in trace["weights"]] == [(2, 6, 3), (2, 3, 3), (2, 3, 6)]


def test_seed_determinism():
    a, b = model_for(seed=3), model_for(seed=3)
    for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    c = model_for(seed=4)
    assert not np.array_equal(a.head.weight.data, c.head.weight.data)


def test_embeddings_tap_points(rng):
    m = model_for("dynamic")
    feats, enc = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    assert m.embeddings(feats, enc, "pre_fusion").shape == (3, 10)
    assert m.embeddings(feats, enc, "post_fusion").shape == (3, 10)
    with pytest.raises(ValueError, match="tap point"):
        m.embeddings(feats, enc, "middle")


def test_pad_width_adds_residual_mlp():
    m = model_for("concat", pad_width=5)
    base = model_for("concat")
    assert m.num_parameters() - base.num_parameters() == 10 * 5 + 5 + 5 * 10 + 10


@pytest.mark.parametrize("label", ALL_CONFIGS + ("dynamic-C-ip", "dynamic-C-mp"))
def test_full_model_gradcheck(label):
    assert model_gradcheck(TINY_ENCODER, TINY_BACKBONE, config_for(label)) <= 1e-4


def test_gradcheck_refuses_wide_models():
    with pytest.raises(ValueError, match="too large"):
        model_gradcheck(TINY_ENCODER, TINY_BACKBONE, dataclasses.replace(TINY_FUSION, d=32, h=4))


def test_float32_mode_runs(rng):
    ag.set_default_dtype(np.float32)
    m = model_for("dynamic")
    out = m(Tensor(rng.normal(size=(2, 6))), Tensor(rng.normal(size=(2, 6))))
    assert out.data.dtype == np.float32
