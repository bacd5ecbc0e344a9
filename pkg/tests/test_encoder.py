import numpy as np
import pytest

import oracles
from mmsformer import tensor as T
from mmsformer.config import EncoderConfig, ModelConfig, StageConfig
from mmsformer.encoder import (
    Block,
    EfficientAttention,
    MixTransformerEncoder,
    check_input_extent,
    map_to_tokens,
    spatial_reduce,
    tokens_to_map,
)
from mmsformer.errors import ConfigError, ShapeError
from mmsformer.model import build
from mmsformer.tensor import LayerNorm, Linear, Tensor


def _weights(attn):
    return [attn.q.weight.data, attn.q.bias.data, attn.k.weight.data, attn.k.bias.data,
            attn.v.weight.data, attn.v.bias.data, attn.proj.weight.data, attn.proj.bias.data]


@pytest.mark.parametrize("case", range(10))
def test_attention_without_reduction_matches_dense(case, f64):
    r = np.random.default_rng(case)
    heads = int(r.choice([1, 2, 4]))
    C = heads * int(r.integers(1, 5))
    N = int(r.integers(2, 20))
    attn = EfficientAttention(C, heads, 1, r)
    for p in attn.parameters():  # non-trivial weights, not the tiny init
        p.data = r.normal(size=p.shape) * 0.5
    x = r.normal(size=(N, C))
    got = attn(Tensor(x)).data
    ref = oracles.dense_attention(x, *_weights(attn), heads)
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-10)


def test_attention_with_reduction_matches_reduced_reference(f64, rng):
    C, heads, R, N = 8, 2, 4, 16
    attn = EfficientAttention(C, heads, R, rng)
    for p in attn.parameters():
        p.data = rng.normal(size=p.shape) * 0.5
    x = rng.normal(size=(N, C))
    folded = x.reshape(N // R, C * R) @ attn.sr.weight.data + attn.sr.bias.data
    mu, var = folded.mean(-1, keepdims=True), folded.var(-1, keepdims=True)
    kv = (folded - mu) / np.sqrt(var + 1e-6) * attn.sr_norm.weight.data + attn.sr_norm.bias.data
    q = x @ attn.q.weight.data + attn.q.bias.data
    k = kv @ attn.k.weight.data + attn.k.bias.data
    v = kv @ attn.v.weight.data + attn.v.bias.data
    d = C // heads
    out = np.zeros((N, C))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        w = oracles.softmax_rows(q[:, sl] @ k[:, sl].T / np.sqrt(d))
        out[:, sl] = w @ v[:, sl]
    ref = out @ attn.proj.weight.data + attn.proj.bias.data
    np.testing.assert_allclose(attn(Tensor(x)).data, ref, rtol=1e-10, atol=1e-12)
    assert attn.last_weights.shape == (heads, N, N // R)
    np.testing.assert_allclose(attn.last_weights.sum(-1), 1.0)


def test_reduction_module_only_exists_when_ratio_above_one(rng):
    assert not hasattr(EfficientAttention(8, 1, 1, rng), "sr")
    a = EfficientAttention(8, 1, 2, rng)
    assert a.sr.weight.shape == (16, 8)


@pytest.mark.parametrize("R", [1, 2, 4, 8])
def test_spatial_reduce_shape(R, rng):
    C, N = 4, 64
    out = spatial_reduce(Tensor(rng.normal(size=(N, C))), R, Linear(C * R, C, rng), LayerNorm(C))
    assert out.shape == (N // R, C)


def test_spatial_reduce_rejects_indivisible(rng):
    with pytest.raises(ShapeError):
        spatial_reduce(Tensor(np.ones((6, 2))), 4, Linear(8, 2, rng), LayerNorm(2))


def test_heads_must_divide_channels(rng):
    with pytest.raises(ConfigError):
        EfficientAttention(10, 4, 1, rng)
    with pytest.raises(ConfigError):
        ModelConfig(encoder=EncoderConfig(stage3=StageConfig(1, 30, 4, 2)))


def test_token_map_round_trip(rng):
    x = rng.normal(size=(3, 4, 5)).astype(np.float32)
    t = map_to_tokens(Tensor(x))
    assert t.shape == (20, 3)
    np.testing.assert_array_equal(t.data[4 * 5 - 1], x[:, 3, 4])
    np.testing.assert_array_equal(tokens_to_map(t, 4, 5).data, x)


def test_block_preserves_shape(rng):
    blk = Block(StageConfig(1, 8, 2, 2, 4), rng)
    x = Tensor(rng.normal(size=(16, 8)))
    assert blk(x, 4, 4).shape == (16, 8)


@pytest.mark.parametrize("extent", [64, 96, 128])
def test_pyramid_extents_and_full_resolution_logits(extent, rng):
    model = build(ModelConfig(num_modalities=2))
    images = [Tensor(rng.normal(size=(3, extent, extent))) for _ in range(2)]
    with T.no_grad():
        pyr = model.encoders[0](images[0])
        logits = model(images)
    for i, f in enumerate(pyr):
        s = 4 * 2 ** i
        assert f.shape == (model.config.encoder.channels[i], extent // s, extent // s)
    assert logits.shape == (model.config.decoder.num_classes, extent, extent)


def test_non_square_input(rng):
    enc = MixTransformerEncoder(EncoderConfig(), rng)
    with T.no_grad():
        pyr = enc(Tensor(rng.normal(size=(3, 64, 96))))
    assert [f.shape[1:] for f in pyr] == [(16, 24), (8, 12), (4, 6), (2, 3)]


@pytest.mark.parametrize("shape", [(3, 70, 64), (3, 64, 48), (1, 64, 64), (64, 64)])
def test_bad_input_extent(shape):
    with pytest.raises((ConfigError, ShapeError)):
        check_input_extent(Tensor(np.zeros(shape)))


def test_encoder_parameter_names_follow_module_tree(rng):
    names = [n for n, _ in MixTransformerEncoder(EncoderConfig(), rng).named_parameters()]
    assert "stages.0.embed.proj.weight" in names
    assert "stages.0.blocks.0.attn.sr.weight" in names
    assert "stages.3.blocks.0.attn.sr.weight" not in names  # R = 1 at the last stage
    assert names[-1] == "stages.3.norm.bias"
