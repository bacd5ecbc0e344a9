import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmsformer import tensor as T
from mmsformer.config import FusionConfig, ModelConfig
from mmsformer.errors import ConfigError, ShapeError
from mmsformer.fusion import FusionBlock, SEBlock
from mmsformer.model import build
from mmsformer.tensor import Tensor


def _block(C=4, M=2, seed=0, **kw):
    return FusionBlock(C, M, FusionConfig(**kw), np.random.default_rng(seed))


def test_single_modality_identity_linear_fuse_is_identity(rng):
    blk = _block(C=5, M=1, linear_only=True)
    blk.linear_fuse.weight.data = np.eye(5, dtype=np.float32)
    blk.linear_fuse.bias.data[:] = 0
    x = rng.normal(size=(5, 6, 7)).astype(np.float32)
    out = blk([Tensor(x)]).data
    np.testing.assert_array_equal(out, x)


def _permuted_block(blk, perm, C):
    other = FusionBlock(C, len(perm), blk.cfg, np.random.default_rng(99))
    for (n, p), (_, q) in zip(blk.named_parameters(), other.named_parameters()):
        q.data = p.data.copy()
    w = blk.linear_fuse.weight.data
    other.linear_fuse.weight.data = np.concatenate([w[m * C:(m + 1) * C] for m in perm], axis=0)
    return other


@pytest.mark.parametrize("seed", range(5))
def test_modality_permutation_equivariance_is_bit_exact(seed):
    # small integers keep every product and partial sum exact, so summation order cannot matter
    r = np.random.default_rng(seed)
    C, M = 4, 3
    blk = _block(C, M, seed=seed)
    blk.linear_fuse.weight.data = r.integers(-3, 4, size=(M * C, C)).astype(np.float32)
    feats = [r.integers(-4, 5, size=(C, 5, 5)).astype(np.float32) for _ in range(M)]
    perm = list(r.permutation(M))
    other = _permuted_block(blk, perm, C)
    a = blk([Tensor(f) for f in feats]).data
    b = other([Tensor(feats[m]) for m in perm]).data
    assert a.tobytes() == b.tobytes()


def test_modality_permutation_equivariance_generic_values(f64, rng):
    C, M = 4, 3
    blk = _block(C, M)
    feats = [rng.normal(size=(C, 6, 6)) for _ in range(M)]
    perm = [2, 0, 1]
    other = _permuted_block(blk, perm, C)
    np.testing.assert_allclose(blk([Tensor(f) for f in feats]).data,
                               other([Tensor(feats[m]) for m in perm]).data, rtol=1e-12, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(1, 6), st.floats(0.1, 20.0), st.integers(0, 2**31 - 1))
def test_se_gates_strictly_between_zero_and_one(C, H, scale, seed):
    r = np.random.default_rng(seed)
    se = SEBlock(C, max(1, C // 4), r)
    x = Tensor(r.normal(size=(C, H, H)) * scale)
    out = se(x)
    g = se.last_gate
    assert g.shape == (C,)
    assert np.all(g > 0) and np.all(g < 1)
    np.testing.assert_allclose(out.data, x.data * g[:, None, None], rtol=1e-6)


def test_output_shape_and_ablation_structure():
    full = _block(8, 3)
    assert full([Tensor(np.ones((8, 4, 4)))] * 3).shape == (8, 4, 4)
    assert full.kernel_sizes == [3, 5, 7] and hasattr(full, "se")
    cfgs = {v: ModelConfig(variant=v).fusion for v in
            ("no_channel_attention", "no_parallel_convs", "kernels_3_7_11", "linear_only")}
    rng = np.random.default_rng(0)
    blocks = {v: FusionBlock(8, 3, c, rng) for v, c in cfgs.items()}
    assert not hasattr(blocks["no_channel_attention"], "se") and blocks["no_channel_attention"].kernel_sizes
    assert blocks["no_parallel_convs"].kernel_sizes == [] and hasattr(blocks["no_parallel_convs"], "se")
    assert blocks["kernels_3_7_11"].kernel_sizes == [3, 7, 11]
    assert [n for n, _ in blocks["linear_only"].named_parameters()] == ["linear_fuse.weight", "linear_fuse.bias"]


def test_parameter_differences_between_variants():
    C, M = 16, 2
    n = {v: FusionBlock(C, M, ModelConfig(variant=v).fusion, np.random.default_rng(0)).num_parameters()
         for v in ("full", "no_channel_attention", "no_parallel_convs", "linear_only")}
    h = max(1, C // 16)
    se = C * h + h + h * C + C
    convs = sum(k * k * C + C for k in (3, 5, 7))
    assert n["full"] - n["no_channel_attention"] == se
    assert n["full"] - n["no_parallel_convs"] == convs
    assert n["linear_only"] == M * C * C + C


def test_convs_use_same_padding_and_depthwise_shapes():
    blk = _block(6, 2)
    for conv, k in zip(blk.convs, [3, 5, 7]):
        assert conv.weight.shape == (6, 1, k, k)
    dense = _block(6, 2, conv_grouping="dense")
    assert dense.convs[2].weight.shape == (6, 6, 7, 7)


def test_block_without_se_is_affine_in_features(f64, rng):
    blk = _block(4, 2, enable_channel_attention=False)
    a = [rng.normal(size=(4, 5, 5)) for _ in range(2)]
    b = [rng.normal(size=(4, 5, 5)) for _ in range(2)]
    zero = [np.zeros((4, 5, 5))] * 2
    f = lambda fs: blk([Tensor(x) for x in fs]).data
    np.testing.assert_allclose(f([x + y for x, y in zip(a, b)]) - f(b), f(a) - f(zero), atol=1e-12)


def test_identity_projections_and_zero_convs_pass_fused_through(f64, rng):
    blk = _block(3, 2, enable_channel_attention=False)
    for lin in (blk.proj_in, blk.proj_out):
        lin.weight.data = np.eye(3)
        lin.bias.data[:] = 0
    for conv in blk.convs:
        conv.weight.data[:] = 0
        conv.bias.data[:] = 0
    feats = [Tensor(rng.normal(size=(3, 4, 4))) for _ in range(2)]
    np.testing.assert_allclose(blk(feats).data, blk.linear_fuse_maps(feats).data, rtol=1e-12)


def test_arity_and_shape_errors():
    blk = _block(4, 2)
    with pytest.raises(ConfigError):
        blk([Tensor(np.ones((4, 4, 4)))])
    with pytest.raises(ShapeError, match="modality 1"):
        blk([Tensor(np.ones((4, 4, 4))), Tensor(np.ones((4, 4, 2)))])
    with pytest.raises(ShapeError, match="modality 0"):
        blk([Tensor(np.ones((3, 4, 4))), Tensor(np.ones((3, 4, 4)))])


def test_bad_kernel_list_rejected():
    with pytest.raises(ConfigError):
        FusionConfig(kernel_sizes=[3, 4]).validate()
    with pytest.raises(ConfigError):
        FusionConfig(kernel_sizes=[]).validate()


def test_model_summary_lists_kernels_per_stage():
    s = build(ModelConfig(num_modalities=2, variant="kernels_3_7_11")).summary()
    assert s.count("kernels=[3, 7, 11]") == 4
