import itertools

import numpy as np
import pytest

from mmsformer.config import EncoderConfig, FusionConfig, ModelConfig, StageConfig, full_scale_config
from mmsformer.cost import CostNode, count_flops, count_params, fusion_block_cost, published_comparison
from mmsformer.errors import ConfigError
from mmsformer.fusion import FusionBlock
from mmsformer.model import build


def _wide_encoder():
    stages = {}
    for i, (c, h, r) in enumerate(zip((16, 24, 32, 48), (2, 2, 4, 4), (8, 4, 2, 1))):
        k, s, p = (7, 4, 3) if i == 0 else (3, 2, 1)
        stages[f"stage{i + 1}"] = StageConfig(2 if i == 2 else 1, c, h, r, 2, k, s, p)
    return EncoderConfig(**stages)


CONFIGS = [
    ModelConfig(num_modalities=m, variant=v)
    for m, v in itertools.product((1, 2, 3), ("full", "no_channel_attention", "kernels_3_7_11"))
] + [
    ModelConfig(num_modalities=2, variant="linear_only"),
    ModelConfig(num_modalities=4, variant="no_parallel_convs", encoder=_wide_encoder()),
    ModelConfig(num_modalities=2, fusion=FusionConfig(conv_grouping="dense", se_reduction=4)),
]


def test_matrix_has_twelve_configs():
    assert len(CONFIGS) == 12


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: f"M{c.num_modalities}-{c.variant}-{c.fusion.conv_grouping}")
def test_param_count_matches_built_model_per_module(cfg):
    model = build(cfg)
    report = count_params(cfg)
    assert report.params == model.num_parameters()
    sizes = {n: p.size for n, p in model.named_parameters()}
    for _, node in report.root.walk():
        if node.params and not node.children:
            actual = sum(s for n, s in sizes.items() if n.startswith(node.path + "."))
            assert actual == node.params, node.path


def test_fusion_block_hand_count():
    cfg = ModelConfig(num_modalities=2)
    node = fusion_block_cost(CostNode("f"), cfg, 4, 2, 2).total()
    assert node.params == 433
    assert node.flops == 3381
    assert FusionBlock(4, 2, cfg.fusion, np.random.default_rng(0)).num_parameters() == 433


@pytest.mark.parametrize("variant", ["full", "no_channel_attention", "no_parallel_convs", "linear_only"])
def test_fusion_params_affine_in_modalities(variant):
    chans = ModelConfig().encoder.channels
    slope = sum(c * c for c in chans)
    totals = [count_params(ModelConfig(num_modalities=m, variant=variant)).component("fusion").params
              for m in range(1, 6)]
    assert all(b - a == slope for a, b in zip(totals, totals[1:]))


def test_conv_flops_quadruple_when_extent_doubles():
    cfg = ModelConfig(num_modalities=2)
    small, big = count_flops(cfg, (3, 64, 64)), count_flops(cfg, (3, 128, 128))
    small_nodes = {n.path: n for _, n in small.root.walk()}
    checked = 0
    for _, n in big.root.walk():
        if n.children:
            continue
        leaf = n.path.rsplit(".", 1)[-1]
        is_conv = ".convs." in n.path or leaf in ("dwconv",) or n.path.endswith("embed.proj")
        per_pixel = leaf in ("linear_fuse", "proj_in", "proj_out", "branch_sum", "residual", "pool", "gate",
                             "q", "fc1", "fc2", "fuse", "classify") or ".embed." in n.path
        if is_conv or (per_pixel and n.flops):
            assert n.flops == 4 * small_nodes[n.path].flops, n.path
            checked += 1
    assert checked > 20


def test_attention_flops_use_reduced_keys():
    cfg = ModelConfig()
    rep = count_flops(cfg, (3, 64, 64))
    node = rep.root.find("encoders.0.stages.0.blocks.0.attn.scores")
    N, C, R = 16 * 16, 8, 8
    assert node.flops == 2 * N * (N // R) * C


def test_flops_require_divisible_extent():
    with pytest.raises(ConfigError):
        count_flops(ModelConfig(), (3, 70, 64))


def test_report_text_and_records():
    rep = count_flops(ModelConfig(num_modalities=2), (3, 64, 64))
    text = rep.to_text(max_depth=2)
    assert "FLOPs: 2 per multiply-accumulate" in text and "fusion" in text
    recs = rep.records(max_depth=1)
    assert recs[0]["path"] == "model" and recs[0]["params"] == rep.params
    assert sum(r["params"] for r in recs if r["depth"] == 1) == rep.params


def test_full_scale_reference_comparison(capsys):
    cmp = published_comparison()
    with capsys.disabled():
        print(f"\n[info] full-scale fusion: {cmp['fusion_params_M']} M params ({cmp['params_deviation']:+.1%} vs 3.23 M), "
              f"{cmp['fusion_GFLOPs']} GFLOPs ({cmp['gflops_deviation']:+.1%} vs 2.47; {cmp['fusion_GMACs']} GMACs)")
    C = (64, 128, 320, 512)
    assert cmp["fusion_params"] == sum(
        4 * c * c + c + 2 * (c * c + c) + sum(k * k * c + c for k in (3, 5, 7)) + 2 * c * (c // 16) + c // 16 + c
        for c in C
    )
    assert abs(cmp["params_deviation"]) <= 0.25


def test_full_scale_preset_builds_consistent_params():
    cfg = full_scale_config(num_modalities=1)
    assert cfg.encoder.channels == [64, 128, 320, 512]
    assert count_params(cfg).component("decoder").params == sum(c * 768 + 768 for (c) in cfg.encoder.channels) + (
        4 * 768 * 768 + 768) + (768 * 20 + 20)
