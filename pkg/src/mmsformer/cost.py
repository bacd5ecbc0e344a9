"""Closed-form parameter and FLOP accounting.

Conventions (printed with every report):

* a multiply-accumulate is 2 FLOPs; each bias add, residual/branch add, pooling
  add and SE gating multiply is 1 FLOP per element;
* normalisation, softmax, GELU, the attention scale and bilinear upsampling
  are not counted;
* attention counts the QK^T and AV products at the reduced key length N/R.

Node paths mirror the module paths of a built model, so parameter counts can
be cross-checked module by module.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

from .config import ModelConfig, full_scale_config

# reference fusion-block cost for four 3x512x512 modalities
PUBLISHED_FUSION_PARAMS_M = 3.23
PUBLISHED_FUSION_GFLOPS = 2.47


@dataclass
class CostNode:
    path: str
    params: int = 0
    flops: int = 0
    children: list["CostNode"] = field(default_factory=list)

    def add(self, name: str, params: int = 0, flops: int = 0) -> "CostNode":
        node = CostNode(f"{self.path}.{name}" if self.path else name, params, flops)
        self.children.append(node)
        return node

    def total(self) -> "CostNode":
        """Roll child counts up into every parent (in place) and return self."""
        if self.children:
            for c in self.children:
                c.total()
            self.params = sum(c.params for c in self.children)
            self.flops = sum(c.flops for c in self.children)
        return self

    def walk(self, depth: int = 0) -> Iterator[tuple[int, "CostNode"]]:
        yield depth, self
        for c in self.children:
            yield from c.walk(depth + 1)

    def find(self, path: str) -> "CostNode":
        for _, n in self.walk():
            if n.path == path:
                return n
        raise KeyError(path)


@dataclass
class CostReport:
    root: CostNode
    config: ModelConfig
    input_hw: tuple[int, int] | None

    @property
    def params(self) -> int:
        return self.root.params

    @property
    def flops(self) -> int:
        return self.root.flops

    def component(self, name: str) -> CostNode:
        return self.root.find(name)

    def assumptions(self) -> list[str]:
        f = self.config.fusion
        return [
            "FLOPs: 2 per multiply-accumulate; 1 per bias/residual/branch add, pooling add and gate multiply",
            "not counted: normalisation, softmax, GELU, attention scale, upsampling",
            f"fusion convs: {f.conv_grouping}, kernels {f.kernel_sizes}; SE ratio r={f.se_reduction} "
            f"(hidden = max(1, C // r)); all linear and conv layers carry biases",
            f"variant={self.config.variant}, modalities={self.config.num_modalities}",
        ]

    def to_text(self, max_depth: int | None = None) -> str:
        rows = [("module", "params", "flops", "GFLOPs")]
        for depth, n in self.root.walk():
            if max_depth is not None and depth > max_depth:
                continue
            label = "  " * depth + (n.path.rsplit(".", 1)[-1] if n.path else "model")
            g = f"{n.flops / 1e9:.2f}" if self.input_hw else "-"
            rows.append((label, str(n.params), str(n.flops) if self.input_hw else "-", g))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["# " + a for a in self.assumptions()]
        if self.input_hw:
            lines.append(f"# input: {self.config.num_modalities} x (3 x {self.input_hw[0]} x {self.input_hw[1]})")
        for r in rows:
            lines.append("  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r)))
        return "\n".join(lines)

    def records(self, max_depth: int | None = None) -> list[dict]:
        out = []
        for depth, n in self.root.walk():
            if max_depth is None or depth <= max_depth:
                out.append({"path": n.path or "model", "depth": depth, "params": n.params,
                            "flops": n.flops if self.input_hw else None})
        return out


# -- leaf formulas -------------------------------------------------------------
def linear_cost(c_in: int, c_out: int, tokens: int) -> tuple[int, int]:
    return c_in * c_out + c_out, 2 * tokens * c_in * c_out + tokens * c_out


def conv_cost(c_in: int, c_out: int, k: int, groups: int, out_h: int, out_w: int) -> tuple[int, int]:
    per_out = (c_in // groups) * k * k
    hw = out_h * out_w
    return per_out * c_out + c_out, 2 * hw * c_out * per_out + hw * c_out


def conv_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _layer(parent: CostNode, name: str, cost: tuple[int, int]) -> None:
    parent.add(name, *cost)


def _encoder(root: CostNode, cfg: ModelConfig, H: int, W: int) -> list[tuple[int, int]]:
    enc = cfg.encoder
    extents = []
    in_ch, h, w = enc.in_channels, H, W
    stages = root.add("stages")
    for i, s in enumerate(enc.stages):
        st = stages.add(str(i))
        C = s.channels
        h, w = conv_extent(h, s.patch_kernel, s.patch_stride, s.patch_pad), conv_extent(w, s.patch_kernel, s.patch_stride, s.patch_pad)
        extents.append((h, w))
        N = h * w
        embed = st.add("embed")
        _layer(embed, "proj", conv_cost(in_ch, C, s.patch_kernel, 1, h, w))
        embed.add("norm", 2 * C)
        blocks = st.add("blocks")
        for j in range(s.depth):
            b = blocks.add(str(j))
            b.add("norm1", 2 * C)
            attn = b.add("attn")
            M = N // s.reduction_ratio
            _layer(attn, "q", linear_cost(C, C, N))
            _layer(attn, "k", linear_cost(C, C, M))
            _layer(attn, "v", linear_cost(C, C, M))
            if s.reduction_ratio > 1:
                _layer(attn, "sr", linear_cost(C * s.reduction_ratio, C, M))
                attn.add("sr_norm", 2 * C)
            _layer(attn, "proj", linear_cost(C, C, N))
            attn.add("scores", 0, 2 * N * M * C)
            attn.add("mix", 0, 2 * N * M * C)
            b.add("norm2", 2 * C)
            ffn = b.add("ffn")
            hidden = C * s.ffn_expansion
            _layer(ffn, "fc1", linear_cost(C, hidden, N))
            _layer(ffn, "dwconv", conv_cost(hidden, hidden, 3, hidden, h, w))
            _layer(ffn, "fc2", linear_cost(hidden, C, N))
            b.add("residual", 0, 2 * N * C)
        st.add("norm", 2 * C)
        in_ch = C
    return extents


def fusion_block_cost(node: CostNode, cfg: ModelConfig, C: int, h: int, w: int) -> CostNode:
    f, M, N = cfg.fusion, cfg.num_modalities, h * w
    _layer(node, "linear_fuse", linear_cost(M * C, C, N))
    if f.linear_only:
        return node
    _layer(node, "proj_in", linear_cost(C, C, N))
    if f.enable_parallel_convs:
        convs = node.add("convs")
        groups = C if f.conv_grouping == "depthwise" else 1
        for j, k in enumerate(f.kernel_sizes):
            _layer(convs, str(j), conv_cost(C, C, k, groups, h, w))
        node.add("branch_sum", 0, len(f.kernel_sizes) * N * C)
    _layer(node, "proj_out", linear_cost(C, C, N))
    if f.enable_channel_attention:
        se = node.add("se")
        r = f.se_hidden(C)
        se.add("pool", 0, N * C)
        _layer(se, "w1", linear_cost(C, r, 1))
        _layer(se, "w2", linear_cost(r, C, 1))
        se.add("gate", 0, N * C)
        node.add("residual", 0, N * C)
    return node


def cost_report(config: ModelConfig, input_hw: tuple[int, int] | None = None) -> CostReport:
    H, W = input_hw if input_hw is not None else (64, 64)
    root = CostNode("")
    encoders = root.add("encoders")
    extents = []
    for m in range(config.num_modalities):
        extents = _encoder(encoders.add(str(m)), config, H, W)
    fusion = root.add("fusion")
    for i, (C, (h, w)) in enumerate(zip(config.encoder.channels, extents)):
        fusion_block_cost(fusion.add(str(i)), config, C, h, w)
    dec = root.add("decoder")
    D, K = config.decoder.embed_dim, config.decoder.num_classes
    h1, w1 = extents[0]
    embed = dec.add("embed")
    for i, (C, (h, w)) in enumerate(zip(config.encoder.channels, extents)):
        _layer(embed, str(i), linear_cost(C, D, h * w))
    _layer(dec, "fuse", linear_cost(len(extents) * D, D, h1 * w1))
    _layer(dec, "classify", linear_cost(D, K, h1 * w1))
    root.total()
    if input_hw is None:
        for _, n in root.walk():
            n.flops = 0
    return CostReport(root, config, input_hw)


def count_params(config: ModelConfig) -> CostReport:
    return cost_report(config, None)


def count_flops(config: ModelConfig, input_shape) -> CostReport:
    """``input_shape`` is the per-modality ``(3, H, W)`` (or ``(H, W)``)."""
    H, W = tuple(input_shape)[-2:]
    if H % 32 or W % 32:
        from .errors import ConfigError

        raise ConfigError(f"input extent {H}x{W} must be divisible by 32")
    return cost_report(config, (H, W))


def published_comparison(config: ModelConfig | None = None, extent: int = 512) -> dict:
    """Fusion cost of ``config`` (default: full-scale preset, four modalities) next to the
    published 3.23 M params / 2.47 GFLOPs."""
    cfg = config if config is not None else full_scale_config(num_modalities=4)
    rep = count_flops(cfg, (3, extent, extent))
    fusion = rep.component("fusion")
    params_m = fusion.params / 1e6
    gflops = fusion.flops / 1e9
    return {
        "num_modalities": cfg.num_modalities,
        "extent": extent,
        "fusion_params": fusion.params,
        "fusion_params_M": round(params_m, 3),
        "published_params_M": PUBLISHED_FUSION_PARAMS_M,
        "params_deviation": round((params_m - PUBLISHED_FUSION_PARAMS_M) / PUBLISHED_FUSION_PARAMS_M, 4),
        "fusion_flops": fusion.flops,
        "fusion_GFLOPs": round(gflops, 2),
        "fusion_GMACs": round(gflops / 2, 2),
        "published_GFLOPs": PUBLISHED_FUSION_GFLOPS,
        "gflops_deviation": round((gflops - PUBLISHED_FUSION_GFLOPS) / PUBLISHED_FUSION_GFLOPS, 4),
        "assumptions": rep.assumptions(),
    }
