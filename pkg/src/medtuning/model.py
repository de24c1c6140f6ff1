"""End-to-end segmentation model and the parameter planner.

The backbone is a small 2D transformer over image slices, either ``flat``
(constant width; blocks grouped into logical stages so inter-stage fusion
has boundaries) or ``hierarchical`` (width doubles and the token grid
halves between stages via patch merging). Volumes enter as batches of
slices ([B, C, D, H, W] -> [B*D, C, H, W]) and leave the decoder reshaped
back to volume layout, so per-slice modules never see the slice axis; any
cross-slice reasoning happens inside the inserted adapters.

The decoder is deliberately the lightest workable head (per-token linear
to class logits plus nearest-neighbor upsampling) so adapter effects are
not drowned out by head capacity at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import (AdapterConfig, AdapterParams, StageState, adapter_param_count,
                      build_adapter_params, med_adapter_forward, vanilla_adapter)
from .errors import ConfigError, ShapeError
from .ops import (AttentionBlockParams, attention_block, linear, patch_embed2d,
                  patch_merge)
from .rng import Rng
from .tensor import (Tensor, bias_add, forward_primitive, layer_norm, permute,
                     reduce_mean, reshape)

TUNING_MODES = ("scratch", "full", "head", "vanilla_adapter", "med_tuning", "pretrain")
PETL_MODES = ("head", "vanilla_adapter", "med_tuning")


@dataclass
class BackboneConfig:
    layout: str = "flat"
    stage_dims: tuple[int, ...] = (48, 48, 48, 48)
    stage_depths: tuple[int, ...] = (1, 1, 1, 1)
    patch: int = 4
    heads: tuple[int, ...] | int = 4
    input_channels: int = 1
    image_size: int = 32
    mlp_ratio: int = 4

    def __post_init__(self):
        self.stage_dims = tuple(int(d) for d in self.stage_dims)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        if self.layout not in ("flat", "hierarchical"):
            raise ConfigError(f"unknown layout {self.layout!r}")
        if len(self.stage_dims) != len(self.stage_depths) or not self.stage_dims:
            raise ConfigError("stage_dims and stage_depths must be equal-length, non-empty")
        if isinstance(self.heads, int):
            self.heads = (self.heads,) * len(self.stage_dims)
        else:
            self.heads = tuple(int(h) for h in self.heads)
        if len(self.heads) != len(self.stage_dims):
            raise ConfigError("heads must be one per stage")
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.layout == "flat":
            if len(set(self.stage_dims)) != 1:
                raise ConfigError("flat layout requires a constant width")
        else:
            for a, b in zip(self.stage_dims, self.stage_dims[1:]):
                if b != 2 * a:
                    raise ConfigError(f"hierarchical widths must double, got {a}->{b}")
            grid = self.image_size // self.patch
            for _ in range(len(self.stage_dims) - 1):
                if grid % 2:
                    raise ConfigError(f"grid {grid} not divisible by 2 at a merge")
                grid //= 2
        for d, h in zip(self.stage_dims, self.heads):
            if d % h:
                raise ConfigError(f"width {d} not divisible by {h} heads")

    @property
    def num_stages(self) -> int:
        return len(self.stage_dims)

    @property
    def base_grid(self) -> int:
        return self.image_size // self.patch

    def stage_grid(self, stage: int) -> int:
        if self.layout == "flat":
            return self.base_grid
        return self.base_grid // (2 ** stage)

    @property
    def final_grid(self) -> int:
        return self.stage_grid(self.num_stages - 1)


@dataclass
class VanillaAdapterParams:
    w_down: Tensor
    w_up: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.w_down, self.w_up]


@dataclass
class ModelGraph:
    """All parameters of one model plus the freeze mask implied by its mode."""

    backbone: BackboneConfig
    tuning_mode: str
    num_classes: int
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    blocks: list[list[AttentionBlockParams]]
    merges: list[tuple[Tensor, Tensor]]
    final_ln_g: Tensor | None = None
    final_ln_b: Tensor | None = None
    adapters: list[list] = field(default_factory=list)
    adapter_configs: list[list] = field(default_factory=list)
    adapter_template: AdapterConfig | None = None
    decoder_w: Tensor | None = None
    decoder_b: Tensor | None = None
    head_w: Tensor | None = None
    head_b: Tensor | None = None

    def named_params(self):
        """Yield (name, role, tensor) in a fixed order; names key checkpoints."""
        yield "backbone.patch.w", "backbone", self.patch_w
        yield "backbone.patch.b", "backbone", self.patch_b
        yield "backbone.pos", "backbone", self.pos
        yield "backbone.final_ln.g", "backbone", self.final_ln_g
        yield "backbone.final_ln.b", "backbone", self.final_ln_b
        fields = ("ln1.g", "ln1.b", "qkv.w", "qkv.b", "proj.w", "proj.b",
                  "ln2.g", "ln2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b")
        for s, stage in enumerate(self.blocks):
            for j, blk in enumerate(stage):
                for key, t in zip(fields, blk.tensors()):
                    yield f"backbone.s{s}.b{j}.{key}", "backbone", t
        for i, (w, b) in enumerate(self.merges):
            yield f"backbone.merge{i}.w", "backbone", w
            yield f"backbone.merge{i}.b", "backbone", b
        for s, stage in enumerate(self.adapters):
            for j, ad in enumerate(stage):
                if ad is None:
                    continue
                if isinstance(ad, VanillaAdapterParams):
                    yield f"adapter.s{s}.b{j}.down.w", "adapter", ad.w_down
                    yield f"adapter.s{s}.b{j}.up.w", "adapter", ad.w_up
                else:
                    for t in ad.tensors():
                        yield t.name, "adapter", t
        if self.decoder_w is not None:
            yield "decoder.w", "decoder", self.decoder_w
            yield "decoder.b", "decoder", self.decoder_b
        if self.head_w is not None:
            yield "head.w", "decoder", self.head_w
            yield "head.b", "decoder", self.head_b

    def parameters(self, trainable_only: bool = False) -> list[Tensor]:
        out = []
        for _, _, t in self.named_params():
            if not trainable_only or t.trainable:
                out.append(t)
        return out


# --------------------------------------------------------------------------
# Volume <-> slice reshaping
# --------------------------------------------------------------------------

def volume_to_slices(v: Tensor) -> Tensor:
    """[B, C, D, H, W] -> [B*D, C, H, W]; slice s of batch b lands at b*D+s."""
    b, c, d, h, w = v.shape
    y = permute(v, (0, 2, 1, 3, 4))
    return reshape(y, (b * d, c, h, w))


def slices_to_volume(x: Tensor, b: int, d: int) -> Tensor:
    """Exact inverse of :func:`volume_to_slices`."""
    n = x.shape[0]
    if n != b * d:
        raise ShapeError(f"leading dim {n} is not B*D = {b}*{d}")
    y = reshape(x, (b, d) + x.shape[1:])
    axes = (0, 2, 1) + tuple(range(3, len(y.shape)))
    return permute(y, axes)


# --------------------------------------------------------------------------
# Construction
# --------------------------------------------------------------------------

def _trunc(rng: Rng, name: str, shape) -> np.ndarray:
    return rng.derive(name).truncated_normal(shape, 0.02)


def _build_block(rng: Rng, name: str, d: int, heads: int, mlp_ratio: int) -> AttentionBlockParams:
    hdim = d * mlp_ratio
    mk = lambda key, shape: Tensor(
        rng.derive(f"{name}.{key}").truncated_normal(shape, 0.02), name=f"{name}.{key}")
    zeros = lambda key, n: Tensor(np.zeros(n, np.float32), name=f"{name}.{key}")
    ones = lambda key, n: Tensor(np.ones(n, np.float32), name=f"{name}.{key}")
    return AttentionBlockParams(
        ln1_g=ones("ln1.g", d), ln1_b=zeros("ln1.b", d),
        w_qkv=mk("qkv.w", (d, 3 * d)), b_qkv=zeros("qkv.b", 3 * d),
        w_proj=mk("proj.w", (d, d)), b_proj=zeros("proj.b", d),
        ln2_g=ones("ln2.g", d), ln2_b=zeros("ln2.b", d),
        w_fc1=mk("fc1.w", (d, hdim)), b_fc1=zeros("fc1.b", hdim),
        w_fc2=mk("fc2.w", (hdim, d)), b_fc2=zeros("fc2.b", d),
        heads=heads)


def build_model(bc: BackboneConfig, ac: AdapterConfig | None, mode: str, rng: Rng,
                num_classes: int = 4) -> ModelGraph:
    """Allocate a model for one tuning mode and apply its freeze mask.

    ``pretrain`` builds the classification model (mean-pooled tokens and a
    linear head, everything trainable). Adapters exist only in the
    ``vanilla_adapter`` / ``med_tuning`` modes and start as identities, so
    a PETL model's forward at init equals the frozen backbone + decoder.
    """
    if mode not in TUNING_MODES:
        raise ConfigError(f"unknown tuning mode {mode!r}")
    if mode in ("vanilla_adapter", "med_tuning") and ac is None:
        raise ConfigError(f"mode {mode} requires an adapter configuration")

    d0 = bc.stage_dims[0]
    d_last = bc.stage_dims[-1]
    patch_dim = bc.input_channels * bc.patch * bc.patch
    g = bc.base_grid
    graph = ModelGraph(
        backbone=bc, tuning_mode=mode, num_classes=num_classes,
        patch_w=Tensor(_trunc(rng, "patch.w", (patch_dim, d0)), name="backbone.patch.w"),
        patch_b=Tensor(np.zeros(d0, np.float32), name="backbone.patch.b"),
        pos=Tensor(_trunc(rng, "pos", (g * g, d0)), name="backbone.pos"),
        final_ln_g=Tensor(np.ones(d_last, np.float32), name="backbone.final_ln.g"),
        final_ln_b=Tensor(np.zeros(d_last, np.float32), name="backbone.final_ln.b"),
        blocks=[], merges=[], adapter_template=ac)

    for s in range(bc.num_stages):
        stage = [_build_block(rng, f"backbone.s{s}.b{j}", bc.stage_dims[s],
                              bc.heads[s], bc.mlp_ratio)
                 for j in range(bc.stage_depths[s])]
        graph.blocks.append(stage)
    if bc.layout == "hierarchical":
        for s in range(bc.num_stages - 1):
            d = bc.stage_dims[s]
            graph.merges.append((
                Tensor(_trunc(rng, f"merge{s}.w", (4 * d, 2 * d)), name=f"backbone.merge{s}.w"),
                Tensor(np.zeros(2 * d, np.float32), name=f"backbone.merge{s}.b")))

    if mode == "med_tuning":
        for s in range(bc.num_stages):
            stage_ads, stage_cfgs = [], []
            for j in range(bc.stage_depths[s]):
                last = j == bc.stage_depths[s] - 1
                c_prev = bc.stage_dims[s - 1] if (last and s > 0) else None
                cfg = ac.for_site(bc.stage_dims[s], last, c_prev)
                stage_cfgs.append(cfg)
                stage_ads.append(build_adapter_params(cfg, rng, name=f"adapter.s{s}.b{j}"))
            graph.adapters.append(stage_ads)
            graph.adapter_configs.append(stage_cfgs)
    elif mode == "vanilla_adapter":
        for s in range(bc.num_stages):
            stage_ads = []
            for j in range(bc.stage_depths[s]):
                d = bc.stage_dims[s]
                m = d // ac.alpha
                stage_ads.append(VanillaAdapterParams(
                    w_down=Tensor(_trunc(rng, f"vad.s{s}.b{j}.down", (d, m)),
                                  name=f"adapter.s{s}.b{j}.down.w"),
                    w_up=Tensor(np.zeros((m, d), np.float32),
                                name=f"adapter.s{s}.b{j}.up.w")))
            graph.adapters.append(stage_ads)
            graph.adapter_configs.append([None] * bc.stage_depths[s])

    d_final = bc.stage_dims[-1]
    if mode == "pretrain":
        graph.head_w = Tensor(_trunc(rng, "head.w", (d_final, num_classes)), name="head.w")
        graph.head_b = Tensor(np.zeros(num_classes, np.float32), name="head.b")
    else:
        graph.decoder_w = Tensor(_trunc(rng, "decoder.w", (d_final, num_classes)),
                                 name="decoder.w")
        graph.decoder_b = Tensor(np.zeros(num_classes, np.float32), name="decoder.b")

    apply_freeze_mask(graph)
    return graph


def apply_freeze_mask(graph: ModelGraph) -> None:
    """Set per-tensor trainability from the tuning mode."""
    backbone_trainable = graph.tuning_mode in ("scratch", "full", "pretrain")
    for _, role, t in graph.named_params():
        t.trainable = backbone_trainable if role == "backbone" else True


def load_backbone(graph: ModelGraph, table: dict[str, np.ndarray]) -> None:
    """Copy ``backbone.*`` tensors from a checkpoint table into the graph."""
    for name, role, t in graph.named_params():
        if role != "backbone":
            continue
        if name not in table:
            raise ConfigError(f"checkpoint is missing backbone tensor {name!r}")
        src = table[name]
        if tuple(src.shape) != t.shape:
            raise ConfigError(f"checkpoint tensor {name!r} has shape {src.shape}, "
                              f"model expects {t.shape}")
        t.data = np.ascontiguousarray(src, dtype=np.float32)


# --------------------------------------------------------------------------
# Forward passes
# --------------------------------------------------------------------------

def _encode_tokens(graph: ModelGraph, slices: Tensor, b: int, d: int):
    """Run patch embedding and all stages; returns final tokens and grid."""
    bc = graph.backbone
    tokens = patch_embed2d(slices, bc.patch, graph.patch_w, graph.patch_b)
    tokens = bias_add(tokens, graph.pos)
    grid = bc.base_grid
    state = StageState()
    for s in range(bc.num_stages):
        for j, blk in enumerate(graph.blocks[s]):
            tokens = attention_block(tokens, blk)
            if graph.adapters:
                ad = graph.adapters[s][j]
                if isinstance(ad, VanillaAdapterParams):
                    tokens = vanilla_adapter(tokens, ad.w_down, ad.w_up)
                elif ad is not None:
                    cfg = graph.adapter_configs[s][j]
                    tokens, state = med_adapter_forward(
                        tokens, (b, d, grid, grid), ad, cfg, state)
        if bc.layout == "hierarchical" and s < bc.num_stages - 1:
            w, bias = graph.merges[s]
            tokens = patch_merge(tokens, (grid, grid), w, bias)
            grid //= 2
    tokens = layer_norm(tokens, graph.final_ln_g, graph.final_ln_b)
    return tokens, grid


def segment_forward(graph: ModelGraph, v: Tensor) -> Tensor:
    """[B, C_in, D, H, W] volume -> [B, num_classes, D, H, W] logits."""
    if graph.decoder_w is None:
        raise ConfigError("model has no decoder (built for pretraining?)")
    b, c, d, h, w = v.shape
    bc = graph.backbone
    if c != bc.input_channels or h != bc.image_size or w != bc.image_size:
        raise ShapeError(f"volume {v.shape} does not match backbone "
                         f"({bc.input_channels}ch, {bc.image_size}px)")
    slices = volume_to_slices(v)
    tokens, grid = _encode_tokens(graph, slices, b, d)
    logits = linear(tokens, graph.decoder_w, graph.decoder_b)   # [B*D, T, K]
    logits = reshape(logits, (b * d, grid, grid, graph.num_classes))
    logits = permute(logits, (0, 3, 1, 2))
    factor = bc.image_size // grid
    logits = forward_primitive("upsample2d_nearest", [logits], {"factor": factor})
    return slices_to_volume(logits, b, d)


def classify_forward(graph: ModelGraph, images: Tensor) -> Tensor:
    """[N, C_in, H, W] images -> [N, num_classes] logits (mean-pooled tokens)."""
    if graph.head_w is None:
        raise ConfigError("model has no classification head")
    n = images.shape[0]
    tokens, _ = _encode_tokens(graph, images, n, 1)
    pooled = reduce_mean(tokens, axes=(1,))
    return linear(pooled, graph.head_w, graph.head_b)


# --------------------------------------------------------------------------
# Parameter accounting
# --------------------------------------------------------------------------

@dataclass
class ParamReport:
    total: int
    tuned: int
    frozen: int
    inserted: int
    rows: list[tuple[str, str, int]]
    assumptions: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"total": self.total, "tuned": self.tuned, "frozen": self.frozen,
                "inserted": self.inserted,
                "rows": [{"name": n, "role": r, "count": c} for n, r, c in self.rows],
                "assumptions": list(self.assumptions)}


def param_report(graph: ModelGraph) -> ParamReport:
    """Exact counts by enumerating stored tensor lengths."""
    rows, total, tuned, inserted = [], 0, 0, 0
    for name, role, t in graph.named_params():
        n = t.size
        rows.append((name, role, n))
        total += n
        if t.trainable:
            tuned += n
        if role == "adapter":
            inserted += n
    return ParamReport(total=total, tuned=tuned, frozen=total - tuned,
                       inserted=inserted, rows=rows)


HOSTS = {
    "vit_b16": {"dims": (768,) * 4, "depths": (3,) * 4,
                "note": "width 768 x 12 blocks in 4 logical stages of 3"},
    "swin_t": {"dims": (96, 192, 384, 768), "depths": (2, 2, 6, 2),
               "note": "hierarchical dims 96/192/384/768, depths 2/2/6/2"},
}


def plan_params(host: str, ac: AdapterConfig, dims=None, depths=None) -> ParamReport:
    """Analytic inserted-parameter ledger for a host backbone shape.

    Pure arithmetic over the per-adapter closed forms; no tensors are
    allocated and no backbone or decoder parameters are included. ``host``
    is ``vit_b16``, ``swin_t``, or ``custom`` with explicit dims/depths.
    """
    if host in HOSTS:
        dims = HOSTS[host]["dims"]
        depths = HOSTS[host]["depths"]
        note = HOSTS[host]["note"]
    elif host == "custom":
        if not dims or not depths or len(dims) != len(depths):
            raise ConfigError("custom host needs matching dims and depths")
        note = f"custom dims {list(dims)}, depths {list(depths)}"
    else:
        raise ConfigError(f"unknown host {host!r} (expected vit_b16, swin_t or custom)")
    for c in dims:
        if c % ac.alpha:
            raise ConfigError(f"host width {c} not divisible by alpha {ac.alpha}")

    rows: list[tuple[str, str, int]] = []
    parts = {"projections": 0, "conv3": 0, "conv5": 0, "fft": 0,
             "channel_mix": 0, "align": 0, "fuse": 0}
    total = 0
    for s, (c, depth) in enumerate(zip(dims, depths)):
        cp = c // ac.alpha
        stage_total = 0
        for j in range(depth):
            last = j == depth - 1
            c_prev = dims[s - 1] if (last and s > 0) else None
            cfg = ac.for_site(c, last, c_prev)
            stage_total += adapter_param_count(cfg)
            parts["projections"] += c * cp + cp + cp * c + c
            if cfg.conv3:
                parts["conv3"] += cp * (9 + 3 + 2)
            if cfg.conv5:
                parts["conv5"] += cp * (25 + 5 + 2)
            if cfg.fft:
                parts["fft"] += 2 * cp * (2 if cfg.fft_bias else 1)
            if cfg.channel_mix:
                parts["channel_mix"] += cp * cp + cp
            if cfg.has_inter:
                parts["align"] += (cfg.c_prev // ac.alpha) * cp + cp
                if cfg.inter_mode == "concat":
                    parts["fuse"] += 2 * cp * cp + cp
        rows.append((f"stage{s} (C={c}, {depth} adapters)", "adapter", stage_total))
        total += stage_total
    assert total == sum(parts.values())
    for key, val in parts.items():
        rows.append((f"component: {key}", "adapter", val))

    branches = [n for n, on in (("conv3", ac.conv3), ("conv5", ac.conv5),
                                ("fft", ac.fft)) if on]
    assumptions = [
        f"host {host}: {note}",
        "one adapter after every transformer block; stage-last adapters carry "
        "the inter-stage extras (first stage has no predecessor, so none)",
        f"alpha={ac.alpha}; branches={'+'.join(branches)}; "
        f"channel_mix={'on' if ac.channel_mix else 'off'}",
        f"spectral weights are one complex scalar per bottleneck channel; "
        f"fft_bias={'on' if ac.fft_bias else 'off'}",
        f"inter-stage fusion mode={ac.inter_mode}; alignment is a pointwise "
        "(1x1x1) channel projection with stride-2 subsampling when grids differ",
        "all linear/conv layers carry biases and biases are counted",
        "vanilla-adapter baseline for comparison is bias-free (2*C*C/alpha per block)",
    ]
    return ParamReport(total=total, tuned=total, frozen=0, inserted=total,
                       rows=rows, assumptions=assumptions)
