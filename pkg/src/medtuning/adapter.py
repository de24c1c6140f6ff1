"""Bottleneck adapter with intra-stage enhancement and inter-stage fusion.

The block keeps the vanilla bottleneck (down-project, nonlinearity,
up-project, residual) and enhances the bottleneck volume with three
parallel channel-separable branches — factorized depthwise 3x3x3 and 5x5x5
convolutions and a per-channel Fourier filter — fused by a 1x1x1 channel
mix. Adapters sitting at the end of a stage can additionally fold in the
enhanced features emitted by the previous stage's last adapter, aligned in
channel count and grid resolution.

Forward contract (token side): output = X + act(Reshape(H + X') @ W_up),
with X' the reshaped bottleneck volume and H the enhanced volume, so a
zero W_up makes the whole block the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, GeometryError, ShapeError
from .ops import DepthwiseKernelPair, conv3d_pointwise, dwconv_cascade, linear
from .rng import Rng
from .spectral import SpectralWeights, spectral_filter
from .tensor import (Tensor, activation, add, concat, matmul, maximum,
                     permute, reshape, slice_tensor)

INTER_MODES = ("none", "add", "max", "concat")
BRANCH_NAMES = ("conv3", "conv5", "fft")


@dataclass
class AdapterConfig:
    """Shape and feature toggles for one inserted adapter.

    ``c`` is the host block width; the bottleneck width is ``c / alpha``.
    ``inter_mode`` is the stage-last fusion policy; it only takes effect on
    adapters with ``is_stage_last`` set. ``c_prev`` is the previous stage's
    host width and is only set on stage-last adapters with a predecessor
    stage. A configuration used as a template is specialized per insertion
    site with :meth:`for_site`.
    """

    c: int
    alpha: int
    conv3: bool = True
    conv5: bool = True
    fft: bool = True
    channel_mix: bool = True
    fft_bias: bool = False
    inter_mode: str = "add"
    is_stage_last: bool = False
    c_prev: int | None = None
    act: str = "gelu"

    def __post_init__(self):
        if self.alpha < 1 or self.c < 1 or self.c % self.alpha:
            raise ConfigError(f"width {self.c} not divisible by alpha {self.alpha}")
        if self.inter_mode not in INTER_MODES:
            raise ConfigError(f"unknown inter_mode {self.inter_mode!r}")
        if self.c_prev is not None and (self.c_prev < 1 or self.c_prev % self.alpha):
            raise ConfigError(f"c_prev {self.c_prev} not divisible by alpha {self.alpha}")

    @property
    def bottleneck(self) -> int:
        return self.c // self.alpha

    @property
    def has_inter(self) -> bool:
        return (self.is_stage_last and self.inter_mode != "none"
                and self.c_prev is not None)

    def for_site(self, c: int, is_stage_last: bool, c_prev: int | None) -> "AdapterConfig":
        """Clone this template for a concrete insertion site."""
        mode = self.inter_mode if is_stage_last else "none"
        return replace(self, c=c, is_stage_last=is_stage_last,
                       inter_mode=mode, c_prev=c_prev if is_stage_last else None)


@dataclass
class AdapterParams:
    """Trainable tensors of one adapter; disabled branches hold nothing."""

    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor
    pair3: DepthwiseKernelPair | None = None
    pair5: DepthwiseKernelPair | None = None
    spectral: SpectralWeights | None = None
    w_mix: Tensor | None = None
    b_mix: Tensor | None = None
    w_align: Tensor | None = None
    b_align: Tensor | None = None
    w_fuse: Tensor | None = None
    b_fuse: Tensor | None = None

    def tensors(self) -> list[Tensor]:
        out = [self.w_down, self.b_down, self.w_up, self.b_up]
        for pair in (self.pair3, self.pair5):
            if pair is not None:
                out += pair.tensors()
        if self.spectral is not None:
            out += self.spectral.tensors()
        for t in (self.w_mix, self.b_mix, self.w_align, self.b_align,
                  self.w_fuse, self.b_fuse):
            if t is not None:
                out.append(t)
        return out


@dataclass
class StageState:
    """Enhanced feature volume emitted by the previous stage's last adapter."""

    h_last: Tensor | None = None
    channels: int = 0
    grid: tuple[int, int] = (0, 0)


def _kernel_pair(rng: Rng, c: int, k: int, name: str) -> DepthwiseKernelPair:
    return DepthwiseKernelPair(
        spatial=Tensor(rng.derive(name, "spatial").truncated_normal((c, 1, k, k), 0.02),
                       trainable=True, name=f"{name}.spatial"),
        depth=Tensor(rng.derive(name, "depth").truncated_normal((c, k, 1, 1), 0.02),
                     trainable=True, name=f"{name}.depth"),
        bias_spatial=Tensor(np.zeros(c, np.float32), trainable=True, name=f"{name}.bs"),
        bias_depth=Tensor(np.zeros(c, np.float32), trainable=True, name=f"{name}.bd"),
    )


def build_adapter_params(config: AdapterConfig, rng: Rng, name: str = "adapter") -> AdapterParams:
    """Allocate adapter tensors with identity-at-init values.

    Down-projection and branch kernels get truncated-normal 0.02 draws;
    the up-projection and its bias are zero so the block starts as the
    identity; the spectral weight starts at 1+0j (identity filter).
    """
    c, cp = config.c, config.bottleneck
    params = AdapterParams(
        w_down=Tensor(rng.derive(name, "down").truncated_normal((c, cp), 0.02),
                      trainable=True, name=f"{name}.down.w"),
        b_down=Tensor(np.zeros(cp, np.float32), trainable=True, name=f"{name}.down.b"),
        w_up=Tensor(np.zeros((cp, c), np.float32), trainable=True, name=f"{name}.up.w"),
        b_up=Tensor(np.zeros(c, np.float32), trainable=True, name=f"{name}.up.b"),
    )
    if config.conv3:
        params.pair3 = _kernel_pair(rng, cp, 3, f"{name}.conv3")
    if config.conv5:
        params.pair5 = _kernel_pair(rng, cp, 5, f"{name}.conv5")
    if config.fft:
        w_re = Tensor(np.ones(cp, np.float32), trainable=True, name=f"{name}.fft.wr")
        w_im = Tensor(np.zeros(cp, np.float32), trainable=True, name=f"{name}.fft.wi")
        if config.fft_bias:
            b_re = Tensor(np.zeros(cp, np.float32), trainable=True, name=f"{name}.fft.br")
            b_im = Tensor(np.zeros(cp, np.float32), trainable=True, name=f"{name}.fft.bi")
            params.spectral = SpectralWeights(w_re, w_im, b_re, b_im)
        else:
            params.spectral = SpectralWeights(w_re, w_im)
    if config.channel_mix:
        params.w_mix = Tensor(rng.derive(name, "mix").truncated_normal((cp, cp), 0.02),
                              trainable=True, name=f"{name}.mix.w")
        params.b_mix = Tensor(np.zeros(cp, np.float32), trainable=True, name=f"{name}.mix.b")
    if config.has_inter:
        cp_prev = config.c_prev // config.alpha
        params.w_align = Tensor(rng.derive(name, "align").truncated_normal((cp_prev, cp), 0.02),
                                trainable=True, name=f"{name}.align.w")
        params.b_align = Tensor(np.zeros(cp, np.float32), trainable=True,
                                name=f"{name}.align.b")
        if config.inter_mode == "concat":
            params.w_fuse = Tensor(rng.derive(name, "fuse").truncated_normal((2 * cp, cp), 0.02),
                                   trainable=True, name=f"{name}.fuse.w")
            params.b_fuse = Tensor(np.zeros(cp, np.float32), trainable=True,
                                   name=f"{name}.fuse.b")
    return params


def adapter_param_count(config: AdapterConfig) -> int:
    """Closed-form parameter count; equals enumeration of allocated tensors."""
    c, cp = config.c, config.bottleneck
    total = c * cp + cp          # down
    total += cp * c + c          # up
    for on, k in ((config.conv3, 3), (config.conv5, 5)):
        if on:
            total += cp * (k * k + k + 2)
    if config.fft:
        total += 2 * cp
        if config.fft_bias:
            total += 2 * cp
    if config.channel_mix:
        total += cp * cp + cp
    if config.has_inter:
        total += (config.c_prev // config.alpha) * cp + cp
        if config.inter_mode == "concat":
            total += 2 * cp * cp + cp
    return total


# --------------------------------------------------------------------------
# Forward pieces
# --------------------------------------------------------------------------

def vanilla_adapter(x: Tensor, w_down: Tensor, w_up: Tensor, act: str = "gelu") -> Tensor:
    """Plain bottleneck adapter: x + act(x @ W_down) @ W_up."""
    return add(x, matmul(activation(matmul(x, w_down), act), w_up))


def project_down(x: Tensor, geometry: tuple[int, int, int, int],
                 params: AdapterParams, act: str = "gelu") -> Tensor:
    """Per-token down-projection and reshape into the 5D bottleneck volume.

    ``x`` is [B*D, T, C] with T == h*w; the result is [B, C', D, h, w].
    """
    b, d, h, w = geometry
    n, t, _ = x.shape
    if n != b * d or t != h * w:
        raise ShapeError(f"tokens {x.shape} inconsistent with geometry {geometry}")
    cp = params.w_down.shape[1]
    y = activation(linear(x, params.w_down, params.b_down), act)
    y = reshape(y, (b, d, h, w, cp))
    return permute(y, (0, 4, 1, 2, 3))


def _volume_to_tokens(v: Tensor) -> Tensor:
    b, cp, d, h, w = v.shape
    y = permute(v, (0, 2, 3, 4, 1))
    return reshape(y, (b * d, h * w, cp))


def intra_fe(xp: Tensor, params: AdapterParams, config: AdapterConfig) -> Tensor:
    """Three-branch enhancement with channel mixing.

    H = Mix(DWConv3(X') + DWConv5(X') + F) where F is the spectral branch;
    disabled branches contribute zero and Mix is skipped when channel_mix
    is off.
    """
    if not (config.conv3 or config.conv5 or config.fft):
        raise ConfigError("intra_fe: all branches disabled")
    acc = None
    if config.conv3:
        acc = dwconv_cascade(xp, params.pair3)
    if config.conv5:
        y = dwconv_cascade(xp, params.pair5)
        acc = y if acc is None else add(acc, y)
    if config.fft:
        y = spectral_filter(xp, params.spectral)
        acc = y if acc is None else add(acc, y)
    if config.channel_mix:
        acc = conv3d_pointwise(acc, params.w_mix, params.b_mix)
    return acc


def inter_fi(h: Tensor, state: StageState, params: AdapterParams,
             config: AdapterConfig) -> Tensor:
    """Fuse the previous stage's enhanced features into this stage's last H.

    The carried volume is aligned by a pointwise channel projection, with
    stride-2 spatial subsampling when the previous grid is twice the
    current one, then combined per ``inter_mode``.
    """
    if not config.is_stage_last or config.inter_mode == "none":
        raise ConfigError("inter_fi requires a stage-last adapter with a fusion mode")
    if state.h_last is None:
        return h
    prev = state.h_last
    _, cprev, d, hp, wp = prev.shape
    _, cp, dc, hc, wc = h.shape
    if d != dc:
        raise GeometryError(f"slice counts differ: {d} vs {dc}")
    ratios = (hp // hc if hp % hc == 0 else 0, wp // wc if wp % wc == 0 else 0)
    if ratios[0] not in (1, 2) or ratios[1] not in (1, 2) or ratios[0] != ratios[1]:
        raise GeometryError(f"cannot align grid {hp}x{wp} to {hc}x{wc}")
    if ratios[0] == 2:
        prev = slice_tensor(prev, (0, 0, 0, 0, 0), prev.shape, (1, 1, 1, 2, 2))
    aligned = conv3d_pointwise(prev, params.w_align, params.b_align)
    if config.inter_mode == "add":
        return add(h, aligned)
    if config.inter_mode == "max":
        return maximum(h, aligned)
    fused = concat([h, aligned], axis=1)
    return conv3d_pointwise(fused, params.w_fuse, params.b_fuse)


def med_adapter_forward(x: Tensor, geometry: tuple[int, int, int, int],
                        params: AdapterParams, config: AdapterConfig,
                        state: StageState) -> tuple[Tensor, StageState]:
    """Full adapter: bottleneck, enhancement, optional fusion, residual.

    Returns the adapted tokens and the state to thread into the next
    stage. Only stage-last adapters replace the carried state.
    """
    b, d, gh, gw = geometry
    xp = project_down(x, geometry, params, config.act)
    h = intra_fe(xp, params, config)
    new_state = state
    if config.is_stage_last and config.inter_mode != "none":
        h = inter_fi(h, state, params, config)
        new_state = StageState(h_last=h, channels=config.bottleneck, grid=(gh, gw))
    tokens = _volume_to_tokens(add(h, xp))
    out = add(x, activation(linear(tokens, params.w_up, params.b_up), config.act))
    return out, new_state
