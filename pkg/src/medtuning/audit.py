"""Numerical self-checks: gradient audit and oracle suites.

Used by the ``grad-check`` and ``selftest`` CLI subcommands and mirrored by
the test suite. Every check returns (name, measured error, bound); a check
passes when the error is strictly below its bound.
"""

from __future__ import annotations

import numpy as np

from . import ops as O
from . import spectral as S
from .adapter import (AdapterConfig, StageState, build_adapter_params, inter_fi,
                      intra_fe, med_adapter_forward, project_down, vanilla_adapter)
from .model import BackboneConfig, build_model, segment_forward
from .rng import Rng
from .tensor import (Tape, Tensor, backward, bias_add, concat, embed_lookup,
                     forward_primitive, gelu, grad_check, hadamard, layer_norm,
                     matmul, maximum, pad, permute, reduce_mean, reduce_sum, relu,
                     reshape, scale, slice_tensor, softmax)
from .training import (composite_loss, cross_entropy_loss, dice_score, hausdorff95,
                       soft_dice_loss)

GRAD_TOL = 1e-2
EPS = 1e-3


def _t(seed, shape, std=1.0, trainable=True) -> Tensor:
    return Tensor(Rng(seed).normal(shape, 0.0, std), trainable=trainable)


def _wsum(t: Tensor, seed: int) -> Tensor:
    """Random-weighted sum; makes cotangents non-uniform."""
    r = Tensor(Rng(seed).normal(t.shape))
    return reduce_sum(hadamard(t, r))


def gradient_audit(max_coords: int | None = None) -> list[tuple[str, float, float]]:
    """grad_check over every differentiable operation, composites included."""
    checks: list[tuple[str, float, float]] = []

    def run(name, build, point, coords=max_coords):
        err = grad_check(build, point, EPS, max_coords=coords)
        checks.append((name, err, GRAD_TOL))

    a, b = _t(1, (3, 4)), _t(2, (3, 4))
    run("add", lambda p: _wsum(p[0] + p[1], 90), [a, b])
    run("sub", lambda p: _wsum(p[0] - p[1], 91), [a, b])
    run("hadamard", lambda p: _wsum(hadamard(p[0], p[1]), 92), [a, b])
    run("maximum", lambda p: _wsum(maximum(p[0], p[1]), 93), [a, b])
    run("scale", lambda p: _wsum(scale(p[0], -1.7), 94), [_t(3, (3, 4))])
    run("matmul2d", lambda p: _wsum(matmul(p[0], p[1]), 95), [_t(4, (3, 4)), _t(5, (4, 2))])
    run("matmul_batched", lambda p: _wsum(matmul(p[0], p[1]), 96),
        [_t(6, (2, 3, 4)), _t(7, (2, 4, 2))])
    run("matmul_stacked", lambda p: _wsum(matmul(p[0], p[1]), 97),
        [_t(8, (2, 3, 4)), _t(9, (4, 2))])
    run("reshape", lambda p: _wsum(reshape(p[0], (4, 3)), 98), [_t(10, (3, 4))])
    run("permute", lambda p: _wsum(permute(p[0], (2, 0, 1)), 99), [_t(11, (2, 3, 4))])
    run("concat", lambda p: _wsum(concat([p[0], p[1]], 1), 100),
        [_t(12, (2, 3)), _t(13, (2, 2))])
    run("slice", lambda p: _wsum(slice_tensor(p[0], (0, 1), (2, 4), (1, 2)), 101),
        [_t(14, (3, 5))])
    run("sum", lambda p: _wsum(reduce_sum(p[0], (1,)), 102), [_t(15, (3, 4))])
    run("mean", lambda p: _wsum(reduce_mean(p[0], (0,)), 103), [_t(16, (3, 4))])
    run("relu", lambda p: _wsum(relu(p[0]), 104), [_t(17, (3, 4))])
    run("gelu", lambda p: _wsum(gelu(p[0]), 105), [_t(18, (3, 4))])
    run("softmax", lambda p: _wsum(softmax(p[0], 1), 106), [_t(19, (3, 4))])
    run("layer_norm", lambda p: _wsum(layer_norm(p[0], p[1], p[2]), 107),
        [_t(20, (3, 6)), _t(21, (6,)), _t(22, (6,))])
    run("pad", lambda p: _wsum(pad(p[0], ((0, 0), (1, 2))), 108), [_t(23, (3, 4))])
    run("embed_lookup", lambda p: _wsum(embed_lookup(p[0], [0, 2, 1, 2]), 109),
        [_t(24, (3, 5))])
    run("bias_add", lambda p: _wsum(bias_add(p[0], p[1]), 110),
        [_t(25, (2, 3, 4)), _t(26, (3, 4))])
    run("linear", lambda p: _wsum(O.linear(p[0], p[1], p[2]), 111),
        [_t(27, (3, 4)), _t(28, (4, 2)), _t(29, (2,))])
    run("upsample2d_nearest",
        lambda p: _wsum(forward_primitive("upsample2d_nearest", [p[0]], {"factor": 2}), 112),
        [_t(30, (1, 2, 3, 3))])

    x5 = _t(31, (1, 2, 3, 4, 4))
    run("dwconv3d_spatial",
        lambda p: _wsum(O.dwconv3d_single(p[0], p[1], p[2]), 113),
        [x5, _t(32, (2, 1, 3, 3)), _t(33, (2,))])
    run("dwconv3d_depth",
        lambda p: _wsum(O.dwconv3d_single(p[0], p[1], p[2]), 114),
        [x5, _t(34, (2, 3, 1, 1)), _t(35, (2,))])
    pair = O.DepthwiseKernelPair(spatial=_t(36, (2, 1, 3, 3)), depth=_t(37, (2, 3, 1, 1)),
                                 bias_spatial=_t(38, (2,)), bias_depth=_t(39, (2,)))
    run("dwconv_cascade", lambda p: _wsum(O.dwconv_cascade(p[0], pair), 115),
        [x5] + pair.tensors())
    run("conv3d_pointwise",
        lambda p: _wsum(O.conv3d_pointwise(p[0], p[1], p[2]), 116),
        [x5, _t(40, (2, 3)), _t(41, (3,))])
    sw = S.SpectralWeights(_t(42, (2,)), _t(43, (2,)), _t(44, (2,)), _t(45, (2,)))
    run("spectral_filter", lambda p: _wsum(S.spectral_filter(p[0], sw), 117),
        [x5] + sw.tensors())

    run("patch_embed2d",
        lambda p: _wsum(O.patch_embed2d(p[0], 2, p[1], p[2]), 118),
        [_t(46, (1, 1, 4, 4)), _t(47, (4, 3)), _t(48, (3,))])
    blk = O.AttentionBlockParams(
        ln1_g=Tensor(np.ones(8), trainable=True), ln1_b=Tensor(np.zeros(8), trainable=True),
        w_qkv=_t(49, (8, 24), 0.4), b_qkv=_t(50, (24,), 0.2),
        w_proj=_t(51, (8, 8), 0.4), b_proj=_t(52, (8,), 0.2),
        ln2_g=Tensor(np.ones(8), trainable=True), ln2_b=Tensor(np.zeros(8), trainable=True),
        w_fc1=_t(53, (8, 16), 0.4), b_fc1=_t(54, (16,), 0.2),
        w_fc2=_t(55, (16, 8), 0.4), b_fc2=_t(56, (8,), 0.2), heads=2)
    run("attention_block", lambda p: _wsum(O.attention_block(p[0], blk), 119),
        [_t(57, (1, 3, 8))] + blk.tensors())
    run("patch_merge", lambda p: _wsum(O.patch_merge(p[0], (2, 2), p[1], p[2]), 120),
        [_t(58, (1, 4, 3)), _t(59, (12, 6)), _t(60, (6,))])

    run("vanilla_adapter", lambda p: _wsum(vanilla_adapter(p[0], p[1], p[2]), 121),
        [_t(61, (3, 4)), _t(62, (4, 2)), _t(63, (2, 4))])

    cfg = AdapterConfig(c=8, alpha=2, inter_mode="add", is_stage_last=True, c_prev=8)
    ap = build_adapter_params(cfg, Rng(64))
    ap.w_up.data = Rng(65).normal(ap.w_up.shape, 0.0, 0.2)  # off identity for the check
    geo = (1, 2, 2, 2)
    toks = _t(66, (2, 4, 8))
    run("project_down", lambda p: _wsum(project_down(p[0], geo, ap), 122),
        [toks, ap.w_down, ap.b_down])
    xp = _t(67, (1, 4, 2, 2, 2))
    run("intra_fe", lambda p: _wsum(intra_fe(p[0], ap, cfg), 123),
        [xp] + [t for t in ap.tensors() if "up" not in t.name and "align" not in t.name])
    prev = _t(68, (1, 4, 2, 4, 4), trainable=False)
    state = StageState(h_last=prev, channels=4, grid=(4, 4))
    for mode in ("add", "max", "concat"):
        mcfg = AdapterConfig(c=8, alpha=2, inter_mode=mode, is_stage_last=True, c_prev=8)
        mp = build_adapter_params(mcfg, Rng(70))
        point = [xp, mp.w_align, mp.b_align]
        if mode == "concat":
            point += [mp.w_fuse, mp.b_fuse]
        run(f"inter_fi_{mode}",
            lambda p, mp=mp, mcfg=mcfg: _wsum(inter_fi(p[0], state, mp, mcfg), 124),
            point)
    run("med_adapter_forward",
        lambda p: _wsum(med_adapter_forward(p[0], geo, ap, cfg, state)[0], 125),
        [toks] + ap.tensors())

    logits5 = _t(69, (1, 3, 2, 3, 3))
    labels5 = Rng(71).integers(18, 0, 3).reshape(1, 2, 3, 3)
    run("cross_entropy", lambda p: cross_entropy_loss(p[0], labels5), [logits5])
    run("soft_dice", lambda p: soft_dice_loss(p[0], labels5), [logits5])
    run("composite_loss", lambda p: composite_loss(p[0], labels5), [logits5])

    checks.append(("segment_forward_e2e", *_e2e_check(max_coords or 4)))
    return checks


def _e2e_check(max_coords: int) -> tuple[float, float]:
    """End-to-end gradient check on a 1x1x4x8x8 volume through a PETL model."""
    bc = BackboneConfig(layout="flat", stage_dims=(8, 8), stage_depths=(1, 1),
                        patch=4, heads=2, image_size=8)
    ac = AdapterConfig(c=8, alpha=2, inter_mode="add")
    graph = build_model(bc, ac, "med_tuning", Rng(123), num_classes=3)
    # nudge every adapter off its identity init so gradients are non-trivial
    nudge = Rng(123).derive("nudge")
    for tensor in graph.parameters(trainable_only=True):
        tensor.data = tensor.data + nudge.derive(tensor.name).normal(
            tensor.shape, 0.0, 0.15)
    vol = Tensor(Rng(7).uniform((1, 1, 4, 8, 8)), trainable=True)
    labels = Rng(8).integers(4 * 8 * 8, 0, 3).reshape(1, 4, 8, 8)

    def build(point):
        return composite_loss(segment_forward(graph, point[0]), labels)

    point = [vol] + graph.parameters(trainable_only=True)
    err = grad_check(build, point, EPS, max_coords=max_coords)
    return err, GRAD_TOL


# --------------------------------------------------------------------------
# Oracle self-test suites
# --------------------------------------------------------------------------

def _triple_sum_dft(field: np.ndarray) -> np.ndarray:
    """Literal triple-sum 3D DFT (the O(N^2) oracle)."""
    d, h, w = field.shape
    out = np.zeros((d, h, w), dtype=np.complex128)
    for x in range(d):
        for y in range(h):
            for z in range(w):
                acc = 0.0 + 0.0j
                for dd in range(d):
                    for hh in range(h):
                        for ww in range(w):
                            ang = -2j * np.pi * (x * dd / d + y * hh / h + z * ww / w)
                            acc += field[dd, hh, ww] * np.exp(ang)
                out[x, y, z] = acc
    return out


def fft_suite() -> list[tuple[str, float, float]]:
    checks = []
    for n in (2, 3, 4, 5, 8, 16):
        z = Rng(n).normal((n,)).astype(np.float64) + 1j * Rng(n + 50).normal((n,))
        err = float(np.max(np.abs(S.fft1d(z).z - S.dft1d_reference(z).z)))
        checks.append((f"fft1d_vs_reference_n{n}", err, 1e-4))
    for dims in ((4, 4, 4), (3, 4, 5), (2, 2, 2)):
        field = Rng(sum(dims)).normal(dims).astype(np.float64)
        err = float(np.max(np.abs(S.fft3d(field).z - _triple_sum_dft(field))))
        checks.append((f"fft3d_vs_triple_sum_{'x'.join(map(str, dims))}", err, 1e-4))
    worst_rt, worst_par = 0.0, 0.0
    rng = Rng(99)
    for trial in range(20):
        dims = tuple(int(d) for d in rng.integers(3, 2, 17))
        field = rng.normal(dims).astype(np.float64)
        spec = S.fft3d(field)
        back = S.ifft3d(spec.z).z
        worst_rt = max(worst_rt, float(np.max(np.abs(back.real - field))))
        p_space = float((field * field).sum())
        p_freq = float((np.abs(spec.z) ** 2).sum() / field.size)
        worst_par = max(worst_par, abs(p_space - p_freq) / p_space)
    checks.append(("ifft3d_round_trip", worst_rt, 1e-4))
    checks.append(("parseval_relative", worst_par, 1e-3))
    return checks


def _loop_dwconv(x: np.ndarray, kern: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Direct six-loop depthwise convolution oracle (float64 accumulation)."""
    x = x.astype(np.float64)
    kern = kern.astype(np.float64)
    bsz, c, d, h, w = x.shape
    _, kd, kh, kw = kern.shape
    pd, ph, pw = (kd - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    out = np.zeros_like(x)
    for bb in range(bsz):
        for cc in range(c):
            for zz in range(d):
                for yy in range(h):
                    for xx in range(w):
                        acc = float(bias[cc])
                        for u in range(kd):
                            for v in range(kh):
                                for t in range(kw):
                                    acc += kern[cc, u, v, t] * xp[bb, cc, zz + u, yy + v, xx + t]
                        out[bb, cc, zz, yy, xx] = acc
    return out


def conv_suite() -> list[tuple[str, float, float]]:
    checks = []
    rng = Rng(5)
    x = Tensor(rng.normal((1, 2, 4, 5, 5)))
    k_sp = rng.normal((2, 1, 3, 3))
    k_dp = rng.normal((2, 3, 1, 1))
    bias = rng.normal((2,))
    got = O.dwconv3d_single(x, Tensor(k_sp), Tensor(bias)).data
    want = _loop_dwconv(x.data, k_sp.reshape(2, 1, 3, 3), bias)
    checks.append(("dwconv_spatial_vs_loop", float(np.abs(got - want).max()), 1e-5))
    got = O.dwconv3d_single(x, Tensor(k_dp), Tensor(bias)).data
    want = _loop_dwconv(x.data, k_dp.reshape(2, 3, 1, 1), bias)
    checks.append(("dwconv_depth_vs_loop", float(np.abs(got - want).max()), 1e-5))
    for k in (3, 5):
        worst = 0.0
        for trial in range(20):
            r = Rng(600 + 10 * k + trial)
            # kernel std 0.2 keeps the K^3-tap sums O(1), so float32
            # accumulation error stays well inside the 1e-5 bound
            ks = r.normal((2, 1, k, k), 0.0, 0.2)
            kd = r.normal((2, k, 1, 1), 0.0, 0.2)
            xt = Tensor(r.normal((1, 2, 6, 6, 6)))
            pair = O.DepthwiseKernelPair(
                spatial=Tensor(ks), depth=Tensor(kd),
                bias_spatial=Tensor(np.zeros(2)), bias_depth=Tensor(np.zeros(2)))
            got = O.dwconv_cascade(xt, pair).data
            full = kd.reshape(2, k, 1, 1) * ks.reshape(2, 1, k, k)  # [C,K,K,K]
            want = _loop_dwconv(xt.data, full, np.zeros(2, np.float32))
            worst = max(worst, float(np.abs(got - want).max()))
        checks.append((f"cascade_vs_full_k{k}", worst, 1e-5))
    return checks


def _brute_hd95(a: np.ndarray, b: np.ndarray) -> float:
    """All-pairs nearest-surface oracle with the same boundary definition."""
    from .training import boundary_voxels, percentile_linear
    pa = boundary_voxels(a)
    pb = boundary_voxels(b)
    da = np.empty(len(pa))
    for i, p in enumerate(pa):
        best = np.inf
        for q in pb:
            d2 = (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2
            best = min(best, d2)
        da[i] = np.sqrt(best)
    db = np.empty(len(pb))
    for i, q in enumerate(pb):
        best = np.inf
        for p in pa:
            d2 = (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2
            best = min(best, d2)
        db[i] = np.sqrt(best)
    return percentile_linear(np.concatenate([da, db]), 95.0)


def metric_suite() -> list[tuple[str, float, float]]:
    checks = []
    m = np.zeros((4, 5, 5), dtype=np.int64)
    m[1:3, 1:4, 1:4] = 1
    checks.append(("dice_identical", abs(dice_score(m, m, 1) - 1.0), 1e-12))
    m2 = np.zeros_like(m)
    m2[3, 4, 4] = 1
    checks.append(("dice_disjoint", abs(dice_score(m, m2, 1) - 0.0), 1e-12))
    checks.append(("hd95_identical", abs(hausdorff95(m == 1, m == 1)), 1e-12))
    a = np.zeros((2, 4, 5), dtype=bool)
    b = np.zeros_like(a)
    a[0, 0, 0] = True
    b[0, 3, 4] = True
    checks.append(("hd95_3_4_5_triangle", abs(hausdorff95(a, b) - 5.0), 1e-12))
    worst = 0.0
    rng = Rng(77)
    for trial in range(10):
        am = rng.uniform((5, 6, 6)) > 0.7
        bm = rng.uniform((5, 6, 6)) > 0.7
        if not am.any() or not bm.any():
            continue
        got = hausdorff95(am, bm)
        want = _brute_hd95(am, bm)
        worst = max(worst, abs(got - want))
    checks.append(("hd95_vs_brute_force", worst, 1e-12))
    return checks


def selftest() -> list[tuple[str, float, float]]:
    return fft_suite() + conv_suite() + metric_suite()
