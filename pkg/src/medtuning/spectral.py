"""Discrete Fourier transforms and the learnable spectral filter branch.

Conventions: the forward transform is unnormalized and the inverse carries
the 1/N (1D) or 1/(D*H*W) (3D) factor. The 3D transform is the composition
of 1D transforms along the trailing W, H, D axes; each 1D transform runs
an iterative radix-2 butterfly when the length is a power of two and falls
back to the direct O(N^2) reference sum otherwise.

The spectral filter multiplies each bottleneck channel's 3D spectrum by
one learnable complex scalar (plus an optional complex scalar bias added
to every frequency bin) and returns the real part of the inverse
transform. Since a complex per-channel weight breaks Hermitian symmetry,
taking the real part keeps the output in the real-valued feature path;
the whole operation stays linear in its inputs and exactly differentiable.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, forward_primitive, register_primitive

_CPLX = np.complex128


class ComplexField:
    """Dense complex field stored as paired real/imaginary float arrays."""

    __slots__ = ("z",)

    def __init__(self, re, im=None):
        re = np.asarray(re)
        if np.iscomplexobj(re):
            self.z = np.ascontiguousarray(re.astype(_CPLX))
        else:
            im = np.zeros_like(re, dtype=np.float64) if im is None else np.asarray(im)
            if re.shape != im.shape:
                raise ShapeError(f"re/im shapes {re.shape} and {im.shape} differ")
            self.z = np.ascontiguousarray(re.astype(np.float64) + 1j * im.astype(np.float64))
        if self.z.size == 0:
            raise ShapeError("empty complex field")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.z.shape

    @property
    def re(self) -> np.ndarray:
        return self.z.real.copy()

    @property
    def im(self) -> np.ndarray:
        return self.z.imag.copy()


def _as_complex(x) -> np.ndarray:
    if isinstance(x, ComplexField):
        return x.z
    if isinstance(x, Tensor):
        return x.data.astype(_CPLX)
    return np.asarray(x, dtype=_CPLX)


def _dft_matrix(n: int, sign: float) -> np.ndarray:
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n)


def dft1d_reference(x) -> ComplexField:
    """Direct O(N^2) forward transform: out[k] = sum_n x[n] e^{-j2pi kn/N}."""
    z = _as_complex(x)
    if z.ndim != 1:
        raise ShapeError(f"dft1d_reference expects a 1D field, got {z.shape}")
    return ComplexField(_dft_matrix(z.size, -1.0) @ z)


def idft1d_reference(f) -> ComplexField:
    """Direct inverse: out[n] = (1/N) sum_k f[k] e^{+j2pi kn/N}."""
    z = _as_complex(f)
    if z.ndim != 1:
        raise ShapeError(f"idft1d_reference expects a 1D field, got {z.shape}")
    return ComplexField((_dft_matrix(z.size, +1.0) @ z) / z.size)


def _fft_last_axis(z: np.ndarray, sign: float) -> np.ndarray:
    """Transform along the last axis: radix-2 when possible, direct otherwise."""
    n = z.shape[-1]
    if n == 1:
        return z.copy()
    if n & (n - 1):  # not a power of two: direct matrix product
        return z @ _dft_matrix(n, sign).T
    # iterative radix-2 Cooley-Tukey, decimation in time
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.int64)
    for i in range(1, n):
        rev[i] = (rev[i >> 1] >> 1) | ((i & 1) << (bits - 1))
    out = np.ascontiguousarray(z[..., rev])
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / m)
        blocks = out.reshape(*out.shape[:-1], n // m, m)
        u = blocks[..., :half].copy()
        t = blocks[..., half:] * tw
        blocks[..., :half] = u + t
        blocks[..., half:] = u - t
        m <<= 1
    return out


def fft1d(x) -> ComplexField:
    """Fast 1D forward transform; equals dft1d_reference for all lengths."""
    z = _as_complex(x)
    if z.ndim != 1:
        raise ShapeError(f"fft1d expects a 1D field, got {z.shape}")
    return ComplexField(_fft_last_axis(z, -1.0))


def ifft1d(f) -> ComplexField:
    z = _as_complex(f)
    if z.ndim != 1:
        raise ShapeError(f"ifft1d expects a 1D field, got {z.shape}")
    return ComplexField(_fft_last_axis(z, +1.0) / z.size)


def _fft3_nd(z: np.ndarray, sign: float) -> np.ndarray:
    """Forward (sign=-1) transform of the trailing 3 axes, unnormalized."""
    for axis in (-1, -2, -3):
        moved = np.moveaxis(z, axis, -1)
        moved = _fft_last_axis(np.ascontiguousarray(moved), sign)
        z = np.moveaxis(moved, -1, axis)
    return np.ascontiguousarray(z)


def fft3d(x) -> ComplexField:
    """3D forward transform over a [D, H, W] field (1D passes along W, H, D)."""
    z = _as_complex(x)
    if z.ndim != 3:
        raise ShapeError(f"fft3d expects a [D,H,W] field, got {z.shape}")
    return ComplexField(_fft3_nd(z, -1.0))


def ifft3d(f) -> ComplexField:
    """3D inverse with the 1/(D*H*W) factor; inverse of fft3d."""
    z = _as_complex(f)
    if z.ndim != 3:
        raise ShapeError(f"ifft3d expects a [D,H,W] field, got {z.shape}")
    return ComplexField(_fft3_nd(z, +1.0) / z.size)


class SpectralWeights:
    """Per-bottleneck-channel complex filter weight and optional bias.

    The trainable storage is four real tensors (w_re, w_im, b_re, b_im),
    each of shape [C']. With ``bias_enabled`` false the bias tensors are not
    allocated, contribute zero to parameter counts, and the filter adds no
    bias. ``w``/``b`` expose the values as complex fields for inspection.
    """

    def __init__(self, w_re: Tensor, w_im: Tensor, b_re: Tensor | None = None,
                 b_im: Tensor | None = None):
        if w_re.shape != w_im.shape or len(w_re.shape) != 1:
            raise ShapeError(f"spectral weight shapes {w_re.shape}/{w_im.shape} invalid")
        if (b_re is None) != (b_im is None):
            raise ShapeError("spectral bias must provide both re and im or neither")
        if b_re is not None and (b_re.shape != w_re.shape or b_im.shape != w_re.shape):
            raise ShapeError("spectral bias shape does not match weight shape")
        self.w_re = w_re
        self.w_im = w_im
        self.b_re = b_re
        self.b_im = b_im

    @property
    def bias_enabled(self) -> bool:
        return self.b_re is not None

    @property
    def channels(self) -> int:
        return self.w_re.shape[0]

    @property
    def w(self) -> ComplexField:
        return ComplexField(self.w_re.data, self.w_im.data)

    @property
    def b(self) -> ComplexField:
        if self.b_re is None:
            zero = np.zeros(self.w_re.shape, dtype=np.float64)
            return ComplexField(zero, zero)
        return ComplexField(self.b_re.data, self.b_im.data)

    def tensors(self) -> list[Tensor]:
        out = [self.w_re, self.w_im]
        if self.b_re is not None:
            out += [self.b_re, self.b_im]
        return out


def _fw_spectral_filter(arrays, attrs):
    x, w_re, w_im, b_re, b_im = arrays
    if x.ndim != 5:
        raise ShapeError(f"spectral_filter expects [B,C',D,H,W], got {x.shape}")
    c = x.shape[1]
    if w_re.shape != (c,):
        raise ShapeError(f"spectral_filter: {w_re.shape[0]} weight channels for "
                         f"{c} input channels")
    w = (w_re.astype(np.float64) + 1j * w_im.astype(np.float64))[None, :, None, None, None]
    b = (b_re.astype(np.float64) + 1j * b_im.astype(np.float64))[None, :, None, None, None]
    spec = _fft3_nd(x.astype(_CPLX), -1.0)
    filtered = spec * w + b
    m = x.shape[2] * x.shape[3] * x.shape[4]
    out = (_fft3_nd(filtered, +1.0) / m).real.astype(np.float32)
    return out, (spec, w, m)


def _vjp_spectral_filter(g, ctx, needs):
    spec, w, m = ctx
    # adjoint of real(ifft3): (1/m) * forward transform of the cotangent
    g_spec = _fft3_nd(g.astype(_CPLX), -1.0) / m
    gx = gwr = gwi = gbr = gbi = None
    if needs[0]:
        # adjoint of fft3 on a real input: real part of the unnormalized inverse
        gx = _fft3_nd(np.conj(w) * g_spec, +1.0).real.astype(np.float32)
    if needs[1] or needs[2]:
        gw = (np.conj(spec) * g_spec).sum(axis=(0, 2, 3, 4))
        gwr = gw.real.astype(np.float32) if needs[1] else None
        gwi = gw.imag.astype(np.float32) if needs[2] else None
    if needs[3] or needs[4]:
        gb = g_spec.sum(axis=(0, 2, 3, 4))
        gbr = gb.real.astype(np.float32) if needs[3] else None
        gbi = gb.imag.astype(np.float32) if needs[4] else None
    return gx, gwr, gwi, gbr, gbi


register_primitive("spectral_filter", _fw_spectral_filter, _vjp_spectral_filter)

_ZERO_CACHE: dict[int, Tensor] = {}


def _zero_bias(c: int) -> Tensor:
    t = _ZERO_CACHE.get(c)
    if t is None:
        t = Tensor(np.zeros(c, dtype=np.float32), trainable=False, name="spectral.zero")
        _ZERO_CACHE[c] = t
    return t


def spectral_filter(xp: Tensor, weights: SpectralWeights) -> Tensor:
    """Per-channel filtering in the Fourier domain.

    For each (batch, channel) slab: IFFT3(w[c] * FFT3(slab) + b[c]), real
    part. Gradients flow to the input and to the complex weight/bias
    through the linear transforms.
    """
    c = xp.shape[1] if len(xp.shape) == 5 else -1
    if c != weights.channels:
        raise ShapeError(f"spectral_filter: input has {c} channels, "
                         f"weights have {weights.channels}")
    if weights.bias_enabled:
        b_re, b_im = weights.b_re, weights.b_im
    else:
        b_re = b_im = _zero_bias(weights.channels)
    return forward_primitive(
        "spectral_filter", [xp, weights.w_re, weights.w_im, b_re, b_im])
