import numpy as np
import pytest

from medtuning.errors import ShapeError
from medtuning.rng import Rng
from medtuning import spectral as S
from medtuning.tensor import Tensor, grad_check, hadamard, reduce_sum


def triple_sum_dft(field):
    """Independent O(N^2) oracle: literal triple sum."""
    d, h, w = field.shape
    out = np.zeros((d, h, w), dtype=np.complex128)
    for x in range(d):
        for y in range(h):
            for z in range(w):
                acc = 0.0 + 0.0j
                for dd in range(d):
                    for hh in range(h):
                        for ww in range(w):
                            acc += field[dd, hh, ww] * np.exp(
                                -2j * np.pi * (x * dd / d + y * hh / h + z * ww / w))
                out[x, y, z] = acc
    return out


# ------------------------------------------------------------- 1D reference

def test_dft_unit_impulse():
    out = S.dft1d_reference([1, 0, 0, 0])
    np.testing.assert_allclose(out.z, np.ones(4), atol=1e-12)


def test_dft_constant_signal():
    out = S.dft1d_reference([1, 1, 1, 1])
    np.testing.assert_allclose(out.z, [4, 0, 0, 0], atol=1e-12)


def test_dft_shifted_impulse_hand_case():
    # x = [0,1,0,0]: out[k] = e^{-j pi k / 2} = [1, -j, -1, j]
    out = S.dft1d_reference([0, 1, 0, 0])
    np.testing.assert_allclose(out.z, [1, -1j, -1, 1j], atol=1e-12)


def test_idft_inverse_of_constant_spectrum():
    out = S.idft1d_reference([4, 0, 0, 0])
    np.testing.assert_allclose(out.z, np.ones(4), atol=1e-12)


def test_idft_zeros():
    out = S.idft1d_reference(np.zeros(4))
    np.testing.assert_allclose(out.z, np.zeros(4), atol=0)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 7, 12, 16])
def test_1d_round_trip(n):
    x = Rng(n).normal((n,)).astype(np.float64) + 1j * Rng(2 * n + 1).normal((n,))
    back = S.idft1d_reference(S.dft1d_reference(x).z).z
    np.testing.assert_allclose(back, x, atol=1e-10)


@pytest.mark.parametrize("n", [2, 3, 4, 5, 8, 16])
def test_fast_path_equals_reference(n):
    x = Rng(n).normal((n,)).astype(np.float64) + 1j * Rng(n + 99).normal((n,))
    np.testing.assert_allclose(S.fft1d(x).z, S.dft1d_reference(x).z, atol=1e-10)


def test_hermitian_symmetry_of_real_input():
    x = Rng(8).normal((8,)).astype(np.float64)
    f = S.fft1d(x).z
    for k in range(8):
        assert abs(f[(-k) % 8] - np.conj(f[k])) < 1e-10


# ------------------------------------------------------------------- 3D

def test_fft3d_impulse_at_origin():
    field = np.zeros((2, 2, 2))
    field[0, 0, 0] = 1.0
    np.testing.assert_allclose(S.fft3d(field).z, np.ones((2, 2, 2)), atol=1e-12)


def test_ifft3d_all_ones_spectrum():
    spec = np.ones((2, 2, 2))
    out = S.ifft3d(spec).z
    want = np.zeros((2, 2, 2))
    want[0, 0, 0] = 1.0
    np.testing.assert_allclose(out, want, atol=1e-12)


@pytest.mark.parametrize("dims", [(4, 4, 4), (3, 4, 5), (2, 3, 2)])
def test_fft3d_matches_triple_sum_oracle(dims):
    field = Rng(sum(dims)).normal(dims).astype(np.float64)
    got = S.fft3d(field).z
    want = triple_sum_dft(field)
    assert np.max(np.abs(got - want)) < 1e-4


def test_fft3d_matches_numpy():
    field = Rng(4).normal((4, 6, 8)).astype(np.float64)
    np.testing.assert_allclose(S.fft3d(field).z, np.fft.fftn(field), atol=1e-8)


def test_round_trip_8cubed():
    field = Rng(21).normal((8, 8, 8)).astype(np.float64)
    back = S.ifft3d(S.fft3d(field).z).z
    assert np.max(np.abs(back.real - field)) < 1e-4


def test_parseval():
    field = Rng(22).normal((6, 8, 5)).astype(np.float64)
    spec = S.fft3d(field).z
    space = float((field ** 2).sum())
    freq = float((np.abs(spec) ** 2).sum()) / field.size
    assert abs(space - freq) / space < 1e-3


def test_fft3d_linearity():
    a = Rng(31).normal((4, 4, 4)).astype(np.float64)
    b = Rng(32).normal((4, 4, 4)).astype(np.float64)
    lhs = S.fft3d(2.5 * a + b).z
    rhs = 2.5 * S.fft3d(a).z + S.fft3d(b).z
    assert np.max(np.abs(lhs - rhs)) < 1e-4


def test_fft3d_rejects_wrong_rank():
    with pytest.raises(ShapeError):
        S.fft3d(np.zeros((2, 2)))


# ------------------------------------------------------- spectral filter

def weights(c, seed=None, bias=True, identity=False):
    if identity:
        return S.SpectralWeights(Tensor(np.ones(c), trainable=True),
                                 Tensor(np.zeros(c), trainable=True))
    r = Rng(seed)
    args = [Tensor(r.normal((c,)), trainable=True) for _ in range(4 if bias else 2)]
    return S.SpectralWeights(*args)


def test_filter_identity_weights():
    x = Tensor(Rng(1).normal((1, 2, 4, 4, 4)))
    out = S.spectral_filter(x, weights(2, identity=True))
    assert np.max(np.abs(out.data - x.data)) < 1e-4


def test_filter_zero_weights():
    x = Tensor(Rng(2).normal((1, 2, 4, 4, 4)))
    zero = S.SpectralWeights(Tensor(np.zeros(2)), Tensor(np.zeros(2)))
    out = S.spectral_filter(x, zero)
    assert np.max(np.abs(out.data)) == 0.0


def test_filter_matches_reference_transform_composition():
    # independent oracle: per-slab reference DFTs along each axis with
    # explicit complex arithmetic
    x = Rng(3).normal((1, 2, 4, 4, 4))
    w = weights(2, seed=5)
    got = S.spectral_filter(Tensor(x), w).data

    wz = w.w.z
    bz = w.b.z
    for b in range(1):
        for c in range(2):
            slab = x[b, c].astype(np.complex128)
            spec = np.zeros_like(slab)
            # forward: 1D reference DFT along w, then h, then d
            tmp = slab
            for axis in (2, 1, 0):
                moved = np.moveaxis(tmp, axis, 0)
                res = np.empty_like(moved)
                for i in range(moved.shape[1]):
                    for j in range(moved.shape[2]):
                        res[:, i, j] = S.dft1d_reference(moved[:, i, j]).z
                tmp = np.moveaxis(res, 0, axis)
            spec = tmp * wz[c] + bz[c]
            for axis in (2, 1, 0):
                moved = np.moveaxis(spec, axis, 0)
                res = np.empty_like(moved)
                for i in range(moved.shape[1]):
                    for j in range(moved.shape[2]):
                        res[:, i, j] = S.idft1d_reference(moved[:, i, j]).z
                spec = np.moveaxis(res, 0, axis)
            assert np.max(np.abs(got[b, c] - spec.real)) < 1e-4


def test_filter_channel_mismatch():
    x = Tensor(Rng(1).normal((1, 3, 2, 2, 2)))
    with pytest.raises(ShapeError):
        S.spectral_filter(x, weights(2, seed=9))


def test_filter_grad_check():
    x = Tensor(Rng(10).normal((1, 2, 4, 4, 4)), trainable=True)
    w = weights(2, seed=11)

    def build(point):
        out = S.spectral_filter(point[0], w)
        return reduce_sum(hadamard(out, Tensor(Rng(12).normal(out.shape))))

    err = grad_check(build, [x] + w.tensors(), 1e-3)
    assert err < 1e-2


def test_filter_grad_without_bias():
    x = Tensor(Rng(13).normal((1, 2, 2, 4, 4)), trainable=True)
    w = weights(2, seed=14, bias=False)

    def build(point):
        out = S.spectral_filter(point[0], w)
        return reduce_sum(hadamard(out, Tensor(Rng(15).normal(out.shape))))

    err = grad_check(build, [x, w.w_re, w.w_im], 1e-3)
    assert err < 1e-2


def test_complex_field_invariants():
    with pytest.raises(ShapeError):
        S.ComplexField(np.zeros(3), np.zeros(4))
    f = S.ComplexField(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    assert f.re.tolist() == [1.0, 2.0]
    assert f.im.tolist() == [3.0, 4.0]
