import numpy as np
import pytest

from medtuning.rng import Rng


def test_same_seed_same_stream():
    a = Rng(7).normal((8,))
    b = Rng(7).normal((8,))
    assert np.array_equal(a, b)


def test_different_seeds_differ():
    assert not np.array_equal(Rng(1).uniform((16,)), Rng(2).uniform((16,)))


def test_uniform_range_and_dtype():
    u = Rng(3).uniform((1000,), -2.0, 5.0)
    assert u.dtype == np.float32
    assert u.min() >= -2.0 and u.max() < 5.0


def test_normal_moments():
    z = Rng(11).normal((20000,), 1.0, 2.0)
    assert abs(float(z.mean()) - 1.0) < 0.05
    assert abs(float(z.std()) - 2.0) < 0.05


def test_truncated_normal_bound():
    z = Rng(5).truncated_normal((5000,), 0.02)
    assert float(np.abs(z).max()) <= 0.04 + 1e-9


def test_counter_independent_of_call_granularity():
    r1 = Rng(9)
    a = np.concatenate([r1.uniform((3,)), r1.uniform((5,))])
    b = Rng(9).uniform((8,))
    assert np.array_equal(a, b)


def test_derive_is_stable_and_independent():
    base = Rng(42)
    child1 = base.derive("weights", 3)
    child2 = base.derive("weights", 3)
    other = base.derive("weights", 4)
    assert np.array_equal(child1.normal((4,)), child2.normal((4,)))
    assert not np.array_equal(child1.normal((4,)), other.normal((4,)))
    # deriving must not advance the parent stream
    assert np.array_equal(Rng(42).uniform((4,)), base.uniform((4,)))


def test_integers_range():
    v = Rng(1).integers(500, 2, 9)
    assert v.min() >= 2 and v.max() < 9


def test_integers_empty_range_rejected():
    with pytest.raises(ValueError):
        Rng(1).integers(3, 5, 5)


def test_shuffled_is_permutation():
    perm = Rng(13).shuffled(40)
    assert sorted(perm.tolist()) == list(range(40))
    assert np.array_equal(perm, Rng(13).shuffled(40))
