import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qsharddp.core import NonFiniteError, SeededRng, as_flat, fill_gaussian, fill_spiky


def test_gaussian_empty_and_constant():
    assert fill_gaussian(SeededRng(1), 0).size == 0
    np.testing.assert_array_equal(fill_gaussian(SeededRng(1), 4, 0.0, 0.0), np.zeros(4, np.float32))
    np.testing.assert_array_equal(fill_gaussian(SeededRng(1), 3, 2.5, 0.0), np.full(3, 2.5, np.float32))


def test_gaussian_moments():
    x = fill_gaussian(SeededRng(1), 100_000).astype(np.float64)
    assert x.dtype == np.float64 and abs(x.mean()) < 0.02 and abs(x.std() - 1) < 0.02


def test_box_muller_matches_uniform_stream():
    rng = SeededRng(5, (3,))
    u = rng.clone().uniform(6).reshape(3, 2)
    r = np.sqrt(-2 * np.log(1 - u[:, 0]))
    t = 2 * np.pi * u[:, 1]
    expect = np.column_stack([r * np.cos(t), r * np.sin(t)]).ravel()[:5]
    np.testing.assert_allclose(rng.standard_normal(5), expect, rtol=1e-12)


def test_negative_args_rejected():
    with pytest.raises(ValueError):
        fill_gaussian(SeededRng(0), -1)
    with pytest.raises(ValueError):
        fill_gaussian(SeededRng(0), 3, 0.0, -1.0)
    with pytest.raises(ValueError):
        fill_spiky(SeededRng(0), 3, 1.5, 2.0)
    with pytest.raises(ValueError):
        fill_spiky(SeededRng(0), 3, 0.1, 0.5)


def test_spiky_without_spikes_is_gaussian():
    a = fill_spiky(SeededRng(3), 1000, 0.0, 50.0)
    b = fill_gaussian(SeededRng(3), 1000)
    np.testing.assert_array_equal(a, b)


def test_spiky_degenerate_spike_is_gaussian():
    np.testing.assert_array_equal(fill_spiky(SeededRng(4), 777, 1.0, 1.0), fill_gaussian(SeededRng(4), 777))


def test_spike_fraction():
    x = fill_spiky(SeededRng(11), 100_000, 0.01, 50.0)
    frac = np.mean(np.abs(x) > 10)
    assert 0.005 <= frac <= 0.015


@given(st.integers(0, 2**63), st.lists(st.integers(0, 1000), max_size=3), st.integers(0, 50))
def test_determinism(seed, path, n):
    a = SeededRng(seed, tuple(path))
    b = SeededRng(seed, tuple(path))
    np.testing.assert_array_equal(fill_gaussian(a, n), fill_gaussian(b, n))
    np.testing.assert_array_equal(a.uniform(n), b.uniform(n))


def test_spawn_ignores_parent_position():
    parent = SeededRng(9)
    before = parent.spawn(2, 1).uniform(8)
    parent.uniform(1000)
    np.testing.assert_array_equal(parent.spawn(2, 1).uniform(8), before)
    assert not np.array_equal(parent.spawn(2, 2).uniform(8), before)


def test_clone_copies_position():
    rng = SeededRng(2)
    rng.uniform(13)
    twin = rng.clone()
    np.testing.assert_array_equal(rng.uniform(5), twin.uniform(5))


def test_as_flat_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        as_flat([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        as_flat(np.array([np.inf], np.float32))
    out = as_flat([[1, 2], [3, 4]])
    assert out.dtype == np.float32 and out.shape == (4,)
