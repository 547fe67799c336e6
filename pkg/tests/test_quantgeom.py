import numpy as np
import pytest

from core.errors import ArgumentError
from core.quantgeom import (SeededStream, adamw_first_step, crc32, gaussian, l2norm,
                            log_bin_edges, log_histogram, permutation)


def test_same_stream_state_gives_same_draws():
    a = gaussian(SeededStream(7, 3), 100)
    b = gaussian(SeededStream(7, 3), 100)
    assert np.array_equal(a, b)


def test_take_advances_counter():
    s = SeededStream(7)
    first = gaussian(s, 10)
    second = gaussian(s, 10)
    assert s.counter == 20
    assert not np.array_equal(first, second)
    assert np.array_equal(first, gaussian(SeededStream(7), 10))


def test_split_is_deterministic_and_distinct():
    root = SeededStream(11)
    assert root.split(3) == root.split(3)
    assert not np.array_equal(gaussian(root.split(3), 50), gaussian(root.split(4), 50))


def test_gaussian_moments():
    x = gaussian(SeededStream(0), 1_000_000)
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1.0) < 0.01


def test_different_seeds_uncorrelated():
    a = gaussian(SeededStream(1), 10_000)
    b = gaussian(SeededStream(2), 10_000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_permutation_is_a_shuffle():
    p = permutation(SeededStream(5), 20)
    assert sorted(p.tolist()) == list(range(20))
    assert np.array_equal(p, permutation(SeededStream(5), 20))


@pytest.mark.parametrize("call", [
    lambda: gaussian(SeededStream(0), 0),
    lambda: permutation(SeededStream(0), 0),
    lambda: log_bin_edges(0, 1e-3, 1.0),
    lambda: log_bin_edges(4, 0.0, 1.0),
    lambda: log_bin_edges(4, 1.0, 1.0),
])
def test_invalid_arguments(call):
    with pytest.raises(ArgumentError):
        call()


def test_l2norm():
    assert l2norm([3.0, 4.0]) == 5.0
    assert l2norm(np.zeros(5)) == 0.0


def test_crc32_check_value():
    assert crc32(b"123456789") == 0xCBF43926
    assert crc32(b"") == 0


def test_log_histogram_clamps_out_of_range():
    counts = log_histogram([2e-3, 3e-2, 0.5, 1e-6, 10.0], 3, 1e-3, 1.0)
    assert counts.tolist() == [2, 1, 2]
    assert counts.sum() == 5


def test_log_bin_edges_are_geometric():
    edges = log_bin_edges(4, 1e-4, 1.0)
    ratios = edges[1:] / edges[:-1]
    assert np.allclose(ratios, 10.0)


def test_adamw_first_step_closed_form():
    assert adamw_first_step(0.0, 1.0, 0.1, (0.9, 0.999), 1e-8, 0.0) == pytest.approx(-0.0999999990, abs=1e-9)
