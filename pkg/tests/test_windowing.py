import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uformer.tensor import DimensionError, Tensor
from uformer.windowing import (
    MASK_VALUE,
    cyclic_shift,
    rel_pos_index,
    shift_mask,
    window_partition,
    window_reverse,
)


def test_single_window_is_flattened_map(rng):
    x = rng.standard_normal((3, 8, 8))
    w, grid = window_partition(Tensor(x, dtype=np.float64), 8)
    assert grid.N == 1 and w.shape == (1, 64, 3)
    np.testing.assert_array_equal(w.data[0], x.reshape(3, 64).T)
    np.testing.assert_array_equal(window_reverse(w, grid).data, x)


def test_window_count():
    _, grid = window_partition(Tensor(np.zeros((2, 32, 32))), 8)
    assert grid.N == 16


def test_window_contents_row_major(rng):
    x = rng.standard_normal((1, 4, 6))
    w, _ = window_partition(Tensor(x, dtype=np.float64), 2)
    # third window is rows 0-1, cols 4-5
    np.testing.assert_array_equal(w.data[2, :, 0], x[0, 0:2, 4:6].reshape(-1))
    # fourth window starts the second row of windows
    np.testing.assert_array_equal(w.data[3, :, 0], x[0, 2:4, 0:2].reshape(-1))


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 4), h=st.integers(1, 5), w=st.integers(1, 5), M=st.integers(1, 4), seed=st.integers(0, 999))
def test_partition_reverse_round_trip(c, h, w, M, seed):
    x = np.random.default_rng(seed).standard_normal((c, h * M, w * M))
    win, grid = window_partition(Tensor(x, dtype=np.float64), M)
    assert win.shape == (h * w, M * M, c)
    np.testing.assert_array_equal(window_reverse(win, grid).data, x)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 13), w=st.integers(1, 13), M=st.integers(1, 8))
def test_padded_round_trip_is_left_inverse(h, w, M):
    x = np.random.default_rng(h * 100 + w).standard_normal((2, h, w))
    win, grid = window_partition(Tensor(x, dtype=np.float64), M)
    assert (h + grid.pad_h) % M == 0 and (w + grid.pad_w) % M == 0
    np.testing.assert_array_equal(window_reverse(win, grid).data, x)


def test_padded_ten_by_ten(rng):
    x = rng.standard_normal((3, 10, 10))
    win, grid = window_partition(Tensor(x, dtype=np.float64), 8)
    assert (grid.pad_h, grid.pad_w, grid.N) == (6, 6, 4)
    out = window_reverse(win, grid)
    assert out.shape == (3, 10, 10)
    np.testing.assert_array_equal(out.data, x)


def test_batched_partition(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    win, grid = window_partition(Tensor(x, dtype=np.float64), 4)
    assert win.shape == (8, 16, 3) and grid.batch == 2
    np.testing.assert_array_equal(window_reverse(win, grid).data, x)


def test_reverse_rejects_inconsistent_windows():
    _, grid = window_partition(Tensor(np.zeros((1, 8, 8))), 4)
    with pytest.raises(DimensionError):
        window_reverse(Tensor(np.zeros((3, 16, 1))), grid)


def test_cyclic_shift_identities(rng):
    x = Tensor(rng.standard_normal((2, 6, 6)), dtype=np.float64)
    np.testing.assert_array_equal(cyclic_shift(x, 0).data, x.data)
    np.testing.assert_array_equal(cyclic_shift(x, 6).data, x.data)
    np.testing.assert_array_equal(cyclic_shift(cyclic_shift(x, 2), 2, inverse=True).data, x.data)
    # roll by (-s, -s): output[i, j] = input[i + s, j + s]
    np.testing.assert_array_equal(cyclic_shift(x, 1).data[:, 0, 0], x.data[:, 1, 1])


def test_rel_pos_index_m1():
    assert rel_pos_index(1).tolist() == [[0]]


def test_rel_pos_index_m2_enumerated():
    # tokens (0,0), (0,1), (1,0), (1,1); index = (dr + 1) * 3 + (dc + 1)
    coords = [(0, 0), (0, 1), (1, 0), (1, 1)]
    expected = [[(ri - rj + 1) * 3 + (ci - cj + 1) for rj, cj in coords] for ri, ci in coords]
    assert rel_pos_index(2).tolist() == expected
    assert expected == [[4, 3, 1, 0], [5, 4, 2, 1], [7, 6, 4, 3], [8, 7, 5, 4]]


@pytest.mark.parametrize("M", [1, 2, 3, 4, 7])
def test_rel_pos_index_antisymmetry_and_coverage(M):
    idx = rel_pos_index(M)
    assert np.all(idx + idx.T == 2 * (M - 1) * (2 * M))
    assert set(np.unique(idx)) == set(range((2 * M - 1) ** 2))
    zero = (M - 1) * (2 * M - 1) + (M - 1)
    assert np.count_nonzero(idx == zero) == M * M
    assert not idx.flags.writeable


def test_shift_mask_zero_shift_is_zero():
    assert np.all(shift_mask(8, 8, 4, 0) == 0)


def test_shift_mask_structure():
    m = shift_mask(8, 8, 4, 2)
    assert m.shape == (4, 16, 16)
    assert np.array_equal(m, m.transpose(0, 2, 1))
    assert np.all(np.diagonal(m, axis1=1, axis2=2) == 0)
    # top-left window is untouched by the wrap-around
    assert np.all(m[0] == 0)
    assert set(np.unique(m)) == {0.0, MASK_VALUE}


def test_shift_mask_matches_wraparound_oracle():
    Hp = Wp = 8
    M, s = 4, 2
    m = shift_mask(Hp, Wp, M, s)
    # after the roll, rolled position (i, j) holds original pixel ((i + s) % H, (j + s) % W);
    # two tokens may attend iff neither coordinate wrapped differently
    for wi in range(4):
        r0, c0 = (wi // 2) * M, (wi % 2) * M
        for a in range(M * M):
            for b in range(M * M):
                ia, ja = r0 + a // M, c0 + a % M
                ib, jb = r0 + b // M, c0 + b % M
                wrap = lambda i, n: (i + s) >= n
                same = wrap(ia, Hp) == wrap(ib, Hp) and wrap(ja, Wp) == wrap(jb, Wp)
                assert (m[wi, a, b] == 0) == same
