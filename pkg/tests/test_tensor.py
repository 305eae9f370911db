import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from petnet.errors import NumericError, ShapeError
from petnet.tensor import concat_channels, create, flatten, map_elementwise, matmul

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_create_row_major():
    x = create([2, 2], [1, 2, 3, 4])
    assert x.tolist() == [[1, 2], [3, 4]]
    assert x.dtype == np.float64


def test_create_minimal():
    assert create([1], [0]).tolist() == [0.0]


def test_create_count_mismatch():
    with pytest.raises(ShapeError, match="6.*4"):
        create([2, 3], [1, 2, 3, 4])


def test_create_rejects_non_finite():
    with pytest.raises(NumericError):
        create([2], [1.0, float("nan")])


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, max_side=4), elements=finite))
def test_create_round_trip_bit_exact(arr):
    x = create(arr.shape, arr.reshape(-1).tolist())
    assert np.array_equal(x.reshape(-1), arr.reshape(-1))


def test_flatten():
    assert flatten(create([2, 2], [1, 2, 3, 4])).tolist() == [1, 2, 3, 4]
    assert flatten(np.zeros((4, 4, 10))).shape == (160,)
    v = np.arange(5.0)
    assert np.array_equal(flatten(v), v)
    assert flatten(np.zeros((3, 10, 4, 4)), batched=True).shape == (3, 160)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5), elements=finite))
def test_flatten_preserves_sum_min_max(arr):
    f = flatten(arr)
    assert f.sum() == arr.reshape(-1).sum()
    assert f.min() == arr.min() and f.max() == arr.max()


def test_concat_channels():
    a, b = np.zeros((2, 8, 16, 16)), np.ones((2, 4, 16, 16))
    c = concat_channels(a, b)
    assert c.shape == (2, 12, 16, 16)
    assert np.array_equal(c[:, :8], a) and np.array_equal(c[:, 8:], b)
    assert np.array_equal(concat_channels(a, np.zeros((2, 0, 16, 16))), a)
    with pytest.raises(ShapeError, match="H"):
        concat_channels(a, np.ones((2, 4, 15, 16)))


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(0, 100))
def test_concat_slice_recovers_first(n, ca, cb, hw, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, ca, hw, hw)), rng.normal(size=(n, cb, hw, hw))
    assert np.array_equal(concat_channels(a, b)[:, :ca], a)


def test_matmul():
    a = create([2, 2], [1, 2, 3, 4])
    assert np.array_equal(matmul(a, np.eye(2)), a)
    assert matmul(np.ones((1, 3)), create([3, 1], [2, 3, 4])).tolist() == [[9.0]]
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                expected[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(matmul(a, b) - expected)) < 1e-12


@given(hnp.arrays(np.float64, (3, 4), elements=st.integers(-1000, 1000).map(float)))
def test_matmul_identity_integer_bit_exact(x):
    assert np.array_equal(matmul(x, np.eye(4)), x)


def test_map_elementwise():
    assert map_elementwise(np.array([1.0, -1.0]), lambda v: -v).tolist() == [-1, 1]
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(map_elementwise(x, lambda v: v), x)
    assert map_elementwise(np.array([0.0, 4.0, 9.0]), np.sqrt).tolist() == [0, 2, 3]
    assert map_elementwise(np.array([4.0]), lambda v: v ** 0.5).tolist() == [2.0]


def test_map_elementwise_non_finite_index():
    with pytest.raises(NumericError, match=r"\(1,\)"), np.errstate(divide="ignore"):
        map_elementwise(np.array([1.0, 0.0]), lambda v: np.log(v))
