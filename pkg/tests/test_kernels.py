import numpy as np
import pytest

from advkws import _kernels


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("T", [1, 3, 8])
def test_numba_matches_numpy(dtype, T):
    rng = np.random.default_rng(T)
    s = rng.normal(size=(3, 11, 5)).astype(dtype)
    b = rng.normal(size=(5, T)).astype(dtype)
    g = rng.normal(size=s.shape).astype(dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(_kernels.time_filter_nb(s, b), _kernels.time_filter_np(s, b),
                               atol=tol)
    ds_nb, db_nb = _kernels.time_filter_grad_nb(g, s, b)
    ds_np, db_np = _kernels.time_filter_grad_np(g, s, b)
    np.testing.assert_allclose(ds_nb, ds_np, atol=tol)
    np.testing.assert_allclose(db_nb, db_np, atol=tol * 10)


def test_time_filter_grad_is_adjoint():
    rng = np.random.default_rng(0)
    s, g = rng.normal(size=(2, 9, 4)), rng.normal(size=(2, 9, 4))
    b = rng.normal(size=(4, 3))
    ds, db = _kernels.time_filter_grad(g, s, b)
    # <g, F(s, b)> is bilinear, so its gradients are ds and db
    lhs = np.sum(g * _kernels.time_filter(s, b))
    assert np.isclose(lhs, np.sum(ds * s))
    assert np.isclose(lhs, np.sum(db * b))


def test_memory_longer_than_sequence():
    s = np.ones((1, 2, 1))
    b = np.ones((1, 5))
    np.testing.assert_array_equal(_kernels.time_filter(s, b)[0, :, 0], [1.0, 2.0])


@pytest.mark.parametrize("impl", ["np", "nb"])
def test_masked_argmax_earliest_tie(impl):
    if impl == "nb" and not _kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    f = _kernels.masked_argmax_np if impl == "np" else _kernels.masked_argmax_nb
    x = np.array([[1.0, 3.0, 3.0, 0.0], [5.0, 1.0, 5.0, 5.0]])
    np.testing.assert_array_equal(f(x, np.array([0, 1]), np.array([4, 4])), [1, 2])


def test_masked_argmax_rejects_empty_window():
    with pytest.raises(ValueError):
        _kernels.masked_argmax(np.zeros((1, 3)), [2], [2])
