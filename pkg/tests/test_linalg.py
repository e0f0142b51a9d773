import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpshield.errors import DegenerateImage, IndexOutOfRange, NonSymmetric
from kpshield.linalg import (eigh_symmetric, reconstruct, reconstruct_prefix_sweep, row_matrix,
                             row_pca)


def _row_matrix_oracle(img):
    w, h, c = img.shape
    out = np.empty((w, h * c))
    for r in range(w):
        for col in range(h):
            for ch in range(c):
                out[r, col * c + ch] = img[r, col, ch]
    return out


def _mp_eigenvalues(a):
    m = mpmath.mp.matrix(a.tolist())
    with mpmath.workdps(50):
        ev, _ = mpmath.eigsy(m)
    return np.sort(np.array([float(e) for e in ev]))[::-1]


def test_row_matrix_shapes():
    assert row_matrix(np.zeros((224, 224, 3))).shape == (224, 672)
    np.testing.assert_array_equal(row_matrix(np.array([[[0.3]], [[0.7]]])), [[0.3], [0.7]])


def test_row_matrix_channel_fastest():
    img = (np.arange(24) / 23.0).reshape(4, 3, 2)
    np.testing.assert_array_equal(row_matrix(img), _row_matrix_oracle(img))


def test_eigh_trivial():
    res = eigh_symmetric(np.eye(3))
    np.testing.assert_allclose(res.eigenvalues, [1, 1, 1])
    res = eigh_symmetric(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_allclose(res.eigenvalues, [3, 2, 1])
    np.testing.assert_allclose(np.abs(res.eigenvectors), np.eye(3)[:, [0, 2, 1]])


def test_eigh_ascending_order():
    res = eigh_symmetric(np.diag([3.0, 1.0, 2.0]), order="ascending")
    np.testing.assert_allclose(res.eigenvalues, [1, 2, 3])


def test_eigh_matches_high_precision_oracle():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(6, 6))
    a = a + a.T
    expected = _mp_eigenvalues(a)
    res = eigh_symmetric(a)
    np.testing.assert_allclose(res.eigenvalues, expected, rtol=0, atol=1e-8)
    v = res.eigenvectors
    assert np.max(np.abs(v.T @ v - np.eye(6))) <= 1e-8
    resid = np.linalg.norm(a @ v - v * res.eigenvalues, axis=0)
    assert np.all(resid <= 1e-8 * (1 + np.linalg.norm(a, 2)))


def test_eigh_rejects_asymmetric():
    with pytest.raises(NonSymmetric):
        eigh_symmetric(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_eigh_deterministic():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(9, 9))
    a = a + a.T
    r1, r2 = eigh_symmetric(a), eigh_symmetric(a)
    assert r1.eigenvalues.tobytes() == r2.eigenvalues.tobytes()
    assert r1.eigenvectors.tobytes() == r2.eigenvectors.tobytes()


def test_constant_rows():
    img = np.tile(np.linspace(0, 1, 10)[None, :, None], (5, 1, 1))
    basis = row_pca(img)
    # centring leaves only rounding residue behind
    assert np.all(basis.eigenvalues <= 1e-25)
    np.testing.assert_allclose(reconstruct(basis, 0), img, atol=1e-6)
    sweep = reconstruct_prefix_sweep(basis)
    assert all(np.allclose(s, sweep[0], rtol=0, atol=1e-12) for s in sweep)


def test_degenerate_image():
    with pytest.raises(DegenerateImage):
        row_pca(np.zeros((1, 4, 1)))


def test_imagenet_shape_has_224_components():
    img = np.random.default_rng(0).random((224, 224, 3))
    basis = row_pca(img)
    assert basis.n_components == 224
    assert np.max(np.abs(reconstruct(basis, 224, clip=False) - img)) <= 1e-5


def test_row_pca_against_covariance_oracle():
    img = np.random.default_rng(8).random((8, 5, 1))
    rows = img.reshape(8, 5)
    cov = np.cov(rows, rowvar=False)  # reference path, independent of our solver
    ref_vals, ref_vecs = np.linalg.eigh(cov)
    ref_vals, ref_vecs = ref_vals[::-1], ref_vecs[:, ::-1]
    basis = row_pca(img)
    np.testing.assert_allclose(basis.eigenvalues, ref_vals, atol=1e-8)

    mean = rows.mean(axis=0)
    proj = (rows - mean) @ ref_vecs[:, :3] @ ref_vecs[:, :3].T + mean
    np.testing.assert_allclose(reconstruct(basis, 3, clip=False).reshape(8, 5), proj, atol=1e-6)


def test_gram_route_matches_covariance_route():
    # d > n goes through the Gram matrix; compare with a direct covariance eigensolve
    img = np.random.default_rng(3).random((6, 9, 1))
    rows = img.reshape(6, 9)
    ref = np.sort(np.linalg.eigvalsh(np.cov(rows, rowvar=False)))[::-1][:6]
    basis = row_pca(img)
    np.testing.assert_allclose(basis.eigenvalues, ref, atol=1e-10)
    assert np.max(np.abs(basis.components @ basis.components.T - np.eye(6))) <= 1e-8


def test_reconstruct_bounds():
    basis = row_pca(np.random.default_rng(0).random((4, 3, 1)))
    with pytest.raises(IndexOutOfRange):
        reconstruct(basis, 4)
    with pytest.raises(IndexOutOfRange):
        reconstruct(basis, -1)


def test_reconstruct_clips():
    basis = row_pca(np.random.default_rng(2).random((10, 10, 1)))
    for k in range(basis.n_components + 1):
        out = reconstruct(basis, k)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_sign_convention():
    basis = row_pca(np.random.default_rng(4).random((12, 7, 2)))
    lead = np.argmax(np.abs(basis.components), axis=1)
    assert np.all(basis.components[np.arange(basis.n_components), lead] > 0)


def test_prefix_sweep_matches_direct():
    basis = row_pca(np.random.default_rng(5).random((16, 12, 2)))
    sweep = reconstruct_prefix_sweep(basis)
    r = basis.n_components
    assert len(sweep) == r + 1
    for j, img in enumerate(sweep):
        np.testing.assert_allclose(img, reconstruct(basis, r - j), atol=1e-7, rtol=0)


@settings(max_examples=40, deadline=None)
@given(w=st.integers(2, 12), h=st.integers(1, 10), c=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_pca_properties(w, h, c, seed):
    img = np.random.default_rng(seed).random((w, h, c))
    basis = row_pca(img)
    r = basis.n_components
    assert r == min(w, h * c)
    v = basis.components
    assert np.max(np.abs(v @ v.T - np.eye(r))) <= 1e-8
    assert np.all(np.diff(basis.eigenvalues) <= 0)
    rows = img.reshape(w, h * c)
    total = np.trace(np.cov(rows, rowvar=False).reshape(h * c, h * c))
    assert abs(basis.eigenvalues.sum() - total) <= 1e-8 * max(total, 1e-300) + 1e-15
    errs = [np.linalg.norm(reconstruct(basis, k, clip=False) - img) for k in range(r + 1)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[-1] <= 1e-5


def test_row_pca_deterministic_bits():
    img = np.random.default_rng(11).random((20, 20, 1))
    a, b = row_pca(img), row_pca(img)
    assert a.components.tobytes() == b.components.tobytes()
    assert a.scores.tobytes() == b.scores.tobytes()
