"""Row-wise PCA of single images.

Images are ``(w, h, c)`` float arrays (rows, columns, channels) with values in
``[0, 1]``.  Each of the ``w`` rows, flattened channel-fastest into a vector of
length ``h * c``, is one sample of the PCA.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateImage, IndexOutOfRange, NoConvergence, NonSymmetric, ShapeMismatch

MAX_SWEEPS = 50
_SYMMETRY_TOL = 1e-10


def as_image(image, min_rows=1):
    """Validate and return ``image`` as a float64 ``(w, h, c)`` array."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or min(x.shape) < 1:
        raise ShapeMismatch(f"image must be (w, h, c), got shape {np.shape(image)}")
    if x.shape[0] < min_rows:
        raise DegenerateImage(f"need at least {min_rows} rows, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite values")
    return x


def row_matrix(image):
    """Return the ``w x (h*c)`` matrix of image rows, channel index fastest."""
    x = as_image(image)
    return x.reshape(x.shape[0], x.shape[1] * x.shape[2])


@dataclass(frozen=True)
class EighResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # column i pairs with eigenvalues[i]
    order: str = "descending"
    sweeps: int = 0


@lru_cache(maxsize=64)
def _round_robin(n):
    """Disjoint (p, q) index pairs per round; n - 1 (or n) rounds cover all pairs once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def eigh_symmetric(a, order="descending", tol=1e-16, max_sweeps=MAX_SWEEPS):
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Pairs are visited in round-robin order so that each round applies
    ``n // 2`` disjoint rotations at once.  An off-diagonal entry is rotated
    away only while ``|a_pq| > tol * sqrt(|a_pp a_qq|)`` (plus a tiny absolute
    floor); a sweep without any rotation ends the iteration.  Equal
    eigenvalues keep the order in which they appear on the rotated diagonal.

    Raises NonSymmetric when ``a`` is asymmetric beyond ``1e-10`` (relative to
    its largest entry when that exceeds one) and NoConvergence after
    ``max_sweeps`` sweeps that still rotated.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got shape {a.shape}")
    if order not in ("ascending", "descending"):
        raise ValueError("order must be 'ascending' or 'descending'")
    n = a.shape[0]
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > _SYMMETRY_TOL * scale:
        raise NonSymmetric(f"asymmetry {np.max(np.abs(a - a.T)):.3e} exceeds tolerance")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    floor = 1e-300 + 1e-32 * float(np.sqrt(np.sum(a * a)))
    rounds = _round_robin(n) if n > 1 else ()
    sweeps = 0
    rotated = bool(rounds)
    while rotated:
        if sweeps >= max_sweeps:
            raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")
        sweeps += 1
        rotated = False
        for p, q in rounds:
            apq = a[p, q]
            app, aqq = a[p, p], a[q, q]
            live = np.abs(apq) > tol * np.sqrt(np.abs(app * aqq)) + floor
            if not np.any(live):
                continue
            rotated = True
            theta = (aqq - app) / (2.0 * np.where(live, apq, 1.0))
            big = np.abs(theta) > 1e150
            theta_sq = np.where(big, 0.0, theta) ** 2
            t = np.where(big, 0.5 / np.where(big, theta, 1.0),
                         np.sign(theta) / (np.abs(theta) + np.sqrt(theta_sq + 1.0)))
            t = np.where(theta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            c = np.where(live, c, 1.0)
            s = np.where(live, s, 0.0)
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = ap * c - aq * s
            a[:, q] = ap * s + aq * c
            a[p[live], q[live]] = 0.0
            a[q[live], p[live]] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = vp * c - vq * s
            v[:, q] = vp * s + vq * c
    w = np.diag(a).copy()
    idx = np.argsort(-w if order == "descending" else w, kind="stable")
    return EighResult(w[idx], v[:, idx], order, sweeps)


def _fix_signs(vectors):
    """Flip each row so its largest-magnitude coordinate (first on ties) is positive."""
    lead = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), lead])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def _orthonormalize(vectors):
    """Modified Gram-Schmidt (two passes) over rows, in order.

    Rows that collapse are replaced by the standard basis vector with the
    largest residual, so the result is always a full orthonormal set.
    """
    out = np.zeros_like(vectors)
    d = vectors.shape[1]
    for i, vec in enumerate(vectors):
        norm0 = np.linalg.norm(vec)
        u = vec.copy()
        for _ in range(2):
            u -= out[:i].T @ (out[:i] @ u)
        if norm0 == 0.0 or np.linalg.norm(u) <= 1e-8 * norm0:
            basis = np.eye(d)
            resid = basis - (basis @ out[:i].T) @ out[:i]
            u = resid[int(np.argmax(np.linalg.norm(resid, axis=1)))]
            for _ in range(2):
                u -= out[:i].T @ (out[:i] @ u)
        out[i] = u / np.linalg.norm(u)
    return out


@dataclass(frozen=True)
class PcaBasis:
    """Row principal components of one image.

    ``components`` is ``(r, d)`` with orthonormal rows sorted by eigenvalue,
    ``scores`` is ``(n, r)``: the centred rows projected onto the components.
    """

    components: np.ndarray
    eigenvalues: np.ndarray
    mean_row: np.ndarray
    scores: np.ndarray
    source_dims: tuple

    @property
    def n_components(self):
        return self.components.shape[0]


def row_pca(image):
    """Decompose an image into its row principal components.

    Covariance uses the ``n - 1`` normalisation.  When the row dimension
    ``d = h*c`` exceeds the number of rows ``n = w`` the ``n x n`` Gram matrix
    is diagonalised instead and the eigenvectors mapped back through the
    centred rows; both routes retain ``min(n, d)`` components.
    """
    x = as_image(image, min_rows=2)
    rows = row_matrix(x)
    n, d = rows.shape
    mean_row = rows.mean(axis=0)
    centred = rows - mean_row
    if d <= n:
        eig = eigh_symmetric(centred.T @ centred / (n - 1))
        components = eig.eigenvectors.T.copy()
    else:
        eig = eigh_symmetric(centred @ centred.T / (n - 1))
        lam = np.clip(eig.eigenvalues, 0.0, None)
        sigma = np.sqrt(lam * (n - 1))
        mapped = (centred.T @ eig.eigenvectors).T
        with np.errstate(divide="ignore", invalid="ignore"):
            mapped = np.where(sigma[:, None] > 0, mapped / sigma[:, None], 0.0)
        components = _orthonormalize(mapped)
    eigenvalues = np.clip(eig.eigenvalues, 0.0, None)
    components = _fix_signs(components)
    scores = centred @ components.T
    for arr in (components, eigenvalues, mean_row, scores):
        arr.setflags(write=False)
    return PcaBasis(components, eigenvalues, mean_row, scores, tuple(x.shape))


def _check_k(basis, k):
    if not 0 <= k <= basis.n_components:
        raise IndexOutOfRange(f"k={k} outside [0, {basis.n_components}]")


def reconstruct(basis, k, clip=True):
    """Rebuild the image from the mean row plus the first ``k`` components."""
    _check_k(basis, k)
    rows = basis.mean_row + basis.scores[:, :k] @ basis.components[:k]
    out = rows.reshape(basis.source_dims)
    return np.clip(out, 0.0, 1.0) if clip else out


def iter_prefix_sweep(basis, clip=True):
    """Yield reconstructions for ``k = r, r-1, ..., 0`` via rank-1 downdates."""
    r = basis.n_components
    rows = basis.mean_row + basis.scores @ basis.components
    for k in range(r, -1, -1):
        out = rows.reshape(basis.source_dims)
        yield np.clip(out, 0.0, 1.0) if clip else out.copy()
        if k > 0:
            rows = rows - np.outer(basis.scores[:, k - 1], basis.components[k - 1])


def reconstruct_prefix_sweep(basis, clip=True):
    return list(iter_prefix_sweep(basis, clip=clip))
