"""(k, p) points: where the dominant class loses top rank under truncated row-PCA."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import BatchError
from .linalg import as_image, iter_prefix_sweep, reconstruct, row_pca
from .nnet import forward, softmax


@dataclass(frozen=True)
class KpPoint:
    k: int
    p: float
    n: int
    p_dominant_at_k: float
    never_flipped: bool
    dominant_class: int
    class_at_k: int

    def as_dict(self):
        return asdict(self)


def _predict(model, image):
    logits = forward(model, image)
    return int(np.argmax(logits)), softmax(logits)


def kp_point(model, image, use_sweep=True):
    """Locate the (k, p) point of ``image`` under ``model``.

    The dominant class is the model's prediction on the unmodified image.  The
    component count ``k`` walks down from ``n`` and the image is rebuilt from
    the top-``k`` row components until another class takes the top spot;
    ``p`` is that class's softmax probability on the reconstruction.  If the
    dominant class survives down to ``k = 0`` the point is flagged
    ``never_flipped`` and ``p`` is the dominant probability at ``k = 0``.
    Reconstructions are clipped to ``[0, 1]`` before inference.
    """
    x = as_image(image, min_rows=2)
    dominant, _ = _predict(model, x)
    basis = row_pca(x)
    n = basis.n_components
    if use_sweep:
        images = iter_prefix_sweep(basis)
        next(images)  # k = n, the full image is evaluated directly above
    else:
        images = (reconstruct(basis, k) for k in range(n - 1, -1, -1))
    top = dominant
    k = n
    for recon in images:
        k -= 1
        top, probs = _predict(model, recon)
        if top != dominant:
            break
    never = top == dominant
    return KpPoint(k=k, p=float(probs[top]), n=n, p_dominant_at_k=float(probs[dominant]),
                   never_flipped=bool(never), dominant_class=dominant, class_at_k=top)


def kp_point_bruteforce(model, image):
    """Reference implementation: classify every truncation ``k = n-1 .. 0`` independently.

    Issues exactly ``n`` forward passes on reconstructions (plus one on the
    unmodified image for the dominant class) and picks the first failure of
    dominance scanning downward.
    """
    x = as_image(image, min_rows=2)
    dominant = int(np.argmax(forward(model, x)))
    basis = row_pca(x)
    n = basis.n_components
    preds = {}
    for k in range(n - 1, -1, -1):
        preds[k] = _predict(model, reconstruct(basis, k))
    flips = [k for k in range(n - 1, -1, -1) if preds[k][0] != dominant]
    if flips:
        k = flips[0]
    else:
        k = 0
    top, probs = preds[k]
    return KpPoint(k=k, p=float(probs[top]), n=n, p_dominant_at_k=float(probs[dominant]),
                   never_flipped=not flips, dominant_class=dominant, class_at_k=top)


def kp_batch(model, images, parallelism=1):
    """Order-preserving ``kp_point`` over many images.

    Per-item failures are collected and raised together as BatchError.
    """
    images = list(images)

    def one(item):
        try:
            return kp_point(model, item), None
        except Exception as exc:  # noqa: BLE001 - aggregated with index below
            return None, exc

    if parallelism > 1 and len(images) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(one, images))
    else:
        outcomes = [one(im) for im in images]
    failures = [(i, exc) for i, (_, exc) in enumerate(outcomes) if exc is not None]
    if failures:
        raise BatchError(failures)
    return [pt for pt, _ in outcomes]


class KpFeaturizer(BaseEstimator, TransformerMixin):
    """Map images to ``(k, p)`` feature rows under a fixed classifier.

    Stateless: ``fit`` only validates.  ``use_dominant_p`` swaps ``p`` for the
    dominant-class probability at the flip point.
    """

    def __init__(self, model=None, use_dominant_p=False, parallelism=1):
        self.model = model
        self.use_dominant_p = use_dominant_p
        self.parallelism = parallelism

    def fit(self, X, y=None):
        if self.model is None:
            raise ValueError("KpFeaturizer needs a model")
        return self

    def transform(self, X):
        points = kp_batch(self.model, X, self.parallelism)
        col = "p_dominant_at_k" if self.use_dominant_p else "p"
        return np.array([[pt.k, getattr(pt, col)] for pt in points], dtype=np.float64).reshape(-1, 2)
