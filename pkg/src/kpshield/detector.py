"""Boosted shallow decision trees over (k, p) features.

Labels are binary.  Internally the first class (benign, label 0 by
convention) votes -1 and the second (adversarial) votes +1; a zero margin is
resolved towards the first class.
"""
import math
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_X_y

from .errors import BadMagic, DataError, EmptyTraining, IoFailure, SingleClassTraining, TruncatedFile, UntrainedModel

DETECTOR_MAGIC = b"KPD1"
EPS_FLOOR = 1e-10
ALPHA_CAP = 0.5 * math.log((1.0 - EPS_FLOOR) / EPS_FLOOR)
_GAIN_TIE = 1e-12


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf holding ``value[i]`` (0 or 1).

    Points with ``x[feature] <= threshold`` go left.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def depth(self):
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(len(self.feature)):
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                break
            go_left = X[np.arange(len(X)), np.where(inner, feat, 0)] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)
        return self.value[node].astype(np.int64)


def _gini_sum(w_pos, w_tot):
    """Weighted Gini impurity ``W * (1 - sum_c (W_c / W)^2)`` for two classes."""
    w_neg = w_tot - w_pos
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(w_tot > 0, w_tot - (w_pos ** 2 + w_neg ** 2) / w_tot, 0.0)
    return out


def _best_split(X, y, w):
    """Lowest weighted Gini split over midpoints; ties keep the lowest feature, then threshold."""
    parent = float(_gini_sum(np.sum(w * y), np.sum(w)))
    best = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs, ys, ws = X[order, f], y[order], w[order]
        cut = np.nonzero(np.diff(xs) > 0)[0]  # split after position cut[i]
        if not len(cut):
            continue
        cw = np.cumsum(ws)
        cp = np.cumsum(ws * ys)
        tot, pos = cw[-1], cp[-1]
        child = _gini_sum(cp[cut], cw[cut]) + _gini_sum(pos - cp[cut], tot - cw[cut])
        gains = parent - child
        i = int(np.argmax(gains))  # first maximum = lowest threshold
        if best is None or gains[i] > best[0] + _GAIN_TIE:
            best = (float(gains[i]), f, 0.5 * (xs[cut[i]] + xs[cut[i] + 1]))
    return best


def train_tree(points, labels, weights=None, max_depth=2):
    """Greedy weighted-Gini tree of depth at most ``max_depth``.

    Impure nodes are split even at zero gain so that depth-2 trees can carve
    XOR-like layouts; nodes stop at purity, at ``max_depth`` or when no
    threshold separates their points.  Leaves predict the weighted majority,
    ties going to class 0.
    """
    X = np.asarray(points, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(X) == 0:
        raise EmptyTraining("no training points")
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("points must be (n, d) with one label per point")
    if weights is None:
        weights = np.full(len(y), 1.0 / len(y))
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(y) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    if max_depth < 0:
        raise ValueError("max_depth must be non-negative")

    nodes = []

    def build(idx, depth):
        node = len(nodes)
        nodes.append(None)
        wp = float(np.sum(w[idx] * y[idx]))
        wn = float(np.sum(w[idx])) - wp
        leaf = (-1, 0.0, -1, -1, int(wp > wn))
        split = None
        if depth < max_depth and wp > 0 and wn > 0:
            split = _best_split(X[idx], y[idx], w[idx])
        if split is None:
            nodes[node] = leaf
            return node
        _, f, thr = split
        go_left = X[idx, f] <= thr
        lnode = build(idx[go_left], depth + 1)
        rnode = build(idx[~go_left], depth + 1)
        nodes[node] = (f, thr, lnode, rnode, -1)
        return node

    build(np.arange(len(y)), 0)
    cols = list(zip(*nodes))
    return DecisionTree(
        feature=np.array(cols[0], dtype=np.int64),
        threshold=np.array(cols[1], dtype=np.float64),
        left=np.array(cols[2], dtype=np.int64),
        right=np.array(cols[3], dtype=np.int64),
        value=np.array(cols[4], dtype=np.int64),
    )


class AdaBoostDetector(ClassifierMixin, BaseEstimator):
    """Discrete two-class AdaBoost with weighted-Gini decision trees.

    Parameters
    ----------
    n_estimators : int
        Maximum number of boosting rounds.
    max_depth : int
        Depth limit of each weak tree.

    Attributes
    ----------
    trees_, alphas_ : lists of the retained trees and their vote weights.
    errors_ : weighted error of each retained round.
    train_errors_ : ensemble 0-1 training error after each retained round.
    """

    def __init__(self, n_estimators=200, max_depth=2):
        self.n_estimators = n_estimators
        self.max_depth = max_depth

    def fit(self, X, y):
        if len(np.asarray(X)) == 0:
            raise EmptyTraining("no training points")
        X, y = check_X_y(X, y, dtype=np.float64)
        classes = np.unique(y)
        if len(classes) != 2:
            raise SingleClassTraining(f"need two classes, got {classes.tolist()}")
        self.classes_ = classes
        yb = (y == classes[1]).astype(np.int64)
        sign = 2.0 * yb - 1.0
        w = np.full(len(yb), 1.0 / len(yb))
        self.trees_, self.alphas_, self.errors_, self.train_errors_ = [], [], [], []
        margin = np.zeros(len(yb))
        for _ in range(self.n_estimators):
            tree = train_tree(X, yb, w, self.max_depth)
            h = 2.0 * tree.predict(X) - 1.0
            eps = float(np.sum(w[h != sign]))
            if eps >= 0.5:
                break
            alpha = ALPHA_CAP if eps <= EPS_FLOOR else 0.5 * math.log((1.0 - eps) / eps)
            self.trees_.append(tree)
            self.alphas_.append(alpha)
            self.errors_.append(eps)
            margin += alpha * h
            self.train_errors_.append(float(np.mean((margin > 0) != (yb == 1))))
            if eps <= EPS_FLOOR:
                break
            w = w * np.exp(-alpha * sign * h)
            w = w / w.sum()
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "trees_"):
            raise UntrainedModel("detector has not been fitted")

    def decision_function(self, X):
        """Signed vote ``sum_t alpha_t h_t(x)``; positive means the second class."""
        self._check_fitted()
        X = check_array(X, dtype=np.float64)
        out = np.zeros(len(X))
        for tree, alpha in zip(self.trees_, self.alphas_):
            out += alpha * (2.0 * tree.predict(X) - 1.0)
        return out

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(np.int64)]

    def detect(self, point):
        """``(label, margin)`` for a single ``(k, p)`` feature vector."""
        margin = float(self.decision_function(np.asarray(point, dtype=np.float64).reshape(1, -1))[0])
        return self.classes_[int(margin > 0)].item(), margin


def train_adaboost(points, labels, n_estimators=200, max_depth=2):
    return AdaBoostDetector(n_estimators=n_estimators, max_depth=max_depth).fit(points, labels)


def detect(model, point):
    if not isinstance(model, AdaBoostDetector):
        raise UntrainedModel("not a detector")
    return model.detect(point)


# --------------------------------------------------------------------------
# KPD1 detector files (little-endian)
#
#   b"KPD1" | u32 tree count | u32 n_estimators | u32 max_depth | u32 n_features
#   | 2 x i64 class labels
#   per tree: f64 alpha | u32 node count
#     per node: i32 feature | f64 threshold | i32 left | i32 right | i32 leaf value

_NODE = struct.Struct("<idiii")


def encode_detector(det):
    det._check_fitted()
    if not det.trees_:
        raise UntrainedModel("refusing to save a detector without trees")
    out = [DETECTOR_MAGIC,
           struct.pack("<4I", len(det.trees_), det.n_estimators, det.max_depth, det.n_features_in_),
           struct.pack("<2q", *(int(c) for c in det.classes_))]
    for tree, alpha in zip(det.trees_, det.alphas_):
        out.append(struct.pack("<dI", alpha, len(tree.feature)))
        for i in range(len(tree.feature)):
            out.append(_NODE.pack(int(tree.feature[i]), float(tree.threshold[i]), int(tree.left[i]),
                                  int(tree.right[i]), int(tree.value[i])))
    return b"".join(out)


def decode_detector(buf, path=None):
    if len(buf) < 4 or buf[:4] != DETECTOR_MAGIC:
        raise BadMagic("expected KPD1 magic", path, 0)
    if len(buf) < 36:
        raise TruncatedFile("detector header truncated", path, len(buf))
    count, n_est, depth, nfeat = struct.unpack_from("<4I", buf, 4)
    classes = np.array(struct.unpack_from("<2q", buf, 20))
    if count == 0:
        raise DataError("detector holds no trees", path, 4)
    pos = 36
    trees, alphas = [], []
    for _ in range(count):
        if len(buf) - pos < 12:
            raise TruncatedFile("tree header truncated", path, pos)
        alpha, nnodes = struct.unpack_from("<dI", buf, pos)
        pos += 12
        if len(buf) - pos < nnodes * _NODE.size:
            raise TruncatedFile("tree nodes truncated", path, pos)
        rows = [_NODE.unpack_from(buf, pos + i * _NODE.size) for i in range(nnodes)]
        pos += nnodes * _NODE.size
        cols = list(zip(*rows))
        trees.append(DecisionTree(np.array(cols[0], dtype=np.int64), np.array(cols[1]),
                                  np.array(cols[2], dtype=np.int64), np.array(cols[3], dtype=np.int64),
                                  np.array(cols[4], dtype=np.int64)))
        alphas.append(alpha)
    if pos != len(buf):
        raise DataError(f"{len(buf) - pos} trailing bytes", path, pos)
    det = AdaBoostDetector(n_estimators=n_est, max_depth=depth)
    det.classes_ = classes
    det.trees_, det.alphas_ = trees, alphas
    det.errors_, det.train_errors_ = [], []
    det.n_features_in_ = nfeat
    return det


def save_detector(det, path):
    data = encode_detector(det)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoFailure(str(exc), path) from exc


def load_detector(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc), path) from exc
    return decode_detector(buf, path)
