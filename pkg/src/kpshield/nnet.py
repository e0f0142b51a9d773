"""Small feedforward classifiers with exact reverse-mode gradients.

Parameters are held as float32 (the on-disk precision) and every computation
is carried out in float64.  Spatial tensors are ``(N, w, h, c)``; flattening is
row-major, matching :func:`kpshield.linalg.row_matrix`.
"""
import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadMagic, DataError, EmptyDataset, IoFailure, ShapeMismatch, TruncatedFile
from .tensorio import decode_tensor, encode_tensor

log = logging.getLogger(__name__)

KINDS = ("dense", "conv3x3", "relu", "maxpool2", "flatten")
_KIND_TAG = {k: i for i, k in enumerate(KINDS)}
MODEL_MAGIC = b"KPM1"


@dataclass(frozen=True, eq=False)
class LayerSpec:
    kind: str
    params: tuple = ()  # dense: (W[out, in], b[out]); conv3x3: (W[out, 3, 3, in], b[out])

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        want = 2 if self.kind in ("dense", "conv3x3") else 0
        if len(self.params) != want:
            raise ShapeMismatch(f"{self.kind} takes {want} parameter tensors")
        if self.kind == "conv3x3" and tuple(self.params[0].shape[1:3]) != (3, 3):
            raise ShapeMismatch("conv3x3 kernels must be 3x3")


@dataclass(frozen=True, eq=False)
class Model:
    layers: tuple
    input_dims: tuple
    num_classes: int
    name: str = field(default="model", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(_freeze(l) for l in self.layers))
        object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        shape = self.input_dims
        for layer in self.layers:
            shape = _out_shape(layer, shape)
        if shape != (self.num_classes,):
            raise ShapeMismatch(f"network emits shape {shape}, expected ({self.num_classes},)")
        for layer in self.layers:
            for p in layer.params:
                if not np.all(np.isfinite(p)):
                    raise ValueError("non-finite weights")
        object.__setattr__(self, "_params64",
                           [tuple(p.astype(np.float64) for p in l.params) for l in self.layers])

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def with_params(self, flat):
        """Copy of the model with parameters replaced (in ``self.params`` order)."""
        it = iter(flat)
        layers = [replace(l, params=tuple(np.asarray(next(it), dtype=np.float32) for _ in l.params))
                  for l in self.layers]
        return replace(self, layers=tuple(layers))


def _freeze(layer):
    params = []
    for p in layer.params:
        arr = np.array(p, dtype=np.float32)
        arr.setflags(write=False)
        params.append(arr)
    return replace(layer, params=tuple(params))


def _out_shape(layer, shape):
    kind = layer.kind
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "relu":
        return shape
    if kind == "dense":
        w, b = layer.params
        if len(shape) != 1 or w.shape != (b.shape[0], shape[0]):
            raise ShapeMismatch(f"dense {w.shape} cannot take input {shape}")
        return (w.shape[0],)
    if kind == "conv3x3":
        w, b = layer.params
        if len(shape) != 3 or w.shape[3] != shape[2] or b.shape != (w.shape[0],):
            raise ShapeMismatch(f"conv3x3 {w.shape} cannot take input {shape}")
        return (shape[0], shape[1], w.shape[0])
    if len(shape) != 3 or shape[0] % 2 or shape[1] % 2:
        raise ShapeMismatch(f"maxpool2 needs even spatial dims, got {shape}")
    return (shape[0] // 2, shape[1] // 2, shape[2])


# --------------------------------------------------------------------------
# layer kernels: forward returns (out, cache); backward returns (dx, dparams)

def _conv_cols(x):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # N, w, h, c, 3, 3
    n, w, h, c = x.shape
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * w * h, 9 * c)


def _layer_forward(layer, x, params):
    kind = layer.kind
    if kind == "dense":
        w, b = params
        return x @ w.T + b, x
    if kind == "conv3x3":
        w, b = params
        cols = _conv_cols(x)
        out = cols @ w.reshape(w.shape[0], -1).T + b
        return out.reshape(x.shape[:3] + (w.shape[0],)), (x.shape, cols)
    if kind == "relu":
        return np.maximum(x, 0.0), x > 0
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    n, w, h, c = x.shape
    blocks = x.reshape(n, w // 2, 2, h // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, w // 2, h // 2, c, 4)
    arg = np.argmax(blocks, axis=-1)  # first maximum wins ties
    return np.take_along_axis(blocks, arg[..., None], -1)[..., 0], (x.shape, arg)


def _layer_backward(layer, dout, cache, params):
    kind = layer.kind
    if kind == "dense":
        w, _ = params
        x = cache
        return dout @ w, (dout.T @ x, dout.sum(axis=0))
    if kind == "conv3x3":
        w, _ = params
        shape, cols = cache
        n, wd, ht, c = shape
        d2 = dout.reshape(-1, w.shape[0])
        dw = (d2.T @ cols).reshape(w.shape)
        dcols = (d2 @ w.reshape(w.shape[0], -1)).reshape(n, wd, ht, 3, 3, c)
        dxp = np.zeros((n, wd + 2, ht + 2, c))
        for i in range(3):
            for j in range(3):
                dxp[:, i:i + wd, j:j + ht, :] += dcols[:, :, :, i, j, :]
        return dxp[:, 1:-1, 1:-1, :], (dw, d2.sum(axis=0))
    if kind == "relu":
        return dout * cache, ()
    if kind == "flatten":
        return dout.reshape(cache), ()
    shape, arg = cache
    n, wd, ht, c = shape
    onehot = (np.arange(4) == arg[..., None]) * dout[..., None]
    dx = onehot.reshape(n, wd // 2, ht // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dx.reshape(shape), ()


def _as_batch(model, images):
    x = np.asarray(images, dtype=np.float64)
    dims = model.input_dims
    if x.shape == dims:
        return x[None], True
    if x.shape[1:] == dims:
        return x, False
    if x.ndim == 2 and dims[2] == 1 and x.shape == dims[:2]:
        return x[None, :, :, None], True
    raise ShapeMismatch(f"input shape {x.shape} does not match model input {dims}")


def _run(model, x, params=None):
    if params is None:
        params = model._params64
    caches = []
    for layer, ps in zip(model.layers, params):
        x, cache = _layer_forward(layer, x, ps)
        caches.append(cache)
    return x, caches, params


def _backprop(model, dlogits, caches, params):
    grads = []
    d = dlogits
    for layer, cache, ps in zip(reversed(model.layers), reversed(caches), reversed(params)):
        d, g = _layer_backward(layer, d, cache, ps)
        grads.append(g)
    return d, [g for layer_grads in reversed(grads) for g in layer_grads]


def forward(model, images):
    """Logits for one ``(w, h, c)`` image or a batch ``(N, w, h, c)``."""
    x, single = _as_batch(model, images)
    out, _, _ = _run(model, x)
    return out[0] if single else out


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model, images):
    return softmax(forward(model, images))


def classify(model, images):
    """Arg-max class; on exact ties the lowest index wins."""
    return np.argmax(forward(model, images), axis=-1)


def _objective_grad(logits, objective):
    """Value and d/dlogits of a scalar objective for a single logit vector."""
    kind = objective[0]
    if kind == "logit":
        g = np.zeros_like(logits)
        g[objective[1]] = 1.0
        return logits[objective[1]], g
    if kind == "cross-entropy":
        t = objective[1]
        p = softmax(logits)
        g = p.copy()
        g[t] -= 1.0
        return -np.log(max(p[t], 1e-300)), g
    if kind == "cw-loss":
        t, kappa = objective[1], objective[2]
        others = logits.copy()
        others[t] = -np.inf
        j = int(np.argmax(others))
        margin = logits[j] - logits[t]
        g = np.zeros_like(logits)
        if margin > -kappa:
            g[j], g[t] = 1.0, -1.0
        return max(margin, -kappa), g
    raise ValueError(f"unknown objective {objective!r}")


def input_gradient(model, image, objective, return_value=False, return_logits=False):
    """Exact gradient of a scalar objective with respect to the input image.

    ``objective`` is one of ``("cross-entropy", target)``, ``("logit", i)`` or
    ``("cw-loss", target, kappa)``; the latter is
    ``max(max_{j != t} Z_j - Z_t, -kappa)``.
    """
    x, single = _as_batch(model, image)
    if not single:
        raise ShapeMismatch("input_gradient takes a single image")
    kind = objective[0]
    target = objective[1]
    if not 0 <= target < model.num_classes:
        raise ShapeMismatch(f"class {target} outside [0, {model.num_classes})")
    if kind == "cw-loss" and len(objective) != 3:
        raise ValueError("cw-loss objective needs (target, kappa)")
    logits, caches, params = _run(model, x)
    value, g = _objective_grad(logits[0], objective)
    dx, _ = _backprop(model, g[None], caches, params)
    grad = dx[0].reshape(model.input_dims)
    out = (grad,)
    if return_value:
        out = (value,) + out
    if return_logits:
        out = (logits[0],) + out
    return out if len(out) > 1 else grad


def logit_jacobian(model, image, return_logits=False):
    """``num_classes x (w*h*c)`` matrix of d logit_i / d input."""
    x, single = _as_batch(model, image)
    if not single:
        raise ShapeMismatch("logit_jacobian takes a single image")
    k = model.num_classes
    logits, caches, params = _run(model, np.repeat(x, k, axis=0))
    dx, _ = _backprop(model, np.eye(k), caches, params)
    jac = dx.reshape(k, -1)
    return (logits[0], jac) if return_logits else jac


def loss_and_param_grads(model, images, labels, params=None):
    """Mean cross-entropy of a batch and its gradients w.r.t. ``model.params``."""
    x, _ = _as_batch(model, images)
    labels = np.asarray(labels)
    if params is not None:
        it = iter(params)
        params = [tuple(next(it) for _ in l.params) for l in model.layers]
    logits, caches, params = _run(model, x, params)
    p = softmax(logits)
    n = len(labels)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300)))
    d = p
    d[np.arange(n), labels] -= 1.0
    _, grads = _backprop(model, d / n, caches, params)
    return loss, grads


# --------------------------------------------------------------------------
# construction and training

def splitmix64(seed, count):
    """``count`` consecutive outputs of the splitmix64 generator as uint64."""
    golden = np.uint64(0x9E3779B97F4A7C15)
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + golden * np.arange(1, count + 1, dtype=np.uint64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _uniform(seed, shape):
    bits = splitmix64(seed, int(np.prod(shape)))
    return ((bits >> np.uint64(11)).astype(np.float64) * 2.0 ** -53).reshape(shape)


def _he_uniform(seed, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return (_uniform(seed, shape) * 2.0 - 1.0) * bound


def _layer_seed(seed, i):
    return int(splitmix64(seed, i + 1)[-1])


def mlp(input_dims, num_classes, hidden=128, seed=0):
    """flatten -> dense(hidden) -> relu -> dense(num_classes)."""
    d = int(np.prod(input_dims))
    layers = [
        LayerSpec("flatten"),
        LayerSpec("dense", (_he_uniform(_layer_seed(seed, 0), (hidden, d), d), np.zeros(hidden))),
        LayerSpec("relu"),
        LayerSpec("dense", (_he_uniform(_layer_seed(seed, 1), (num_classes, hidden), hidden),
                            np.zeros(num_classes))),
    ]
    return Model(tuple(layers), tuple(input_dims), num_classes, name="mlp")


def small_conv(input_dims, num_classes, filters=8, seed=0):
    """conv3x3(filters) -> relu -> maxpool2 -> flatten -> dense(num_classes)."""
    w, h, c = input_dims
    flat = (w // 2) * (h // 2) * filters
    layers = [
        LayerSpec("conv3x3", (_he_uniform(_layer_seed(seed, 0), (filters, 3, 3, c), 9 * c),
                              np.zeros(filters))),
        LayerSpec("relu"),
        LayerSpec("maxpool2"),
        LayerSpec("flatten"),
        LayerSpec("dense", (_he_uniform(_layer_seed(seed, 1), (num_classes, flat), flat),
                            np.zeros(num_classes))),
    ]
    return Model(tuple(layers), tuple(input_dims), num_classes, name="smallconv")


ARCHITECTURES = {"mlp": mlp, "smallconv": small_conv}


def accuracy(model, images, labels, batch=256):
    labels = np.asarray(labels)
    hits = 0
    for i in range(0, len(labels), batch):
        hits += int(np.sum(classify(model, images[i:i + batch]) == labels[i:i + batch]))
    return hits / len(labels)


def train_sgd(model, images, labels, lr=0.05, epochs=20, batch=32, seed=0):
    """Minibatch SGD on mean cross-entropy; returns a new model.

    Updates are computed in float64 and stored back as float32 after every
    step.  Shuffling is driven only by ``seed``.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if len(images) != len(labels):
        raise ShapeMismatch("images and labels differ in length")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError("labels outside the model's class range")
    rng = np.random.default_rng(seed)
    params = [p.astype(np.float32) for p in model.params]
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        total = 0.0
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            p64 = [p.astype(np.float64) for p in params]
            loss, grads = loss_and_param_grads(model, images[idx], labels[idx], p64)
            params = [(p - lr * g).astype(np.float32) for p, g in zip(p64, grads)]
            total += loss * len(idx)
        log.debug("epoch %d loss %.5f", epoch + 1, total / len(labels))
    trained = model.with_params(params)
    log.info("%s: train accuracy %.4f after %d epochs", model.name, accuracy(trained, images, labels),
             epochs)
    return trained


# --------------------------------------------------------------------------
# KPM1 model files
#
#   b"KPM1" | u32 layer count | 3 x u32 input dims | u32 num_classes
#   per layer: u8 kind tag | u8 tensor count | KPT1 blocks

def encode_model(model):
    out = [MODEL_MAGIC, struct.pack("<I", len(model.layers)),
           struct.pack("<3I", *model.input_dims), struct.pack("<I", model.num_classes)]
    for layer in model.layers:
        out.append(struct.pack("<BB", _KIND_TAG[layer.kind], len(layer.params)))
        out.extend(encode_tensor(p) for p in layer.params)
    return b"".join(out)


def decode_model(buf, path=None):
    if len(buf) < 4 or buf[:4] != MODEL_MAGIC:
        raise BadMagic("expected KPM1 magic", path, 0)
    if len(buf) < 24:
        raise TruncatedFile("model header truncated", path, len(buf))
    (count,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from("<3I", buf, 8)
    (num_classes,) = struct.unpack_from("<I", buf, 20)
    pos = 24
    layers = []
    for _ in range(count):
        if len(buf) - pos < 2:
            raise TruncatedFile("layer header truncated", path, pos)
        tag, ntens = struct.unpack_from("<BB", buf, pos)
        if tag >= len(KINDS):
            raise DataError(f"unknown layer tag {tag}", path, pos)
        pos += 2
        tensors = []
        for _ in range(ntens):
            arr, pos = decode_tensor(buf, pos, path)
            tensors.append(arr)
        layers.append(LayerSpec(KINDS[tag], tuple(tensors)))
    if pos != len(buf):
        raise DataError(f"{len(buf) - pos} trailing bytes", path, pos)
    kinds = [l.kind for l in layers]
    name = "smallconv" if "conv3x3" in kinds else "mlp"
    return Model(tuple(layers), dims, num_classes, name=name)


def save_model(model, path):
    try:
        with open(path, "wb") as fh:
            fh.write(encode_model(model))
    except OSError as exc:
        raise IoFailure(str(exc), path) from exc


def load_model(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc), path) from exc
    return decode_model(buf, path)
