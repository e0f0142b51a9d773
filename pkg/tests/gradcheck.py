"""Central-difference gradient checks shared by the unit and acceptance suites."""
import numpy as np

from kpshield import nnet
from kpshield.nnet import LayerSpec, Model

STEP = 1e-4
RTOL = 1e-3
FLOOR = 1e-6  # magnitudes below this are compared absolutely


def rel_ok(analytic, numeric):
    return abs(analytic - numeric) <= RTOL * max(abs(analytic), abs(numeric), FLOOR)


def _pattern(model, x, params=None):
    """Activation pattern (ReLU masks and max-pool winners) of a forward pass."""
    _, caches, _ = nnet._run(model, x, params)
    parts = []
    for layer, cache in zip(model.layers, caches):
        if layer.kind == "relu":
            parts.append(cache.tobytes())
        elif layer.kind == "maxpool2":
            parts.append(cache[1].tobytes())
    return b"".join(parts)


def _split(model, flat):
    it = iter(flat)
    return [tuple(next(it) for _ in l.params) for l in model.layers]


def check_input_gradient(model, x, target, rng, n_coords=20):
    """Compare d cross-entropy / d input at ``n_coords`` kink-free coordinates."""
    grad = nnet.input_gradient(model, x, ("cross-entropy", target))
    base = _pattern(model, x[None])
    checked, bad = 0, []
    for i in rng.permutation(x.size):
        e = np.zeros(x.size)
        e[i] = STEP
        e = e.reshape(x.shape)
        if _pattern(model, (x + e)[None]) != base or _pattern(model, (x - e)[None]) != base:
            continue
        fp = nnet.input_gradient(model, x + e, ("cross-entropy", target), return_value=True)[0]
        fm = nnet.input_gradient(model, x - e, ("cross-entropy", target), return_value=True)[0]
        num = (fp - fm) / (2 * STEP)
        if not rel_ok(grad.flat[i], num):
            bad.append((int(i), float(grad.flat[i]), float(num)))
        checked += 1
        if checked == n_coords:
            break
    return checked, bad


def check_param_gradients(model, X, y, rng, n_coords=20):
    """Compare d loss / d weights at ``n_coords`` random kink-free parameter coordinates."""
    params = [p.astype(np.float64) for p in model.params]
    _, grads = nnet.loss_and_param_grads(model, X, y, params)
    base = _pattern(model, X, _split(model, params))
    checked, bad = 0, []
    sizes = [p.size for p in params]
    offsets = np.cumsum([0] + sizes)
    for flat_i in rng.permutation(offsets[-1]):
        pi = int(np.searchsorted(offsets, flat_i, side="right") - 1)
        j = flat_i - offsets[pi]
        plus = [p.copy() for p in params]
        minus = [p.copy() for p in params]
        plus[pi].flat[j] += STEP
        minus[pi].flat[j] -= STEP
        if (_pattern(model, X, _split(model, plus)) != base
                or _pattern(model, X, _split(model, minus)) != base):
            continue
        lp, _ = nnet.loss_and_param_grads(model, X, y, plus)
        lm, _ = nnet.loss_and_param_grads(model, X, y, minus)
        num = (lp - lm) / (2 * STEP)
        if not rel_ok(grads[pi].flat[j], num):
            bad.append((pi, int(j), float(grads[pi].flat[j]), float(num)))
        checked += 1
        if checked == n_coords:
            break
    return checked, bad


def random_layer_model(kind, seed, dims=(6, 4, 2), classes=3):
    """A small random network built around one layer kind."""
    rng = np.random.default_rng(seed)
    w, h, c = dims
    d = w * h * c

    def dense(i, o):
        return LayerSpec("dense", (rng.normal(0, 0.5, (o, i)), rng.normal(0, 0.1, o)))

    def conv(ci, co):
        return LayerSpec("conv3x3", (rng.normal(0, 0.5, (co, 3, 3, ci)), rng.normal(0, 0.1, co)))

    if kind in ("dense", "flatten"):
        layers = [LayerSpec("flatten"), dense(d, classes)]
    elif kind == "relu":
        layers = [LayerSpec("flatten"), dense(d, 16), LayerSpec("relu"), dense(16, classes)]
    elif kind == "conv3x3":
        layers = [conv(c, 3), LayerSpec("flatten"), dense(w * h * 3, classes)]
    elif kind == "maxpool2":
        layers = [conv(c, 3), LayerSpec("maxpool2"), LayerSpec("flatten"),
                  dense((w // 2) * (h // 2) * 3, classes)]
    else:
        raise ValueError(kind)
    return Model(tuple(layers), dims, classes)
