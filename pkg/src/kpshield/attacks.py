"""White-box attacks: DeepFool (L2), single-pixel JSMA (L0) and Carlini-Wagner L2.

Every attack returns an :class:`AttackResult`; failures come back with
``success=False`` instead of raising.
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidTarget
from .linalg import as_image
from .nnet import classify, forward, input_gradient, logit_jacobian


@dataclass(frozen=True, eq=False)
class AttackResult:
    adversarial: np.ndarray
    perturbation: np.ndarray
    distance_l2: float
    distance_l0: int
    distance_linf: float
    success: bool
    original_class: int
    adversarial_class: int
    iterations: int
    attack: str = ""
    target: int = -1
    trace: tuple = ()  # CW: (c, best successful L2 in that round or inf) per search step
    source_index: int = -1


def _result(model, x, x_adv, original, iterations, attack, target=-1, trace=()):
    x_adv = np.clip(x_adv, 0.0, 1.0)
    delta = x_adv - x
    adv_class = int(classify(model, x_adv))
    if target >= 0:
        success = adv_class == target
    else:
        success = adv_class != original
    return AttackResult(
        adversarial=x_adv,
        perturbation=delta,
        distance_l2=float(np.linalg.norm(delta.ravel())),
        distance_l0=int(np.count_nonzero(delta)),
        distance_linf=float(np.max(np.abs(delta))) if delta.size else 0.0,
        success=bool(success),
        original_class=int(original),
        adversarial_class=adv_class,
        iterations=int(iterations),
        attack=attack,
        target=int(target),
        trace=tuple(trace),
    )


def _check_target(model, target, original):
    if not 0 <= target < model.num_classes:
        raise InvalidTarget(f"target {target} outside [0, {model.num_classes})")
    if target == original:
        raise InvalidTarget(f"target {target} equals the current class")


def deepfool(model, x, max_iter=50, overshoot=0.02):
    """Untargeted DeepFool.

    Each iteration linearises the logits at the current point and steps to the
    nearest linearised class boundary; the accumulated step is scaled by
    ``1 + overshoot`` and clipped to the unit box.  With more than ten classes
    only the ten highest-scoring classes of the clean input are considered.
    """
    x = as_image(x)
    logits0 = forward(model, x)
    original = int(np.argmax(logits0))
    candidates = np.argsort(-logits0, kind="stable")
    if model.num_classes > 10:
        candidates = candidates[:10]
    candidates = [int(k) for k in candidates if k != original]
    r_tot = np.zeros(x.size)
    x_adv = x
    it = 0
    while it < max_iter:
        if int(classify(model, x_adv)) != original:
            break
        z, jac = logit_jacobian(model, x + (1.0 + overshoot) * r_tot.reshape(x.shape),
                                return_logits=True)
        best, best_step = np.inf, None
        for k in candidates:
            w_k = jac[k] - jac[original]
            f_k = z[k] - z[original]
            norm = np.linalg.norm(w_k)
            if norm == 0.0:
                continue
            dist = abs(f_k) / norm
            if dist < best:
                best, best_step = dist, (abs(f_k) / norm ** 2) * w_k
        it += 1
        if best_step is None:
            break
        r_tot = r_tot + best_step
        x_adv = np.clip(x + (1.0 + overshoot) * r_tot.reshape(x.shape), 0.0, 1.0)
    return _result(model, x, x_adv, original, it, "deepfool")


def saliency_map(jac, target):
    """Single-pixel increasing saliency from a ``classes x pixels`` Jacobian."""
    alpha = jac[target]
    beta = jac.sum(axis=0) - alpha
    return np.where((alpha < 0) | (beta > 0), 0.0, alpha * np.abs(beta))


def jsma(model, x, target, theta=1.0, gamma=0.1):
    """Targeted JSMA that raises one pixel at a time by ``theta``.

    Stops on reaching ``target`` or after ``ceil(gamma * x.size)`` pixel
    modifications.  Pixels already at 1 leave the search domain.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    x = as_image(x)
    original = int(classify(model, x))
    _check_target(model, target, original)
    budget = math.ceil(gamma * x.size - 1e-9)
    flat = x.ravel().copy()
    it = 0
    while it < budget:
        cur = flat.reshape(x.shape)
        if int(classify(model, cur)) == target:
            break
        jac = logit_jacobian(model, cur)
        sal = saliency_map(jac, target)
        sal[flat >= 1.0] = 0.0
        i = int(np.argmax(sal))
        if sal[i] <= 0.0:
            break
        flat[i] = min(flat[i] + theta, 1.0)
        it += 1
    return _result(model, x, flat.reshape(x.shape), original, it, "jsma", target)


def cw_l2(model, x, target, steps=500, c_init=1e-2, binary_search_steps=6, kappa=0.0,
          lr=1e-2, abort_early=True, init_jitter=0.0, seed=0):
    """Targeted Carlini-Wagner L2 attack.

    Optimises ``w`` with ``x' = (tanh(w) + 1) / 2`` so the box constraint holds
    by construction, minimising ``||x' - x||^2 + c * max(max_{i!=t} Z_i - Z_t, -kappa)``
    with Adam.  The constant ``c`` doubles after a failed round and is bisected
    after a successful one.  Returns the successful point with smallest L2, or
    the clean input (``success=False``) if no round succeeded.
    """
    x = as_image(x)
    original = int(classify(model, x))
    _check_target(model, target, original)
    rng = np.random.default_rng(seed)
    w0 = np.arctanh((2.0 * x - 1.0) * (1.0 - 1e-6))
    if init_jitter > 0:
        w0 = w0 + init_jitter * rng.standard_normal(x.shape)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    lo, hi, c = 0.0, math.inf, c_init
    best_l2, best_adv = math.inf, None
    trace = []
    total = 0
    for _ in range(binary_search_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        round_best = math.inf
        prev = math.inf
        for step in range(1, steps + 1):
            x_adv = (np.tanh(w) + 1.0) / 2.0
            z, gmargin = input_gradient(model, x_adv, ("cw-loss", target, kappa), return_logits=True)
            others = z.copy()
            others[target] = -np.inf
            margin = np.max(others) - z[target]
            delta = x_adv - x
            l2sq = float(np.sum(delta * delta))
            loss = l2sq + c * max(margin, -kappa)
            if int(np.argmax(z)) == target and l2sq < round_best ** 2:
                round_best = math.sqrt(l2sq)
                if round_best < best_l2:
                    best_l2, best_adv = round_best, x_adv
            grad_x = 2.0 * delta
            if margin > -kappa:
                grad_x = grad_x + c * gmargin
            grad_w = grad_x * (1.0 - np.tanh(w) ** 2) / 2.0
            m = beta1 * m + (1 - beta1) * grad_w
            v = beta2 * v + (1 - beta2) * grad_w ** 2
            mhat = m / (1 - beta1 ** step)
            vhat = v / (1 - beta2 ** step)
            w = w - lr * mhat / (np.sqrt(vhat) + eps)
            total += 1
            if abort_early and step % max(steps // 10, 1) == 0:
                if loss > prev * 0.9999:
                    break
                prev = loss
        trace.append((c, round_best))
        if round_best < math.inf:
            hi = min(hi, c)
            c = (lo + hi) / 2.0
        else:
            lo = max(lo, c)
            c = c * 2.0 if hi == math.inf else (lo + hi) / 2.0
    adv = best_adv if best_adv is not None else x
    return _result(model, x, adv, original, total, "cw", target, trace)


ATTACKS = {"deepfool": deepfool, "jsma": jsma, "cw": cw_l2}
TARGETED = {"jsma", "cw"}
