"""Central finite-difference oracle shared by the gradient tests."""

from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np

from patchbmi import tensor as T
from patchbmi.model import PARAM_NAMES, PatchModelParams, forward, init_weights
from patchbmi.tensor import GradTape, Tensor, backward

H = 1e-5
# Entries whose true derivative is below this magnitude are compared on an
# absolute scale; a relative error is meaningless for values that small.
FLOOR = 1e-6


def relative_error(a, b, floor: float = FLOOR) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def analytic_grads(build: Callable[[Dict[str, Tensor]], Tensor],
                   arrays: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
               for k, v in arrays.items()}
    with GradTape() as tape:
        loss = build(tensors)
    backward(loss, tape)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in tensors.items()}


def gradcheck(build: Callable[[Dict[str, Tensor]], Tensor], arrays: Dict[str, np.ndarray],
              max_entries: Optional[int] = None, directions: int = 0,
              rng: Optional[np.random.Generator] = None, h: float = H) -> Dict[str, float]:
    """Worst relative error per input between backward and central differences.

    Every entry is probed unless the tensor has more than ``max_entries``
    elements, in which case a random subset is. ``directions`` extra random
    directional derivatives cover the unprobed entries collectively.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    base = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    grads = analytic_grads(build, base)
    worst = {}
    for name, x0 in base.items():
        def f(x):
            inputs = dict(base)
            inputs[name] = x
            return build({k: Tensor(v) for k, v in inputs.items()}).item()

        x = x0.copy()
        flat = x.reshape(-1)
        g = grads[name].reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        errs = [0.0]
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x)
            flat[i] = orig - h
            fm = f(x)
            flat[i] = orig
            errs.append(float(relative_error(g[i], (fp - fm) / (2 * h))))
        for _ in range(directions):
            d = rng.standard_normal(x0.shape)
            d /= np.linalg.norm(d)
            num = (f(x0 + h * d) - f(x0 - h * d)) / (2 * h)
            errs.append(float(relative_error(float((grads[name] * d).sum()), num)))
        worst[name] = max(errs)
    return worst


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar loss sum(out * weights), so every output entry matters."""
    return T.sum(T.mul(out, Tensor(weights)))


def model_gradcheck(seed: int = 5, max_entries: int = 400, directions: int = 3) -> Dict[str, float]:
    """Worst relative error per parameter (and the input) for the full model, eval mode."""

    rng = np.random.default_rng(seed)
    arrays = {n: t.data.astype(np.float64) for n, t in init_weights(rng=rng).tensors().items()}
    # non-zero biases so the bias paths carry signal
    for n in ("conv1_b", "conv2_b", "fc1_b"):
        arrays[n] = rng.uniform(-0.1, 0.1, arrays[n].shape)
    arrays["patch"] = rng.uniform(-2, 2, (3, 32, 32))

    def build(t):
        return forward(PatchModelParams(**{n: t[n] for n in PARAM_NAMES}), t["patch"])

    return gradcheck(build, arrays, max_entries=max_entries, directions=directions,
                     rng=np.random.default_rng(seed + 1))


def rnd(rng, *shape):
    return rng.uniform(-2, 2, size=shape)


def op_cases():
    """name -> (build, inputs, tolerance) for every differentiable op."""
    rng = np.random.default_rng(7)
    return {
        "conv2d_pad1": (lambda t, r=rnd(rng, 4, 5, 5): weighted_sum(
            T.conv2d(t["x"], t["w"], t["b"], padding=1), r),
            {"x": rnd(rng, 2, 5, 5), "w": rnd(rng, 4, 2, 3, 3), "b": rnd(rng, 4)}, 1e-4),
        "conv2d_stride2": (lambda t, r=rnd(rng, 2, 4, 4, 3): weighted_sum(
            T.conv2d(t["x"], t["w"], stride=2, padding=1), r),
            {"x": rnd(rng, 2, 3, 7, 6), "w": rnd(rng, 4, 3, 3, 3)}, 1e-4),
        "conv2d_1x1": (lambda t, r=rnd(rng, 2, 3, 1, 1): weighted_sum(
            T.conv2d(t["x"], t["w"]), r),
            {"x": rnd(rng, 2, 4, 1, 1), "w": rnd(rng, 3, 4, 1, 1)}, 1e-4),
        "maxpool2d": (lambda t, r=rnd(rng, 3, 2, 3): weighted_sum(T.maxpool2d(t["x"]), r),
                      {"x": rnd(rng, 3, 4, 6)}, 1e-4),
        "linear": (lambda t, r=rnd(rng, 5): weighted_sum(T.linear(t["x"], t["w"], t["b"]), r),
                   {"x": rnd(rng, 7), "w": rnd(rng, 5, 7), "b": rnd(rng, 5)}, 1e-6),
        "linear_batched": (lambda t, r=rnd(rng, 3, 5): weighted_sum(T.linear(t["x"], t["w"]), r),
                           {"x": rnd(rng, 3, 7), "w": rnd(rng, 5, 7)}, 1e-6),
        "relu": (lambda t, r=rnd(rng, 20): weighted_sum(T.relu(t["x"]), r),
                 {"x": rnd(rng, 20)}, 1e-6),
        "sigmoid": (lambda t, r=rnd(rng, 20): weighted_sum(T.sigmoid(t["x"]), r),
                    {"x": rnd(rng, 20)}, 1e-6),
        "dropout": (lambda t, r=rnd(rng, 4, 4): weighted_sum(
            T.dropout(t["x"], 0.5, True, np.random.default_rng(3)), r),
            {"x": rnd(rng, 4, 4)}, 1e-4),
        "global_avg_pool": (lambda t, r=rnd(rng, 2, 3): weighted_sum(T.global_avg_pool(t["x"]), r),
                            {"x": rnd(rng, 2, 3, 4, 4)}, 1e-4),
        "mul_broadcast": (lambda t, r=rnd(rng, 2, 3, 4): weighted_sum(T.mul(t["a"], t["b"]), r),
                          {"a": rnd(rng, 2, 3, 4), "b": rnd(rng, 3, 1)}, 1e-4),
        "sub_square_mean": (lambda t: T.mean(T.square(T.sub(t["a"], t["b"]))),
                            {"a": rnd(rng, 6), "b": rnd(rng, 6)}, 1e-4),
        "reshape_add": (lambda t, r=rnd(rng, 6): weighted_sum(
            T.add(T.reshape(t["a"], (6,)), t["b"]), r),
            {"a": rnd(rng, 2, 3), "b": rnd(rng, 6)}, 1e-4),
    }
