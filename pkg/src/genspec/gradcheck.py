"""Finite-difference verification of every autodiff op.

Each case builds a scalar loss as a fixed random weighting of the op output,
runs backward(), and compares against central differences. The relative error
uses max(1, |fd|) in the denominator so near-zero gradients are judged on
absolute error.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, finite_diff_grad


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(1.0, np.abs(fd))
    return float(np.max(np.abs(analytic - fd) / denom)) if fd.size else 0.0


def check_case(build, xs: list[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error over all inputs of the scalar graph build(*tensors)."""
    leaves = [Tensor(x, requires_grad=True) for x in xs]
    loss = build(*leaves)
    for leaf in leaves:
        leaf.grad = None
    loss.backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def partial(v, i=i):
            args = [Tensor(xs[j]) if j != i else v for j in range(len(xs))]
            return build(*args)

        fd = finite_diff_grad(partial, Tensor(xs[i]), h)
        got = leaf.grad if leaf.grad is not None else np.zeros_like(xs[i])
        worst = max(worst, _rel_err(got, fd))
    return worst


def op_gradient_report(seed: int = 0) -> dict[str, float]:
    """Max FD relative error per op kind; every entry should be <= 1e-4."""
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-1.0, 1.0, size=shape)

    def away_from_kink(x, margin=5e-3):
        x = x.copy()
        near = np.abs(x) < margin
        x[near] = np.where(x[near] >= 0, margin, -margin) * 2
        return x

    w_cache: dict[tuple, Tensor] = {}

    def wsum(out: Tensor) -> Tensor:
        key = out.shape
        if key not in w_cache:
            w_cache[key] = Tensor(np.random.default_rng(1234 + len(w_cache)).uniform(-1, 1, out.shape))
        return (out * w_cache[key]).sum()

    gidx = rng.integers(0, 5, size=(3, 2))
    eids = rng.integers(0, 6, size=(2, 4))

    cases = {
        "add": (lambda a, b: wsum(T.add(a, b)), [u(3, 4), u(1, 4)]),
        "sub": (lambda a, b: wsum(T.sub(a, b)), [u(3, 4), u(3, 1)]),
        "mul": (lambda a, b: wsum(T.mul(a, b)), [u(2, 3, 4), u(3, 4)]),
        "matmul": (lambda a, b: wsum(T.matmul(a, b)), [u(2, 3, 4), u(4, 5)]),
        "conv2d": (lambda x, w: wsum(T.conv2d(x, w, stride=2, pad=1)), [u(2, 3, 6, 6), u(4, 3, 3, 3)]),
        "transpose": (lambda x: wsum(T.transpose(x, (1, 2, 0))), [u(2, 3, 4)]),
        "reshape": (lambda x: wsum(T.reshape(x, (4, 6))), [u(2, 3, 4)]),
        "relu": (lambda x: wsum(T.relu(x)), [away_from_kink(u(3, 5))]),
        "gelu": (lambda x: wsum(T.gelu(x)), [u(3, 5)]),
        "sigmoid": (lambda x: wsum(T.sigmoid(x)), [u(3, 5)]),
        "exp": (lambda x: wsum(T.exp(x)), [u(3, 5)]),
        "log": (lambda x: wsum(T.log(x)), [rng.uniform(0.2, 1.0, (3, 5))]),
        "softmax": (lambda x: wsum(T.softmax(x, axis=-1)), [u(3, 5)]),
        "layernorm": (lambda x, g, b: wsum(T.layernorm(x, g, b)), [u(3, 6), u(6), u(6)]),
        "sum": (lambda x: wsum(T.sum_(x, axis=1)), [u(3, 4, 2)]),
        "mean": (lambda x: wsum(T.mean(x, axis=(0, 2), keepdims=True)), [u(3, 4, 2)]),
        "gather": (lambda x: wsum(T.gather(x, gidx, axis=-1)), [u(3, 5)]),
        "embed": (lambda tab: wsum(T.embed(tab, eids)), [u(6, 3)]),
        "concat": (lambda a, b: wsum(T.concat([a, b], axis=1)), [u(2, 3), u(2, 2)]),
        "slice": (lambda x: wsum(x[1:, ::2]), [u(4, 6)]),
    }

    report = {}
    for name, (build, xs) in cases.items():
        report[name] = check_case(build, xs)
    return report


def stop_gradient_error(seed: int = 0) -> float:
    """stop_gradient cannot be FD-checked (FD sees through a value identity),
    so compare backward() of x*x + sg(3x) against the analytic 2x directly."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    loss = T.sum_(T.mul(x, x) + T.stop_gradient(x * 3.0))
    loss.backward()
    if not np.array_equal(
        (T.mul(x, x) + T.stop_gradient(x * 3.0)).data, (x.data * x.data) + 3.0 * x.data
    ):
        return float("inf")  # forward must still pass the value
    return float(np.max(np.abs(x.grad - 2.0 * x.data)))


def mlp_gradient_error(seed: int = 0) -> float:
    """FD cross-check on a random 3-layer MLP, the composite-graph oracle."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (4, 6))
    params = [
        rng.uniform(-1, 1, (6, 8)),
        rng.uniform(-1, 1, (8,)),
        rng.uniform(-1, 1, (8, 8)),
        rng.uniform(-1, 1, (8,)),
        rng.uniform(-1, 1, (8, 3)),
        rng.uniform(-1, 1, (3,)),
    ]

    def build(w1, b1, w2, b2, w3, b3):
        h1 = T.gelu(T.matmul(Tensor(x), w1) + b1)
        h2 = T.relu(T.matmul(h1, w2) + b2)
        out = T.softmax(T.matmul(h2, w3) + b3, axis=-1)
        return T.sum_(T.mul(out, out))

    return check_case(build, params)
