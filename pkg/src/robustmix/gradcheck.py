"""Finite-difference oracles for verifying reverse-mode gradients.

Central differences are computed by forward evaluation only, so they stay
independent of the backward pass they check.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import (
    Tensor,
    backward,
    bias_add,
    conv2d,
    matmul,
    relu,
    reshape,
    softmax_cross_entropy,
)

__all__ = [
    "GRADCHECK_TOLERANCE",
    "finite_difference_check",
    "check_tensors",
    "random_network_check",
    "random_network_suite",
]

GRADCHECK_TOLERANCE = 1e-4


def _relative_error(fd: np.ndarray, analytic: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1e-8)
    return float(np.max(np.abs(fd - analytic) / denom))


def finite_difference_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences of f.

    ``f`` maps one tensor to a scalar tensor.  Every coordinate is perturbed
    by +-h; the relative error denominator is max(|a|, |b|, 1e-8).
    """
    if h <= 0:
        raise ValueError(f"finite_difference_check: h must be positive, got {h}")
    base = np.array(getattr(point, "data", point), dtype=np.float64, copy=True)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("finite_difference_check: f must return a scalar tensor")
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    fd = np.zeros_like(base)
    fd_flat = fd.reshape(-1)
    for i in range(base.size):
        pert = base.copy()
        pert.reshape(-1)[i] += h
        fp = f(Tensor(pert)).item()
        pert.reshape(-1)[i] -= 2 * h
        fm = f(Tensor(pert)).item()
        fd_flat[i] = (fp - fm) / (2 * h)
    return _relative_error(fd, analytic)


def check_tensors(make_loss: Callable[[], Tensor], tensors: Mapping[str, Tensor], h: float = 1e-5) -> float:
    """Gradient-check several leaves of one loss at once.

    ``make_loss`` rebuilds the scalar loss from the current tensor values; the
    tensors are perturbed in place coordinate by coordinate and restored.
    Returns the max relative error over all tensors and coordinates.
    """
    if h <= 0:
        raise ValueError(f"check_tensors: h must be positive, got {h}")
    loss = make_loss()
    if loss.data.size != 1:
        raise ValueError("check_tensors: make_loss must return a scalar tensor")
    backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }

    worst = 0.0
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = make_loss().item()
            flat[i] = orig - h
            fm = make_loss().item()
            flat[i] = orig
            fd[i] = (fp - fm) / (2 * h)
        worst = max(worst, _relative_error(fd.reshape(t.data.shape), analytic[name]))
    return worst


def _sample_network(rng: np.random.Generator):
    """Draw a small conv+dense+relu classifier whose relu pre-activations sit
    away from zero, so finite differences never straddle a kink."""
    margin = 1e-3
    n = 2
    c_in = int(rng.integers(1, 3))
    c1 = int(rng.integers(2, 4))
    c2 = int(rng.integers(2, 4))
    hidden = int(rng.integers(3, 6))
    classes = int(rng.integers(2, 4))
    side = 5
    y = rng.integers(0, classes, size=n)

    for _ in range(200):
        tensors = {
            "x": Tensor(rng.uniform(-1.0, 1.0, size=(n, c_in, side, side)), requires_grad=True),
            "conv1.w": Tensor(rng.uniform(-0.6, 0.6, size=(c1, c_in, 3, 3)), requires_grad=True),
            "conv1.b": Tensor(rng.uniform(-0.3, 0.3, size=c1), requires_grad=True),
            "conv2.w": Tensor(rng.uniform(-0.6, 0.6, size=(c2, c1, 2, 2)), requires_grad=True),
            "conv2.b": Tensor(rng.uniform(-0.3, 0.3, size=c2), requires_grad=True),
            "fc1.w": Tensor(rng.uniform(-0.5, 0.5, size=(c2 * 4 * 4, hidden)), requires_grad=True),
            "fc1.b": Tensor(rng.uniform(-0.3, 0.3, size=hidden), requires_grad=True),
            "fc2.w": Tensor(rng.uniform(-0.5, 0.5, size=(hidden, classes)), requires_grad=True),
            "fc2.b": Tensor(rng.uniform(-0.3, 0.3, size=classes), requires_grad=True),
        }

        preacts = []

        def make_loss(t=tensors, record=None):
            h1 = bias_add(conv2d(t["x"], t["conv1.w"], stride=1, padding=1), t["conv1.b"])
            if record is not None:
                record.append(h1)
            a1 = relu(h1)
            h2 = bias_add(conv2d(a1, t["conv2.w"], stride=1, padding=0), t["conv2.b"])
            if record is not None:
                record.append(h2)
            a2 = relu(h2)
            flat = reshape(a2, (n, -1))
            h3 = bias_add(matmul(flat, t["fc1.w"]), t["fc1.b"])
            if record is not None:
                record.append(h3)
            a3 = relu(h3)
            logits = bias_add(matmul(a3, t["fc2.w"]), t["fc2.b"])
            return softmax_cross_entropy(logits, y)

        make_loss(record=preacts)
        if min(float(np.min(np.abs(p.data))) for p in preacts) > margin:
            return make_loss, tensors
    raise RuntimeError("could not sample a network with safe relu margins")


def random_network_check(seed: int, h: float = 1e-5) -> float:
    """Gradient-check one random small network; returns max relative error."""
    rng = np.random.default_rng(seed)
    make_loss, tensors = _sample_network(rng)
    return check_tensors(make_loss, tensors, h=h)


def random_network_suite(count: int = 100, master_seed: int = 90210, h: float = 1e-5) -> float:
    """Run ``count`` seeded random-network checks; returns the worst error."""
    worst = 0.0
    for i in range(count):
        worst = max(worst, random_network_check(master_seed + i, h=h))
    return worst
