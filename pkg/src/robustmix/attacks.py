"""White-box evasion attacks: single-step sign attack and its iterated,
projected variant, plus the per-batch randomized setting sampler used during
adversarial training.

All budgets are expressed in raw [0,1] pixel units.  Attacks read gradients
with the target in eval mode and never touch its parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, softmax_cross_entropy

__all__ = [
    "DEFAULT_FGSM_GRID",
    "DEFAULT_PGD_ITER_GRID",
    "DEFAULT_PGD_EPSILON",
    "DEFAULT_PGD_ALPHA",
    "AttackConfig",
    "AdversarialBatch",
    "input_gradient",
    "fgsm_step",
    "fgsm",
    "project_linf",
    "pgd",
    "sample_attack_setting",
]

DEFAULT_FGSM_GRID = (0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09)
DEFAULT_PGD_ITER_GRID = (10, 20, 30, 40, 50)
DEFAULT_PGD_EPSILON = 8 / 255
DEFAULT_PGD_ALPHA = 2 / 255


@dataclass(frozen=True)
class AttackConfig:
    """Attack kind plus concrete settings and the grids randomized draws use.

    epsilon may be 0 only as the degenerate identity attack (useful for the
    RA == SA sanity case); grids may likewise contain 0.
    """

    kind: str
    epsilon: float = DEFAULT_PGD_EPSILON
    alpha: float = DEFAULT_PGD_ALPHA
    iterations: int = 10
    epsilon_grid: tuple = DEFAULT_FGSM_GRID
    iteration_grid: tuple = DEFAULT_PGD_ITER_GRID

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"AttackConfig: kind must be 'fgsm' or 'pgd', got {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError(f"AttackConfig: epsilon must be >= 0, got {self.epsilon}")
        if self.kind == "pgd":
            if self.alpha <= 0:
                raise ValueError(f"AttackConfig: pgd alpha must be > 0, got {self.alpha}")
            if self.iterations < 1:
                raise ValueError(f"AttackConfig: pgd iterations must be >= 1, got {self.iterations}")


@dataclass
class AdversarialBatch:
    """Perturbed pixels plus the originals and the concrete settings used."""

    x_adv: np.ndarray
    x_ref: np.ndarray
    config_used: AttackConfig


def input_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d(cross-entropy)/d(pixels) for the current model, eval-mode, params untouched."""
    prev_mode = model.mode
    model.set_mode("eval")
    try:
        leaf = Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True)
        loss = softmax_cross_entropy(model.forward(leaf), y)
        backward(loss)
    finally:
        model.set_mode(prev_mode)
    if leaf.grad is None:
        raise ValueError("input_gradient: input gradient unavailable (input not tracked by the graph)")
    return leaf.grad


def fgsm_step(x: np.ndarray, grad: np.ndarray, epsilon: float) -> np.ndarray:
    """x + epsilon * sign(grad), boxed to [0,1].  sign(0) leaves pixels alone."""
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0)


def fgsm(model, x: np.ndarray, y: np.ndarray, epsilon: float) -> AdversarialBatch:
    """Single sign step along the input gradient of the loss.

    Args:
        model: any object with forward/set_mode providing input gradients.
        x: [N,C,H,W] pixels in [0,1].
        y: integer labels.
        epsilon: max-norm budget in pixel units.
    """
    x_ref = np.array(x, dtype=np.float64, copy=True)
    grad = input_gradient(model, x_ref, y)
    x_adv = fgsm_step(x_ref, grad, epsilon)
    cfg = AttackConfig(kind="fgsm", epsilon=epsilon)
    return AdversarialBatch(x_adv=x_adv, x_ref=x_ref, config_used=cfg)


def project_linf(candidate: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip back into the max-norm ball of radius epsilon around x.

    Elementwise: unchanged inside [x-eps, x+eps], snapped to the violated
    bound outside.
    """
    candidate = np.asarray(candidate, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if candidate.shape != x.shape:
        raise ValueError(f"project_linf: shape mismatch {candidate.shape} vs {x.shape}")
    return np.clip(candidate, x - epsilon, x + epsilon)


def pgd(
    model,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float,
    alpha: float,
    iterations: int,
    random_start: bool = False,
    rng: Optional[np.random.Generator] = None,
    on_iterate: Optional[Callable[[int, np.ndarray], None]] = None,
) -> AdversarialBatch:
    """Iterated sign steps, projected to the epsilon ball and the [0,1] box.

    Starts at x itself; ``random_start`` draws a uniform point in the ball
    instead (off by default).  The gradient is recomputed at every iterate.
    ``on_iterate`` is called with (iteration, current pixels) after each step.
    """
    if iterations < 1:
        raise ValueError(f"pgd: iterations must be >= 1, got {iterations}")
    x_ref = np.array(x, dtype=np.float64, copy=True)
    if random_start:
        if rng is None:
            raise ValueError("pgd: random_start needs an rng")
        x_adv = np.clip(x_ref + rng.uniform(-epsilon, epsilon, size=x_ref.shape), 0.0, 1.0)
    else:
        x_adv = x_ref
    for i in range(iterations):
        grad = input_gradient(model, x_adv, y)
        x_adv = np.clip(project_linf(x_adv + alpha * np.sign(grad), x_ref, epsilon), 0.0, 1.0)
        if on_iterate is not None:
            on_iterate(i, x_adv)
    cfg = AttackConfig(kind="pgd", epsilon=epsilon, alpha=alpha, iterations=iterations)
    return AdversarialBatch(x_adv=x_adv, x_ref=x_ref, config_used=cfg)


def sample_attack_setting(rng, grid: Sequence):
    """Uniform draw from a discrete grid, consuming exactly one rng event."""
    if len(grid) == 0:
        raise ValueError("sample_attack_setting: empty grid")
    idx = int(rng.integers(0, len(grid)))
    return grid[idx]
