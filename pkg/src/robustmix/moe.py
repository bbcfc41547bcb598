"""Soft mixture-of-experts defense: gating network, fractional aggregation,
expert pretraining on attacked batches, and joint end-to-end training on
mixed benign+adversarial batches.

Every expert sees every input; the gate assigns per-sample softmax weights
and the aggregate is the weighted sum of expert logits.  Nothing is frozen
during the end-to-end phase: one optimizer step updates the gate and all
experts together.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .attacks import (
    DEFAULT_PGD_ALPHA,
    DEFAULT_PGD_EPSILON,
    AttackConfig,
    fgsm,
    pgd,
    sample_attack_setting,
)
from .data import BatchPlan, Dataset, make_batches
from .errors import DivergenceError
from .nn import (
    LrSchedule,
    Model,
    ModelSpec,
    build_model,
    cosine_lr,
    init_optimizer,
    mlp_spec,
    sgd_step,
)
from .tensor import Tensor, backward, softmax, softmax_cross_entropy, weighted_sum

__all__ = [
    "derive_seed",
    "gating_spec",
    "gating_forward",
    "MixtureOfExperts",
    "moe_forward",
    "assemble_moe",
    "TrainingConfig",
    "StepRecord",
    "train_benign_expert",
    "train_fgsm_expert",
    "train_pgd_expert",
    "train_end_to_end",
]


def derive_seed(master: int, tag: str) -> int:
    """Stable sub-seed for one named randomness source under a master seed."""
    digest = hashlib.sha256(f"{master}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def gating_spec(input_shape, n_experts: int, widths: Optional[Sequence[int]] = None) -> ModelSpec:
    """Feed-forward gate on raw flattened pixels ending in n_experts logits.

    Hidden widths default to (1024, 512, 128) scaled proportionally to the
    flattened input size relative to 32x32 RGB.
    """
    flat = int(np.prod(input_shape))
    if widths is None:
        ratio = flat / 3072
        widths = [max(16, round(w * ratio)) for w in (1024, 512, 128)]
    return mlp_spec(input_shape, tuple(widths), n_experts)


def gating_forward(gate: Model, x) -> Tensor:
    """Softmax-normalized per-sample expert weights, differentiable throughout."""
    logits = gate.forward(x if isinstance(x, Tensor) else Tensor(x))
    return softmax(logits, axis=1)


class MixtureOfExperts:
    """Ordered experts plus a gate; forward is the weighted sum of Eq-style
    fractional activation (all experts score every sample)."""

    def __init__(self, experts: Sequence[Model], gate: Model, expert_roles: Optional[Sequence[str]] = None):
        experts = list(experts)
        if not experts:
            raise ValueError("MixtureOfExperts: need at least one expert")
        in_shape = experts[0].spec.input_shape
        classes = experts[0].spec.num_classes
        for i, e in enumerate(experts):
            if e.spec.input_shape != in_shape or e.spec.num_classes != classes:
                raise ValueError(
                    f"MixtureOfExperts: expert {i} has shape {e.spec.input_shape}/{e.spec.num_classes}, "
                    f"expected {in_shape}/{classes}"
                )
        if gate.spec.num_classes != len(experts):
            raise ValueError(
                f"MixtureOfExperts: gate outputs {gate.spec.num_classes} weights for {len(experts)} experts"
            )
        if gate.spec.input_shape != in_shape:
            raise ValueError("MixtureOfExperts: gate input shape differs from experts")
        roles = list(expert_roles) if expert_roles is not None else ["unknown"] * len(experts)
        if len(roles) != len(experts):
            raise ValueError("MixtureOfExperts: one role per expert required")
        self.experts = experts
        self.gate = gate
        self.expert_roles = roles
        self.mode = "train"

    @property
    def n(self) -> int:
        return len(self.experts)

    @property
    def num_classes(self) -> int:
        return self.experts[0].spec.num_classes

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        weights = gating_forward(self.gate, x)
        logits = [e.forward(x) for e in self.experts]
        return weighted_sum(logits, weights)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, e in enumerate(self.experts):
            for name, p in e.parameters().items():
                out[f"experts.{i}.{name}"] = p
        for name, p in self.gate.parameters().items():
            out[f"gate.{name}"] = p
        return out

    def gate_parameters(self) -> dict[str, Tensor]:
        return {f"gate.{name}": p for name, p in self.gate.parameters().items()}

    def set_mode(self, mode: str) -> "MixtureOfExperts":
        for e in self.experts:
            e.set_mode(mode)
        self.gate.set_mode(mode)
        self.mode = mode
        return self

    def copy(self) -> "MixtureOfExperts":
        return MixtureOfExperts([e.copy() for e in self.experts], self.gate.copy(), list(self.expert_roles))


def moe_forward(moe: MixtureOfExperts, x) -> Tensor:
    return moe.forward(x)


def assemble_moe(
    experts: Sequence[Model],
    gate_spec: ModelSpec,
    seed: int,
    roles: Optional[Sequence[str]] = None,
) -> MixtureOfExperts:
    """Fresh gate, experts adopted as copies so pretrained weights survive
    later end-to-end updates of the assembly."""
    gate = build_model(gate_spec, seed)
    return MixtureOfExperts([e.copy() for e in experts], gate, roles)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingConfig:
    epochs: int
    batch_size: int
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eta_min: float = 0.0
    t_max: Optional[int] = None  # defaults to epochs * steps_per_epoch
    seed: int = 0
    attack: AttackConfig = field(
        default_factory=lambda: AttackConfig(
            kind="pgd", epsilon=DEFAULT_PGD_EPSILON, alpha=DEFAULT_PGD_ALPHA
        )
    )
    gate_warmup_epochs: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr0 < 0:
            raise ValueError("TrainingConfig: epochs and batch_size must be >= 1 and lr0 >= 0")


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    loss: float
    epsilon: Optional[float] = None
    iterations: Optional[int] = None
    batch_shape: Optional[tuple] = None


def _training_loop(
    target,
    ds: Dataset,
    cfg: TrainingConfig,
    make_batch: Callable,
    params_for_step: Optional[Callable[[int], dict]] = None,
) -> list[StepRecord]:
    plan = BatchPlan(cfg.batch_size, shuffle=True, seed=derive_seed(cfg.seed, "shuffle"))
    steps_per_epoch = len(make_batches(ds, plan, 0))
    total = cfg.t_max if cfg.t_max is not None else cfg.epochs * steps_per_epoch
    sched = LrSchedule(lr0=cfg.lr0, eta_min=cfg.eta_min, t_max=max(total, 1))
    state = init_optimizer(target, cfg.lr0, cfg.momentum, cfg.weight_decay)
    history: list[StepRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        for x, y in make_batches(ds, plan, epoch):
            x_train, y_train, record = make_batch(x, y)
            target.set_mode("train")
            logits = target.forward(Tensor(x_train))
            loss = softmax_cross_entropy(logits, y_train)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise DivergenceError(
                    f"training diverged: loss={loss_value} at epoch {epoch} step {step} (lr={state.lr})"
                )
            backward(loss)
            params = params_for_step(epoch) if params_for_step else (
                target.parameters() if hasattr(target, "parameters") else target
            )
            grads = {name: p.grad for name, p in params.items()}
            state.lr = cosine_lr(step, sched)
            sgd_step(params, grads, state)
            record.epoch = epoch
            record.step = step
            record.lr = state.lr
            record.loss = loss_value
            history.append(record)
            step += 1
    return history


def train_benign_expert(ds: Dataset, spec: ModelSpec, cfg: TrainingConfig) -> tuple[Model, list[StepRecord]]:
    """Plain supervised training on clean batches."""
    model = build_model(spec, derive_seed(cfg.seed, "init"))

    def make_batch(x, y):
        return x, y, StepRecord(0, 0, 0.0, 0.0, batch_shape=x.shape)

    history = _training_loop(model, ds, cfg, make_batch)
    return model, history


def train_fgsm_expert(ds: Dataset, spec: ModelSpec, cfg: TrainingConfig) -> tuple[Model, list[StepRecord]]:
    """Adversarial training on single-step attacks only.

    One budget is drawn per batch from the configured grid and the model
    trains on the attacked batch alone, no clean samples.
    """
    model = build_model(spec, derive_seed(cfg.seed, "init"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "fgsm-draws"))
    grid = cfg.attack.epsilon_grid

    def make_batch(x, y):
        eps = sample_attack_setting(rng, grid)
        batch = fgsm(model, x, y, eps)
        return batch.x_adv, y, StepRecord(0, 0, 0.0, 0.0, epsilon=eps, batch_shape=batch.x_adv.shape)

    history = _training_loop(model, ds, cfg, make_batch)
    return model, history


def train_pgd_expert(ds: Dataset, spec: ModelSpec, cfg: TrainingConfig) -> tuple[Model, list[StepRecord]]:
    """Adversarial training on projected iterative attacks only.

    The iteration count is drawn per batch; budget and step size come from
    the attack config.
    """
    model = build_model(spec, derive_seed(cfg.seed, "init"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "pgd-draws"))
    atk = cfg.attack

    def make_batch(x, y):
        iters = sample_attack_setting(rng, atk.iteration_grid)
        batch = pgd(model, x, y, atk.epsilon, atk.alpha, iters)
        return batch.x_adv, y, StepRecord(0, 0, 0.0, 0.0, iterations=iters, batch_shape=batch.x_adv.shape)

    history = _training_loop(model, ds, cfg, make_batch)
    return model, history


def train_end_to_end(
    moe: MixtureOfExperts,
    ds: Dataset,
    cfg: TrainingConfig,
    batch_inspector: Optional[Callable[[np.ndarray, np.ndarray, StepRecord], None]] = None,
) -> tuple[MixtureOfExperts, list[StepRecord]]:
    """Joint training of gate and all experts on mixed batches.

    Each batch of size B yields a single-step attacked copy (budget drawn from
    the grid) and an iterated attacked copy (iteration count drawn from the
    grid), both generated against the current assembly.  The training batch is
    the concatenation [x, x_single, x_iter] of size 3B with labels repeated
    three times, and one optimizer step updates every parameter.

    ``gate_warmup_epochs`` > 0 restricts the first epochs to gate parameters.
    """
    if not isinstance(moe, MixtureOfExperts):
        raise ValueError("train_end_to_end: expected an assembled MixtureOfExperts")
    rng_f = np.random.default_rng(derive_seed(cfg.seed, "fgsm-draws"))
    rng_p = np.random.default_rng(derive_seed(cfg.seed, "pgd-draws"))
    atk = cfg.attack

    def make_batch(x, y):
        eps = sample_attack_setting(rng_f, atk.epsilon_grid)
        x_f = fgsm(moe, x, y, eps).x_adv
        iters = sample_attack_setting(rng_p, atk.iteration_grid)
        x_p = pgd(moe, x, y, atk.epsilon, atk.alpha, iters).x_adv
        x_mixed = np.concatenate([x, x_f, x_p], axis=0)
        y_mixed = np.concatenate([y, y, y])
        record = StepRecord(0, 0, 0.0, 0.0, epsilon=eps, iterations=iters, batch_shape=x_mixed.shape)
        if batch_inspector is not None:
            batch_inspector(x_mixed, y_mixed, record)
        return x_mixed, y_mixed, record

    def params_for_step(epoch):
        if epoch < cfg.gate_warmup_epochs:
            return moe.gate_parameters()
        return moe.parameters()

    history = _training_loop(moe, ds, cfg, make_batch, params_for_step)
    return moe, history
