"""Full defense pipeline: pretrain experts, assemble the mixture, train it
end to end, and evaluate both the defended and undefended models.

The master seed is the single source of randomness; every phase derives its
own sub-seed, so one master seed reproduces the whole pipeline bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import Dataset
from .evaluate import EvalReport, sweep
from .moe import (
    MixtureOfExperts,
    TrainingConfig,
    assemble_moe,
    derive_seed,
    gating_spec,
    train_benign_expert,
    train_end_to_end,
    train_fgsm_expert,
    train_pgd_expert,
)
from .nn import Model, ModelSpec, parameter_checksum

__all__ = ["PipelineResult", "pretrain_experts", "run_pipeline"]

_TRAINERS = {
    "benign": train_benign_expert,
    "fgsm": train_fgsm_expert,
    "pgd": train_pgd_expert,
}


@dataclass
class PipelineResult:
    undefended: Model
    moe: MixtureOfExperts
    undefended_report: EvalReport
    moe_report: EvalReport
    expert_roles: list
    pretrained_experts: list
    pretrained_checksums: dict
    final_checksums: dict
    expert_histories: dict
    e2e_history: list
    seed_lineage: dict = field(default_factory=dict)


def pretrain_experts(
    train_ds: Dataset,
    spec: ModelSpec,
    cfg: dict,
    composition: dict,
    expert_epochs: dict,
    master_seed: int,
):
    """Train the expert pool one role at a time; returns (experts, roles, histories)."""
    experts, roles, histories = [], [], {}
    for role in ("benign", "fgsm", "pgd"):
        for i in range(composition.get(role, 0)):
            tag = f"expert-{role}-{i}"
            tcfg = TrainingConfig(
                epochs=expert_epochs[role],
                batch_size=cfg["batch_size"],
                lr0=cfg["lr0"],
                momentum=cfg["momentum"],
                weight_decay=cfg["weight_decay"],
                seed=derive_seed(master_seed, tag),
                attack=cfg["attack"],
            )
            model, history = _TRAINERS[role](train_ds, spec, tcfg)
            experts.append(model)
            roles.append(role)
            histories[tag] = history
    return experts, roles, histories


def run_pipeline(
    train_ds: Dataset,
    test_ds: Dataset,
    spec: ModelSpec,
    training: dict,
    master_seed: int,
    fgsm_grid,
    pgd_iter_grid,
    eval_batch_size: int = 256,
    batch_inspector=None,
) -> PipelineResult:
    """Run the whole defense experiment for one master seed.

    ``training`` needs keys: batch_size, lr0, momentum, weight_decay, attack
    (an AttackConfig carrying the grids), composition, expert_epochs,
    e2e_epochs, gate_warmup_epochs.  The undefended baseline is the pretrained
    benign expert; assembly copies experts, so it survives joint training.
    """
    composition = training["composition"]
    if composition.get("benign", 0) < 1:
        raise ValueError("run_pipeline: composition needs at least one benign expert")
    experts, roles, histories = pretrain_experts(
        train_ds, spec, training, composition, training["expert_epochs"], master_seed
    )
    undefended = experts[roles.index("benign")]

    gate_seed = derive_seed(master_seed, "gate-init")
    moe = assemble_moe(experts, gating_spec(spec.input_shape, len(experts)), gate_seed, roles)
    pretrained = {f"experts.{i}": parameter_checksum(e) for i, e in enumerate(moe.experts)}

    e2e_cfg = TrainingConfig(
        epochs=training["e2e_epochs"],
        batch_size=training["batch_size"],
        lr0=training["lr0"],
        momentum=training["momentum"],
        weight_decay=training["weight_decay"],
        seed=derive_seed(master_seed, "end-to-end"),
        attack=training["attack"],
        gate_warmup_epochs=training.get("gate_warmup_epochs", 0),
    )
    moe, e2e_history = train_end_to_end(moe, train_ds, e2e_cfg, batch_inspector=batch_inspector)
    final = {f"experts.{i}": parameter_checksum(e) for i, e in enumerate(moe.experts)}

    atk = training["attack"]
    common = dict(
        fgsm_grid=fgsm_grid,
        pgd_iter_grid=pgd_iter_grid,
        pgd_epsilon=atk.epsilon,
        pgd_alpha=atk.alpha,
        batch_size=eval_batch_size,
    )
    undefended_report = sweep(undefended, test_ds, model_id="undefended", seed=master_seed, **common)
    moe_report = sweep(moe, test_ds, model_id="defense", seed=master_seed, **common)

    lineage = {
        "master": master_seed,
        "gate_init": gate_seed,
        "end_to_end": e2e_cfg.seed,
        "experts": {
            f"expert-{role}-{i}": derive_seed(master_seed, f"expert-{role}-{i}")
            for role in ("benign", "fgsm", "pgd")
            for i in range(composition.get(role, 0))
        },
    }
    return PipelineResult(
        undefended=undefended,
        moe=moe,
        undefended_report=undefended_report,
        moe_report=moe_report,
        expert_roles=roles,
        pretrained_experts=experts,
        pretrained_checksums=pretrained,
        final_checksums=final,
        expert_histories=histories,
        e2e_history=e2e_history,
        seed_lineage=lineage,
    )
