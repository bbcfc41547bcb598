"""Command line surface.

Subcommands: train-expert, train-moe, eval, sweep, stats, gradcheck.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .attacks import AttackConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    build_datasets,
    build_model_spec,
    build_training_config,
    load_config,
    parse_data_arg,
)
from .errors import CheckpointError, DataFormatError, DivergenceError, UsageError
from .evaluate import (
    EvalReport,
    multi_run_stats,
    parse_report_csv,
    render_report_csv,
    render_stats_csv,
    robust_accuracy,
    standard_accuracy,
)
from .gradcheck import GRADCHECK_TOLERANCE, random_network_suite
from .moe import derive_seed
from .pipeline import run_pipeline

__all__ = ["run_cli", "main"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="robustmix", description=__doc__)
    parser.add_argument("--version", action="version", version=f"robustmix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--data", help="dataset path or synth spec (synth:kind,n=...,classes=...,side=...,seed=...)")

    p = sub.add_parser("train-expert", help="pretrain one expert")
    p.add_argument("--kind", required=True, choices=["benign", "fgsm", "pgd"])
    common(p)

    p = sub.add_parser("train-moe", help="pretrain experts, assemble, train end to end")
    common(p)

    p = sub.add_parser("eval", help="standard + robust accuracy at one attack setting")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--attack-kind", default="fgsm", choices=["fgsm", "pgd"])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--iterations", type=int)
    common(p)

    p = sub.add_parser("sweep", help="full accuracy/robustness grid")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    common(p)

    p = sub.add_parser("stats", help="aggregate several sweep CSVs")
    p.add_argument("inputs", nargs="+", help="sweep CSV files")
    p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--networks", type=int, default=25)
    p.add_argument("--seed", type=int, default=90210)
    return parser


def _prepare(args):
    cfg = load_config(args.config)
    if getattr(args, "data", None):
        cfg["data"].update(parse_data_arg(args.data))
    if getattr(args, "seed", None) is not None:
        cfg["training"]["seed"] = args.seed
    train_ds, test_ds = build_datasets(cfg)
    spec = build_model_spec(cfg, train_ds)
    return cfg, train_ds, test_ds, spec


def _training_section(cfg) -> dict:
    t = dict(cfg["training"])
    t["attack"] = AttackConfig(
        kind="pgd",
        epsilon=cfg["attack"]["epsilon"],
        alpha=cfg["attack"]["alpha"],
        iterations=cfg["attack"]["iterations"],
        epsilon_grid=tuple(cfg["attack"]["epsilon_grid"]),
        iteration_grid=tuple(cfg["attack"]["iteration_grid"]),
    )
    return t


def _cmd_train_expert(args) -> int:
    cfg, train_ds, _, spec = _prepare(args)
    master = cfg["training"]["seed"]
    epochs = cfg["training"]["expert_epochs"][args.kind]
    tcfg = build_training_config(cfg, epochs=epochs, seed=derive_seed(master, f"expert-{args.kind}-0"))
    from .moe import train_benign_expert, train_fgsm_expert, train_pgd_expert

    trainer = {"benign": train_benign_expert, "fgsm": train_fgsm_expert, "pgd": train_pgd_expert}[args.kind]
    model, history = trainer(train_ds, spec, tcfg)
    out = Path(args.out)
    ckpt = out / f"expert-{args.kind}"
    save_checkpoint(
        model,
        ckpt,
        seed_lineage={"master": master, "expert": tcfg.seed},
        metadata={"model_id": f"expert-{args.kind}", "role": args.kind, "epochs": epochs},
    )
    trace = out / f"expert-{args.kind}-loss.csv"
    trace.write_text("step,loss,lr\n" + "".join(f"{r.step},{r.loss!r},{r.lr!r}\n" for r in history))
    print(f"trained {args.kind} expert: final loss {history[-1].loss:.4f}")
    print(f"checkpoint: {ckpt}")
    print(f"loss trace: {trace}")
    return 0


def _cmd_train_moe(args) -> int:
    if not args.config:
        raise UsageError("train-moe requires --config")
    cfg, train_ds, test_ds, spec = _prepare(args)
    master = cfg["training"]["seed"]
    result = run_pipeline(
        train_ds,
        test_ds,
        spec,
        _training_section(cfg),
        master,
        fgsm_grid=tuple(cfg["eval"]["fgsm_grid"]),
        pgd_iter_grid=tuple(cfg["eval"]["pgd_iteration_grid"]),
        eval_batch_size=cfg["eval"]["batch_size"],
    )
    out = Path(args.out)
    save_checkpoint(result.undefended, out / "undefended", seed_lineage=result.seed_lineage,
                    metadata={"model_id": "undefended"})
    save_checkpoint(result.moe, out / "moe", seed_lineage=result.seed_lineage,
                    metadata={"model_id": "defense", "roles": result.expert_roles})
    report_csv = render_report_csv([result.undefended_report, result.moe_report])
    (out / "reports.csv").write_text(report_csv)
    print(report_csv, end="")
    print(f"checkpoints: {out / 'undefended'}, {out / 'moe'}")
    print(f"reports: {out / 'reports.csv'}")
    return 0


def _load_eval_target(args):
    model = load_checkpoint(args.ckpt)
    manifest = json.loads((Path(args.ckpt) / "manifest.json").read_text())
    model_id = manifest.get("metadata", {}).get("model_id") or Path(args.ckpt).name
    return model, model_id


def _cmd_eval(args) -> int:
    cfg, _, test_ds, _ = _prepare(args)
    model, model_id = _load_eval_target(args)
    a = cfg["attack"]
    kind = args.attack_kind
    atk = AttackConfig(
        kind=kind,
        epsilon=args.epsilon if args.epsilon is not None else (0.03 if kind == "fgsm" else a["epsilon"]),
        alpha=args.alpha if args.alpha is not None else a["alpha"],
        iterations=args.iterations if args.iterations is not None else a["iterations"],
    )
    sa = standard_accuracy(model, test_ds, cfg["eval"]["batch_size"])
    ra = robust_accuracy(model, test_ds, atk, cfg["eval"]["batch_size"])
    report = EvalReport(
        model_id=model_id,
        sa=sa,
        ra_fgsm={float(atk.epsilon): ra} if kind == "fgsm" else {},
        ra_pgd={int(atk.iterations): ra} if kind == "pgd" else {},
        n_test=len(test_ds),
        seed=cfg["training"]["seed"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_text = render_report_csv(report)
    (out / f"eval-{model_id}.csv").write_text(csv_text)
    print(csv_text, end="")
    return 0


def _cmd_sweep(args) -> int:
    cfg, _, test_ds, _ = _prepare(args)
    model, model_id = _load_eval_target(args)
    from .evaluate import sweep as run_sweep

    report = run_sweep(
        model,
        test_ds,
        model_id=model_id,
        seed=cfg["training"]["seed"],
        fgsm_grid=tuple(cfg["eval"]["fgsm_grid"]),
        pgd_iter_grid=tuple(cfg["eval"]["pgd_iteration_grid"]),
        pgd_epsilon=cfg["attack"]["epsilon"],
        pgd_alpha=cfg["attack"]["alpha"],
        batch_size=cfg["eval"]["batch_size"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_text = render_report_csv(report)
    (out / f"sweep-{model_id}.csv").write_text(csv_text)
    print(csv_text, end="")
    return 0


def _cmd_stats(args) -> int:
    reports = []
    for path in args.inputs:
        p = Path(path)
        if not p.is_file():
            raise DataFormatError(f"stats: no such file {p}")
        reports.extend(parse_report_csv(p.read_text()))
    stats = multi_run_stats(reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_text = render_stats_csv(stats)
    (out / "stats.csv").write_text(csv_text)
    print(csv_text, end="")
    return 0


def _cmd_gradcheck(args) -> int:
    worst = random_network_suite(count=args.networks, master_seed=args.seed)
    print(f"gradcheck: {args.networks} networks, max relative error {worst:.3e} "
          f"(tolerance {GRADCHECK_TOLERANCE:.0e})")
    if worst < GRADCHECK_TOLERANCE:
        print("gradcheck: PASS")
        return 0
    print("gradcheck: FAIL")
    return 3


_HANDLERS = {
    "train-expert": _cmd_train_expert,
    "train-moe": _cmd_train_moe,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "stats": _cmd_stats,
    "gradcheck": _cmd_gradcheck,
}


def run_cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if hasattr(args, "out"):
            Path(args.out).mkdir(parents=True, exist_ok=True)
        return _HANDLERS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataFormatError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except SystemExit as e:  # argparse --help/--version
        return int(e.code or 0)


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
