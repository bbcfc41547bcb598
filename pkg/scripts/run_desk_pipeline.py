#!/usr/bin/env python3
"""Desk-scale defense experiment: pretrain experts, train the mixture end to
end, and write accuracy/robustness sweep CSVs for the undefended baseline and
the defense, repeated over several master seeds, plus aggregate statistics.

Usage:
    python scripts/run_desk_pipeline.py --seeds 0 1 2 --out runs/desk
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from robustmix.checkpoint import save_checkpoint
from robustmix.cli import _training_section
from robustmix.config import build_datasets, build_model_spec, load_config
from robustmix.evaluate import multi_run_stats, render_report_csv, render_stats_csv
from robustmix.pipeline import run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None, help="JSON experiment config (defaults are desk scale)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()

    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = build_datasets(cfg)
    spec = build_model_spec(cfg, train_ds)
    print(f"data: {train_ds.name}, {len(train_ds)} train / {len(test_ds)} test, "
          f"{train_ds.class_count} classes")

    undefended_reports, defense_reports = [], []
    for seed in args.seeds:
        start = time.perf_counter()
        result = run_pipeline(
            train_ds, test_ds, spec, _training_section(cfg), master_seed=seed,
            fgsm_grid=tuple(cfg["eval"]["fgsm_grid"]),
            pgd_iter_grid=tuple(cfg["eval"]["pgd_iteration_grid"]),
            eval_batch_size=cfg["eval"]["batch_size"],
        )
        minutes = (time.perf_counter() - start) / 60
        u, d = result.undefended_report, result.moe_report
        print(f"seed {seed} ({minutes:.1f} min): undefended SA {u.sa:.3f} | defense SA {d.sa:.3f}, "
              f"RA fgsm@0.03 {u.ra_fgsm.get(0.03, float('nan')):.3f} -> "
              f"{d.ra_fgsm.get(0.03, float('nan')):.3f}, "
              f"RA pgd-10 {u.ra_pgd.get(10, float('nan')):.3f} -> {d.ra_pgd.get(10, float('nan')):.3f}")
        run_dir = out / f"seed-{seed}"
        save_checkpoint(result.undefended, run_dir / "undefended",
                        seed_lineage=result.seed_lineage, metadata={"model_id": "undefended"})
        save_checkpoint(result.moe, run_dir / "moe",
                        seed_lineage=result.seed_lineage,
                        metadata={"model_id": "defense", "roles": result.expert_roles})
        (run_dir / "reports.csv").write_text(render_report_csv([u, d]))
        undefended_reports.append(u)
        defense_reports.append(d)

    if len(args.seeds) >= 2:
        (out / "stats-undefended.csv").write_text(render_stats_csv(multi_run_stats(undefended_reports)))
        (out / "stats-defense.csv").write_text(render_stats_csv(multi_run_stats(defense_reports)))
        print(f"aggregate stats: {out}/stats-undefended.csv, {out}/stats-defense.csv")
    print(f"artifacts in {out}")


if __name__ == "__main__":
    main()
