"""Standard/robust accuracy metrics, grid sweeps, and multi-run statistics.

Accuracies are exact sample fractions internally; the CSV renders them as
percentages with two decimals plus the sample count, so parsing recovers the
exact fractions (counts are unambiguous for up to 10000 samples, and larger
reports fall back to full-precision percentages).
"""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass

import numpy as np

from .attacks import (
    DEFAULT_FGSM_GRID,
    DEFAULT_PGD_ALPHA,
    DEFAULT_PGD_EPSILON,
    DEFAULT_PGD_ITER_GRID,
    AttackConfig,
    fgsm,
    pgd,
)
from .data import Dataset
from .tensor import Tensor

__all__ = [
    "EvalReport",
    "RunStatistics",
    "PointStats",
    "standard_accuracy",
    "robust_accuracy",
    "sweep",
    "multi_run_stats",
    "render_report_csv",
    "parse_report_csv",
    "render_stats_csv",
    "REPORT_CSV_HEADER",
]

REPORT_CSV_HEADER = ("model", "metric", "setting", "accuracy")


@dataclass
class EvalReport:
    """One Table-style row: standard accuracy plus robust accuracy grids."""

    model_id: str
    sa: float
    ra_fgsm: dict
    ra_pgd: dict
    n_test: int
    seed: int

    def __post_init__(self):
        for v in [self.sa, *self.ra_fgsm.values(), *self.ra_pgd.values()]:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"EvalReport: accuracy {v} outside [0,1]")


@dataclass
class PointStats:
    vmin: float
    q1: float
    median: float
    q3: float
    vmax: float
    mean: float
    stddev: float


@dataclass
class RunStatistics:
    """Order statistics per grid point over repeated runs (population stddev)."""

    sa: PointStats
    ra_fgsm: dict
    ra_pgd: dict
    runs: int


def _predict_correct(model, images: np.ndarray, labels: np.ndarray) -> int:
    logits = model.forward(Tensor(images))
    return int(np.sum(np.argmax(logits.data, axis=1) == labels))


def standard_accuracy(model, ds: Dataset, batch_size: int = 256) -> float:
    """Fraction of clean samples whose argmax logit matches the label."""
    if len(ds) == 0:
        raise ValueError("standard_accuracy: empty dataset")
    prev = model.mode
    model.set_mode("eval")
    try:
        correct = 0
        for start in range(0, len(ds), batch_size):
            sl = slice(start, start + batch_size)
            correct += _predict_correct(model, ds.images[sl], ds.labels[sl])
    finally:
        model.set_mode(prev)
    return correct / len(ds)


def robust_accuracy(model, ds: Dataset, atk: AttackConfig, batch_size: int = 256) -> float:
    """Accuracy on white-box attacked inputs, attacks aimed at this model."""
    if len(ds) == 0:
        raise ValueError("robust_accuracy: empty dataset")
    prev = model.mode
    model.set_mode("eval")
    try:
        correct = 0
        for start in range(0, len(ds), batch_size):
            sl = slice(start, start + batch_size)
            x, y = ds.images[sl], ds.labels[sl]
            if atk.kind == "fgsm":
                batch = fgsm(model, x, y, atk.epsilon)
            else:
                batch = pgd(model, x, y, atk.epsilon, atk.alpha, atk.iterations)
            correct += _predict_correct(model, batch.x_adv, y)
    finally:
        model.set_mode(prev)
    return correct / len(ds)


def sweep(
    model,
    ds: Dataset,
    model_id: str = "model",
    seed: int = 0,
    fgsm_grid=DEFAULT_FGSM_GRID,
    pgd_iter_grid=DEFAULT_PGD_ITER_GRID,
    pgd_epsilon: float = DEFAULT_PGD_EPSILON,
    pgd_alpha: float = DEFAULT_PGD_ALPHA,
    batch_size: int = 256,
) -> EvalReport:
    """Standard accuracy plus robust accuracy at every grid point."""
    if not fgsm_grid and not pgd_iter_grid:
        raise ValueError("sweep: both grids empty")
    sa = standard_accuracy(model, ds, batch_size)
    ra_fgsm = {
        float(eps): robust_accuracy(model, ds, AttackConfig(kind="fgsm", epsilon=eps), batch_size)
        for eps in fgsm_grid
    }
    ra_pgd = {
        int(it): robust_accuracy(
            model, ds,
            AttackConfig(kind="pgd", epsilon=pgd_epsilon, alpha=pgd_alpha, iterations=it),
            batch_size,
        )
        for it in pgd_iter_grid
    }
    return EvalReport(model_id=model_id, sa=sa, ra_fgsm=ra_fgsm, ra_pgd=ra_pgd,
                      n_test=len(ds), seed=seed)


def _point_stats(values) -> PointStats:
    arr = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(arr, [25, 50, 75], method="linear")
    return PointStats(
        vmin=float(arr.min()), q1=float(q1), median=float(med), q3=float(q3),
        vmax=float(arr.max()), mean=float(arr.mean()), stddev=float(arr.std()),
    )


def multi_run_stats(reports) -> RunStatistics:
    """Aggregate >= 2 reports sharing identical grids into per-point stats."""
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError(f"multi_run_stats: need at least 2 reports, got {len(reports)}")
    f_grid = list(reports[0].ra_fgsm)
    p_grid = list(reports[0].ra_pgd)
    for r in reports[1:]:
        if list(r.ra_fgsm) != f_grid or list(r.ra_pgd) != p_grid:
            raise ValueError("multi_run_stats: reports use mismatched grids")
    return RunStatistics(
        sa=_point_stats([r.sa for r in reports]),
        ra_fgsm={eps: _point_stats([r.ra_fgsm[eps] for r in reports]) for eps in f_grid},
        ra_pgd={it: _point_stats([r.ra_pgd[it] for r in reports]) for it in p_grid},
        runs=len(reports),
    )


# ---------------------------------------------------------------------------
# CSV serialization


def _render_accuracy(value: float, n: int) -> str:
    # Two-decimal percentages are exact for n <= 10000 given the n_test row;
    # larger sample counts need full precision to stay parseable.
    return f"{value * 100:.2f}" if n <= 10000 else repr(value * 100)


def render_report_csv(reports) -> str:
    """Long-format CSV with header model,metric,setting,accuracy.

    The n_test and seed rows carry run metadata so parsing reconstructs exact
    accuracy fractions.
    """
    if isinstance(reports, EvalReport):
        reports = [reports]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_CSV_HEADER)
    for r in reports:
        w.writerow([r.model_id, "n_test", "", str(r.n_test)])
        w.writerow([r.model_id, "seed", "", str(r.seed)])
        w.writerow([r.model_id, "sa", "", _render_accuracy(r.sa, r.n_test)])
        for eps, v in r.ra_fgsm.items():
            w.writerow([r.model_id, "ra_fgsm", repr(float(eps)), _render_accuracy(v, r.n_test)])
        for it, v in r.ra_pgd.items():
            w.writerow([r.model_id, "ra_pgd", str(int(it)), _render_accuracy(v, r.n_test)])
    return buf.getvalue()


def _parse_accuracy(cell: str, n: int) -> float:
    pct = float(cell)
    count = round(pct / 100 * n)
    return count / n


def parse_report_csv(text: str) -> list[EvalReport]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != REPORT_CSV_HEADER:
        raise ValueError(f"parse_report_csv: expected header {','.join(REPORT_CSV_HEADER)}")
    grouped: dict[str, list] = {}
    order: list[str] = []
    for row in rows[1:]:
        if not row:
            continue
        model = row[0]
        if model not in grouped:
            grouped[model] = []
            order.append(model)
        grouped[model].append(row)
    reports = []
    for model in order:
        n_test = seed = None
        sa_cell = None
        fgsm_rows, pgd_rows = [], []
        for _, metric, setting, value in grouped[model]:
            if metric == "n_test":
                n_test = int(value)
            elif metric == "seed":
                seed = int(value)
            elif metric == "sa":
                sa_cell = value
            elif metric == "ra_fgsm":
                fgsm_rows.append((float(setting), value))
            elif metric == "ra_pgd":
                pgd_rows.append((int(setting), value))
            else:
                raise ValueError(f"parse_report_csv: unknown metric {metric!r}")
        if n_test is None or seed is None or sa_cell is None:
            raise ValueError(f"parse_report_csv: model {model!r} missing n_test/seed/sa rows")
        reports.append(
            EvalReport(
                model_id=model,
                sa=_parse_accuracy(sa_cell, n_test),
                ra_fgsm={eps: _parse_accuracy(v, n_test) for eps, v in fgsm_rows},
                ra_pgd={it: _parse_accuracy(v, n_test) for it, v in pgd_rows},
                n_test=n_test,
                seed=seed,
            )
        )
    return reports


def render_stats_csv(stats: RunStatistics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "setting", "min", "q1", "median", "q3", "max", "mean", "stddev", "runs"])

    def row(metric, setting, ps: PointStats):
        w.writerow([metric, setting] + [repr(v) for v in
                                        (ps.vmin, ps.q1, ps.median, ps.q3, ps.vmax, ps.mean, ps.stddev)]
                   + [stats.runs])

    row("sa", "", stats.sa)
    for eps, ps in stats.ra_fgsm.items():
        row("ra_fgsm", repr(float(eps)), ps)
    for it, ps in stats.ra_pgd.items():
        row("ra_pgd", str(int(it)), ps)
    return buf.getvalue()
