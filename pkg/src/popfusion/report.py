"""Run reports: per-fold metrics, aggregation, and all artifact writers."""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

METRIC_NAMES = ("acc", "sen", "spe", "auc")


@dataclass
class FoldResult:
    fold: int
    metrics: dict
    omega_img: float
    omega_non: float
    alpha: list
    best_epoch: int
    epochs_run: int
    wall_clock: float
    val_acc: float
    loss_trace: list = field(default_factory=list)   # (epoch, components, val_acc)
    predictions: list = field(default_factory=list)  # (subject_id, score, pred, true)
    embeddings: dict = field(default_factory=dict)
    adjacency: object = None  # final clean-graph adjacency when exporting


@dataclass
class RunReport:
    config: dict
    n_subjects: int
    folds: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    status: str = "ok"
    error: str = ""
    reconstructor_trace: list = field(default_factory=list)

    @classmethod
    def empty(cls, config, n_subjects: int) -> "RunReport":
        return cls(config=dataclasses.asdict(config), n_subjects=n_subjects)

    def add_fold(self, result: FoldResult) -> None:
        self.folds.append(result)

    def finalize(self) -> None:
        """Mean and sample std (ddof=1; 0 for a single fold) per metric,
        NaN-marked fold values excluded with a warning."""
        for name in METRIC_NAMES:
            values = np.array([f.metrics[name] for f in self.folds], dtype=np.float64)
            finite = values[~np.isnan(values)]
            if len(finite) < len(values):
                warnings.warn(f"metric {name}: {len(values) - len(finite)} NaN fold "
                              "values excluded from aggregation")
            if len(finite) == 0:
                self.mean[name] = float("nan")
                self.std[name] = float("nan")
                continue
            self.mean[name] = float(finite.mean())
            self.std[name] = float(finite.std(ddof=1)) if len(finite) > 1 else 0.0

    def summary_line(self) -> str:
        cells = [f"{name.upper()} {100 * self.mean[name]:.2f} "
                 f"({100 * self.std[name]:.2f})" for name in METRIC_NAMES]
        return " | ".join(cells)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "n_subjects": self.n_subjects,
            "status": self.status,
            "error": self.error,
            "mean": self.mean,
            "std": self.std,
            "folds": [{
                "fold": f.fold,
                "metrics": f.metrics,
                "omega_img": f.omega_img,
                "omega_non": f.omega_non,
                "alpha": f.alpha,
                "best_epoch": f.best_epoch,
                "epochs_run": f.epochs_run,
                "wall_clock": f.wall_clock,
                "val_acc": f.val_acc,
            } for f in self.folds],
            "reconstructor_trace": self.reconstructor_trace,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2,
                                         default=_np_default) + "\n")


def _np_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    raise TypeError(f"not JSON serializable: {type(obj)}")


def load_report(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"report not found: {path}")
    return json.loads(path.read_text())


# ---- artifact writers -------------------------------------------------------


def write_predictions(result: FoldResult, path) -> None:
    with Path(path).open("w") as fh:
        fh.write("subject_id\tscore\tpredicted\ttrue\n")
        for sid, score, pred, true in result.predictions:
            fh.write(f"{sid}\t{score:.8f}\t{pred}\t{true}\n")


def write_loss_trace(result: FoldResult, path) -> None:
    header = ("epoch\tl_ce\tl_smh_img\tl_smh_non\tl_deg\tl_r\tl_total\tval_acc\n")
    with Path(path).open("w") as fh:
        fh.write(header)
        for epoch, components, val_acc in result.loss_trace:
            cells = "\t".join(f"{c:.10g}" for c in components)
            fh.write(f"{epoch}\t{cells}\t{val_acc:.6f}\n")


def write_embeddings(result: FoldResult, out_dir, fold: int) -> list:
    out = []
    for name, matrix in result.embeddings.items():
        if matrix is None:
            continue
        path = Path(out_dir) / f"embedding_{name[2:]}_fold{fold}.tsv"
        np.savetxt(path, matrix, delimiter="\t", fmt="%.8g")
        out.append(path)
    return out


def write_contribution_report(report: RunReport, path) -> None:
    """Per-fold modality contribution weights and attribute weights."""
    n_alpha = max((len(f.alpha) for f in report.folds), default=0)
    with Path(path).open("w") as fh:
        alpha_cols = "".join(f"\talpha_{u + 1}" for u in range(n_alpha))
        fh.write(f"fold\tomega_img\tomega_non{alpha_cols}\n")
        for f in report.folds:
            alphas = "".join(f"\t{a:.8f}" for a in f.alpha)
            alphas += "\t" * (n_alpha - len(f.alpha))
            fh.write(f"{f.fold}\t{f.omega_img:.8f}\t{f.omega_non:.8f}{alphas}\n")


def write_run_artifacts(report: RunReport, results, out_dir, manifest=None) -> Path:
    """Write report.json plus per-fold predictions, loss traces, embeddings,
    and the contribution table under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report.write(report_path)
    write_contribution_report(report, out / "contributions.tsv")
    export_embeddings = bool(report.config.get("export_embeddings", True))
    for result in results:
        write_predictions(result, out / f"predictions_fold{result.fold}.tsv")
        write_loss_trace(result, out / f"trace_fold{result.fold}.tsv")
        if export_embeddings:
            write_embeddings(result, out, result.fold)
        if result.adjacency is not None:
            from .graph import export_adjacency_coo
            export_adjacency_coo(result.adjacency,
                                 out / f"adjacency_fold{result.fold}.tsv")
    if manifest is not None:
        for p in sorted(out.iterdir()):
            manifest.register(p)
        manifest.write(out / "manifest.json")
    return report_path


# ---- report rendering (the `report` subcommand) ------------------------------


def render_metric_table(report_dict: dict) -> str:
    lines = ["fold\tACC\tSEN\tSPE\tAUC"]
    for f in report_dict["folds"]:
        m = f["metrics"]
        cells = "\t".join("nan" if m[k] is None or (isinstance(m[k], float) and
                                                    math.isnan(m[k]))
                          else f"{100 * m[k]:.2f}" for k in METRIC_NAMES)
        lines.append(f"{f['fold']}\t{cells}")
    mean, std = report_dict["mean"], report_dict["std"]
    summary = "\t".join(f"{100 * mean[k]:.2f} ({100 * std[k]:.2f})"
                        for k in METRIC_NAMES)
    lines.append(f"mean (std)\t{summary}")
    return "\n".join(lines) + "\n"


def render_report_files(report_path, out_dir) -> list:
    """Pure function of the report document: metric table plus bar-plot data
    files for the contribution and attribute weights."""
    doc = load_report(report_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    table = out / "metrics_table.tsv"
    table.write_text(render_metric_table(doc))
    written.append(table)

    folds = doc["folds"]
    contrib = out / "contribution_bars.tsv"
    with contrib.open("w") as fh:
        fh.write("label\tvalue\n")
        if folds:
            fh.write(f"imaging\t{np.mean([f['omega_img'] for f in folds]):.8f}\n")
            fh.write(f"non_imaging\t{np.mean([f['omega_non'] for f in folds]):.8f}\n")
    written.append(contrib)

    n_alpha = max((len(f["alpha"]) for f in folds), default=0)
    alpha_path = out / "alpha_bars.tsv"
    with alpha_path.open("w") as fh:
        fh.write("label\tvalue\n")
        for u in range(n_alpha):
            vals = [f["alpha"][u] for f in folds if len(f["alpha"]) > u]
            fh.write(f"alpha_{u + 1}\t{np.mean(vals):.8f}\n")
    written.append(alpha_path)
    return written
