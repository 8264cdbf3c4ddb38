"""Accuracy / F1 curves over noise levels and the robust summary metrics.

The normalized AUC is the trapezoid integral of a curve over
``[0, eps_max]`` (clean point included) divided by ``eps_max``; the robust
score is the geometric mean of the clean value and that AUC. Levels beyond
``eps_max`` are reported but do not enter the AUC.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .attacks import AttackConfig, attack_batch

MITBIH_GRID = (0.0, 0.01, 0.03, 0.05, 0.1, 0.2, 0.3)
MITBIH_EPS_MAX = 0.1
CPSC_GRID = (0.0, 0.001, 0.003, 0.005, 0.007, 0.01, 0.03, 0.05, 0.1)
CPSC_EPS_MAX = 0.01


@dataclass
class RobustnessCurve:
    noise_levels: list
    accuracy: list
    macro_f1: list
    attack: dict = field(default_factory=dict)
    model_name: str = ""

    def __post_init__(self):
        levels = np.asarray(self.noise_levels, dtype=float)
        if levels.size == 0 or levels[0] != 0:
            raise ValueError("noise levels must start at 0 (the clean point)")
        if np.any(np.diff(levels) <= 0):
            raise ValueError("noise levels must be strictly increasing")
        if not len(self.accuracy) == len(self.macro_f1) == len(levels):
            raise ValueError("curve vectors must align with noise levels")
        self.noise_levels = [float(v) for v in levels]
        self.accuracy = [float(v) for v in self.accuracy]
        self.macro_f1 = [float(v) for v in self.macro_f1]

    def to_dict(self):
        return asdict(self)


@dataclass
class RobustnessSummary:
    acc_clean: float
    auc: float
    acc_robust: float
    f1_clean: float
    f1_auc: float
    f1_robust: float
    eps_max: float

    def to_dict(self):
        return asdict(self)


def _grid_index(levels, eps_max):
    levels = np.asarray(levels, dtype=float)
    hits = np.flatnonzero(np.isclose(levels, eps_max, rtol=0, atol=1e-12))
    if hits.size == 0:
        raise ValueError(f"eps_max={eps_max} is not a grid level {levels.tolist()}")
    return int(hits[0])


def normalized_auc(levels: Sequence[float], values: Sequence[float], eps_max: float) -> float:
    if eps_max < 0:
        raise ValueError("eps_max must be >= 0")
    k = _grid_index(levels, eps_max)
    if eps_max == 0:
        return float(values[0])  # limit of the mean over [0, eps] as eps -> 0
    lv = np.asarray(levels, dtype=float)[:k + 1]
    v = np.asarray(values, dtype=float)[:k + 1]
    if lv[0] != 0:
        raise ValueError("curve must include the clean point at 0")
    area = 0.0
    for i in range(k):  # fixed-order summation
        area += 0.5 * (v[i] + v[i + 1]) * (lv[i + 1] - lv[i])
    return area / eps_max


def curve_auc(curve: RobustnessCurve, eps_max: float, metric: str = "accuracy") -> float:
    return normalized_auc(curve.noise_levels, getattr(curve, metric), eps_max)


def acc_robust(acc_clean: float, auc: float) -> float:
    for v in (acc_clean, auc):
        if not -1e-12 <= v <= 1 + 1e-12:
            raise ValueError(f"metric {v} outside [0, 1]")
    return math.sqrt(max(acc_clean, 0.0) * max(auc, 0.0))


f1_robust = acc_robust


def macro_f1(predictions, labels, num_classes: int) -> float:
    """Unweighted mean of per-class F1; a class absent from both counts as 0."""
    p = np.asarray(predictions, dtype=np.int64).ravel()
    t = np.asarray(labels, dtype=np.int64).ravel()
    if p.shape != t.shape:
        raise ValueError("predictions and labels differ in length")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    return float(f1.mean())


def summarize(curve: RobustnessCurve, eps_max: float) -> RobustnessSummary:
    auc = curve_auc(curve, eps_max)
    f1_auc = curve_auc(curve, eps_max, "macro_f1")
    return RobustnessSummary(
        acc_clean=curve.accuracy[0], auc=auc, acc_robust=acc_robust(curve.accuracy[0], auc),
        f1_clean=curve.macro_f1[0], f1_auc=f1_auc, f1_robust=f1_robust(curve.macro_f1[0], f1_auc),
        eps_max=float(eps_max))


@torch.no_grad()
def predict_labels(model, x, mask=None, batch_size=512) -> np.ndarray:
    p = next(model.parameters())
    x = torch.as_tensor(x, dtype=p.dtype)
    preds = []
    for s in range(0, x.shape[0], batch_size):
        m = None if mask is None else torch.as_tensor(mask, dtype=p.dtype)[s:s + batch_size]
        preds.append(model(x[s:s + batch_size], m).argmax(dim=1).cpu().numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_curve(model, x, y, attack: AttackConfig, noise_levels: Sequence[float],
                   num_classes: int | None = None, mask=None, model_name: str = "",
                   batch_size: int = 256) -> RobustnessCurve:
    """Attack every sample at each level (clean at 0) and record accuracy and macro-F1."""
    levels = [float(v) for v in noise_levels]
    if not levels or levels[0] != 0:
        raise ValueError("noise levels must start with the clean level 0")
    y = np.asarray(y, dtype=np.int64)
    if num_classes is None:
        num_classes = int(model.spec.num_classes) if hasattr(model, "spec") else int(y.max()) + 1
    was_training = model.training
    model.eval()
    accs, f1s = [], []
    try:
        for eps in levels:
            if eps == 0:
                xs = x
            else:
                xs = attack_batch(model, x, y, attack.with_eps(eps), mask, batch_size)
            pred = predict_labels(model, xs, mask)
            accs.append(float(np.mean(pred == y)) if y.size else 0.0)
            f1s.append(macro_f1(pred, y, num_classes))
    finally:
        model.train(was_training)
    return RobustnessCurve(levels, accs, f1s, attack.__dict__ | {"name": attack.name}, model_name)


def render_table(curves: Sequence[RobustnessCurve], eps_max: float, metric: str = "accuracy") -> str:
    if not curves:
        raise ValueError("no curves to render")
    grid = curves[0].noise_levels
    for c in curves[1:]:
        if c.noise_levels != grid:
            raise ValueError(f"curve {c.model_name!r} uses a different noise grid")
    summary_col = "ACC_robust" if metric == "accuracy" else "F1_robust"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model"] + [f"eps_{lv:g}" for lv in grid] + [summary_col])
    for c in curves:
        vals = getattr(c, metric)
        s = acc_robust(vals[0], normalized_auc(grid, vals, eps_max))
        w.writerow([c.model_name] + [f"{v:.4f}" for v in vals] + [f"{s:.4f}"])
    return buf.getvalue()


def render_plot(curves: Sequence[RobustnessCurve], path, metric: str = "accuracy", title: str = ""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed hash salt and no date stamp keep the SVG byte-stable
    with matplotlib.rc_context({"svg.hashsalt": "ecgrobust", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for c in curves:
            ax.plot(c.noise_levels, getattr(c, metric), marker="o", label=c.model_name or "model")
        ax.set_xlabel("noise level")
        ax.set_ylabel("accuracy" if metric == "accuracy" else "macro F1")
        ax.set_ylim(-0.02, 1.02)
        if title:
            ax.set_title(title)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)


def render_report(curves: Sequence[RobustnessCurve], eps_max: float, out_dir, stem="report") -> list[Path]:
    """Write accuracy and F1 tables (CSV) plus one SVG plot per metric."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric, tag in (("accuracy", "acc"), ("macro_f1", "f1")):
        table = out_dir / f"{stem}_{tag}.csv"
        table.write_text(render_table(curves, eps_max, metric))
        plot = out_dir / f"{stem}_{tag}.svg"
        render_plot(curves, plot, metric, title=stem)
        written += [table, plot]
    return written


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
