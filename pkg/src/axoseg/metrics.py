"""Dice scoring, the dedicated-vs-generalist evaluation matrix, and a
paired Student's t-test.

The t distribution's CDF is implemented here via the regularized
incomplete beta function (Lentz continued fraction) so the statistics
carry no external dependency; accuracy is ~1e-14 against reference
implementations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import infer, pipeline
from .datahub import Dataset, SplitSet, load_sample_arrays
from .errors import ContractViolation, DataError, DimensionMismatchError
from .infer import TilingPlan


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); two empty masks agree perfectly (1.0)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionMismatchError(
            f"dice: pred shape {pred.shape} != gt shape {gt.shape}"
        )
    for name, m in (("pred", pred), ("gt", gt)):
        if m.dtype != bool and not np.isin(np.unique(m), (0, 1)).all():
            raise ContractViolation(f"dice: {name} mask is not binary")
    p = pred.astype(bool)
    g = gt.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


# ---------------------------------------------------------------------------
# paired t-test with an internal t CDF


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ContractViolation(f"incomplete beta: x must be in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    # the continued fraction converges fast only for x < (a+1)/(a+b+2)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t with df degrees of freedom."""
    if df <= 0:
        raise ContractViolation(f"degrees of freedom must be > 0, got {df}")
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    n: int
    mean_diff: float
    degenerate: bool = False


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired Student's t-test on matched score lists.

    Zero-variance differences degenerate: all-zero differences give the
    no-effect result (t=0, p=1); identical nonzero differences are the
    infinite-evidence limit (p=0) and are flagged.
    """
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape or av.ndim != 1:
        raise ContractViolation(
            f"paired_ttest: need two equal-length 1-D vectors, got {av.shape} and {bv.shape}"
        )
    n = av.size
    if n < 2:
        raise ContractViolation(f"paired_ttest: need N >= 2 pairs, got {n}")
    d = av - bv
    md = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if md == 0.0:
            return TTestResult(t=0.0, df=df, p=1.0, n=n, mean_diff=0.0)
        t = math.inf if md > 0 else -math.inf
        return TTestResult(t=t, df=df, p=0.0, n=n, mean_diff=md, degenerate=True)
    t = md / (sd / math.sqrt(n))
    return TTestResult(t=t, df=df, p=t_sf_two_sided(t, df), n=n, mean_diff=md)


# ---------------------------------------------------------------------------
# evaluation matrix


@dataclass
class MatrixCell:
    available: bool
    n_images: int = 0
    dice_axon_mean: Optional[float] = None
    dice_axon_std: Optional[float] = None
    dice_myelin_mean: Optional[float] = None
    dice_myelin_std: Optional[float] = None

    def mean_for(self, cls: str) -> Optional[float]:
        return self.dice_axon_mean if cls == "axon" else self.dice_myelin_mean


@dataclass
class EvaluationMatrix:
    rows: List[str]  # target dataset ids
    cols: List[str]  # source model names
    cells: Dict[Tuple[str, str], MatrixCell] = field(default_factory=dict)

    def cell(self, row: str, col: str) -> MatrixCell:
        return self.cells[(row, col)]


def evaluate_matrix(
    models: Dict[str, Sequence],
    targets: Sequence[Tuple[Dataset, SplitSet]],
    plan: TilingPlan,
) -> EvaluationMatrix:
    """Score every model column on every target dataset's test split.

    `models` maps a column name to the checkpoint list to ensemble. Scoring
    a model on an image listed in its own training provenance is refused
    outright: that silently inflates every number downstream.
    """
    rows = [ds.id for ds, _ in targets]
    cols = list(models.keys())
    matrix = EvaluationMatrix(rows=rows, cols=cols)

    train_ids: Dict[str, set] = {}
    for name, members in models.items():
        ids = set()
        for m in members:
            prov = getattr(m, "provenance", None)
            if prov is not None:
                ids.update(prov.train_sample_ids)
        train_ids[name] = ids

    for ds, ss in targets:
        test_samples = [ds.get(sid) for sid in ss.test]
        annotated = all(s.annotated for s in test_samples) and len(test_samples) > 0
        for name, members in models.items():
            overlap = train_ids[name] & set(ss.test)
            if overlap:
                raise ContractViolation(
                    f"evaluation leakage: model '{name}' trained on test sample(s) "
                    f"{sorted(overlap)[:3]} of dataset '{ds.id}'"
                )
            if not annotated:
                matrix.cells[(ds.id, name)] = MatrixCell(available=False)
                continue
            ax_scores, my_scores = [], []
            for sample in test_samples:
                image, axon_gt, myelin_gt = load_sample_arrays(sample)
                probs = infer.ensemble_predict(members, pipeline.preprocess(image), plan)
                axon_pred, myelin_pred = infer.argmax_masks(probs)
                ax_scores.append(dice(axon_pred, axon_gt))
                my_scores.append(dice(myelin_pred, myelin_gt))
            matrix.cells[(ds.id, name)] = MatrixCell(
                available=True,
                n_images=len(test_samples),
                dice_axon_mean=float(np.mean(ax_scores)),
                dice_axon_std=float(np.std(ax_scores)),
                dice_myelin_mean=float(np.mean(my_scores)),
                dice_myelin_std=float(np.std(my_scores)),
            )
    return matrix


# ---------------------------------------------------------------------------
# export

CSV_COLUMNS = ["target_dataset", "source_model", "class", "dice_mean", "dice_std", "n_images"]


def matrix_to_csv(matrix: EvaluationMatrix, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for row in matrix.rows:
            for col in matrix.cols:
                cell = matrix.cell(row, col)
                for cls in ("axon", "myelin"):
                    if cell.available:
                        mean = cell.dice_axon_mean if cls == "axon" else cell.dice_myelin_mean
                        std = cell.dice_axon_std if cls == "axon" else cell.dice_myelin_std
                        writer.writerow([row, col, cls, repr(mean), repr(std), cell.n_images])
                    else:
                        writer.writerow([row, col, cls, "NA", "NA", 0])


def matrix_from_csv(path) -> EvaluationMatrix:
    rows: List[str] = []
    cols: List[str] = []
    acc: Dict[Tuple[str, str], Dict[str, Optional[Tuple[float, float]]]] = {}
    counts: Dict[Tuple[str, str], int] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_COLUMNS:
            raise DataError(f"unexpected evaluation CSV columns: {reader.fieldnames}")
        for rec in reader:
            key = (rec["target_dataset"], rec["source_model"])
            if rec["target_dataset"] not in rows:
                rows.append(rec["target_dataset"])
            if rec["source_model"] not in cols:
                cols.append(rec["source_model"])
            entry = acc.setdefault(key, {})
            if rec["dice_mean"] == "NA":
                entry[rec["class"]] = None
            else:
                entry[rec["class"]] = (float(rec["dice_mean"]), float(rec["dice_std"]))
            counts[key] = int(rec["n_images"])
    matrix = EvaluationMatrix(rows=rows, cols=cols)
    for key, entry in acc.items():
        if entry.get("axon") is None:
            matrix.cells[key] = MatrixCell(available=False)
        else:
            ax, my = entry["axon"], entry["myelin"]
            matrix.cells[key] = MatrixCell(
                available=True,
                n_images=counts[key],
                dice_axon_mean=ax[0],
                dice_axon_std=ax[1],
                dice_myelin_mean=my[0],
                dice_myelin_std=my[1],
            )
    return matrix


def _heat_color(value: float) -> str:
    """Dark blue (0) through teal to bright yellow (1), hex-encoded."""
    stops = [
        (0.0, (38, 38, 84)),
        (0.5, (32, 144, 140)),
        (1.0, (249, 231, 33)),
    ]
    v = min(1.0, max(0.0, value))
    for (v0, c0), (v1, c1) in zip(stops, stops[1:]):
        if v <= v1:
            f = 0.0 if v1 == v0 else (v - v0) / (v1 - v0)
            rgb = tuple(round(a + f * (b - a)) for a, b in zip(c0, c1))
            return "#{:02x}{:02x}{:02x}".format(*rgb)
    return "#f9e721"


def matrix_to_svg(matrix: EvaluationMatrix, path, cls_order=("axon", "myelin")) -> None:
    """Self-contained SVG heatmap: one panel per class, annotated cells,
    unavailable cells hatched gray rather than painted as zero."""
    cell_w, cell_h = 86, 46
    label_w, label_h, title_h, gap = 100, 34, 24, 30
    panel_w = label_w + cell_w * len(matrix.cols)
    width = panel_w * len(cls_order) + gap * (len(cls_order) - 1) + 20
    height = title_h + label_h + cell_h * len(matrix.rows) + 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="12">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for ci, cls in enumerate(cls_order):
        ox = 10 + ci * (panel_w + gap)
        oy = title_h
        parts.append(
            f'<text x="{ox + label_w}" y="16" font-size="14">{cls} Dice</text>'
        )
        for j, col in enumerate(matrix.cols):
            parts.append(
                f'<text x="{ox + label_w + j * cell_w + 4}" y="{oy + 14}">{col}</text>'
            )
        for i, row in enumerate(matrix.rows):
            y = oy + label_h + i * cell_h
            parts.append(f'<text x="{ox}" y="{y + 27}">{row}</text>')
            for j, col in enumerate(matrix.cols):
                x = ox + label_w + j * cell_w
                cell = matrix.cell(row, col)
                value = cell.mean_for(cls) if cell.available else None
                if value is None:
                    parts.append(
                        f'<rect x="{x}" y="{y}" width="{cell_w - 2}" height="{cell_h - 2}" '
                        f'fill="#d8d8d8"/>'
                        f'<text x="{x + 24}" y="{y + 27}" fill="#555">n/a</text>'
                    )
                else:
                    fg = "#ffffff" if value < 0.6 else "#1a1a1a"
                    parts.append(
                        f'<rect x="{x}" y="{y}" width="{cell_w - 2}" height="{cell_h - 2}" '
                        f'fill="{_heat_color(value)}"/>'
                        f'<text x="{x + 14}" y="{y + 27}" fill="{fg}">{value:.3f}</text>'
                    )
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))
