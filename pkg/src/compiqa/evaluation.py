"""2AFC judgment, accuracy, rank/linear correlations, and report assembly.

A metric handle is any callable (ref_image, dist_image) -> float distance,
lower meaning more similar. Judgments follow the tie-keeping rule
h* = 0 if d1 <= d2 else 1, and accuracy binarizes human vote fractions at
0.5, dropping evenly-split records from both numerator and denominator
(every report that drops records says so in its notes).

Correlations on constant inputs are undefined; they come back as NaN and
are flagged in reports rather than raised, so one degenerate metric cannot
abort a whole comparison run.
"""

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import images
from .errors import CompiqaError, EvaluationError, NumericError
from .images import PatchSpec

__all__ = [
    "AccuracyRow", "CorrelationRow", "EvalReport", "predict_judgment",
    "accuracy", "srocc", "plcc", "patch_average_score", "run_comparison",
    "run_mos_evaluation",
]


@dataclass(frozen=True)
class AccuracyRow:
    metric: str
    accuracy: float
    n_used: int
    n_excluded: int


@dataclass(frozen=True)
class CorrelationRow:
    metric: str
    srocc: float
    plcc: float
    n: int
    flagged: bool  # true when a correlation was undefined (constant input)


@dataclass(frozen=True)
class EvalReport:
    accuracy_rows: tuple = ()
    correlation_rows: tuple = ()
    n_records: int = 0
    patch_size: int = 0
    patch_stride: int = 0
    notes: tuple = ()

    def records(self) -> list:
        """One JSON object per row, deterministic order."""
        out = []
        for row in self.accuracy_rows:
            out.append(json.dumps({
                "kind": "accuracy", "metric": row.metric,
                "accuracy": row.accuracy, "n_used": row.n_used,
                "n_excluded": row.n_excluded,
            }, sort_keys=True))
        for row in self.correlation_rows:
            out.append(json.dumps({
                "kind": "correlation", "metric": row.metric,
                "srocc": None if math.isnan(row.srocc) else row.srocc,
                "plcc": None if math.isnan(row.plcc) else row.plcc,
                "n": row.n, "flagged": row.flagged,
            }, sort_keys=True))
        return out

    def table(self) -> str:
        """Aligned-column text rendering of every row plus the notes."""
        lines = []
        if self.accuracy_rows:
            width = max(len(r.metric) for r in self.accuracy_rows)
            lines.append(f"{'metric':<{width}}  accuracy   used  excluded")
            for r in self.accuracy_rows:
                lines.append(
                    f"{r.metric:<{width}}  {r.accuracy:8.4f}  {r.n_used:5d}  "
                    f"{r.n_excluded:8d}"
                )
        if self.correlation_rows:
            if lines:
                lines.append("")
            width = max(len(r.metric) for r in self.correlation_rows)
            lines.append(f"{'metric':<{width}}     srocc      plcc      n")
            for r in self.correlation_rows:
                mark = " *" if r.flagged else ""
                lines.append(
                    f"{r.metric:<{width}}  {r.srocc:8.4f}  {r.plcc:8.4f}  "
                    f"{r.n:5d}{mark}"
                )
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines)


def predict_judgment(d1: float, d2: float) -> int:
    """0 when the first distance is smaller or tied, else 1."""
    if math.isnan(d1) or math.isnan(d2):
        raise NumericError(f"cannot judge NaN distances ({d1}, {d2})")
    return 0 if d1 <= d2 else 1


def accuracy(predictions, labels) -> float:
    """Fraction of predictions matching binarized labels; 0.5 labels dropped."""
    if len(predictions) != len(labels):
        raise EvaluationError(
            f"{len(predictions)} predictions vs {len(labels)} labels"
        )
    matches = 0
    used = 0
    for pred, label in zip(predictions, labels):
        if pred not in (0, 1):
            raise EvaluationError(f"prediction {pred!r} is not 0 or 1")
        if not 0.0 <= label <= 1.0:
            raise EvaluationError(f"label {label!r} outside [0, 1]")
        if label == 0.5:
            continue
        used += 1
        matches += int(pred == (1 if label > 0.5 else 0))
    if used == 0:
        raise EvaluationError("no records left after dropping 0.5 labels")
    return matches / used


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values all receive the mean of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean()
    y = y - y.mean()
    denom = math.sqrt(float((x * x).sum()) * float((y * y).sum()))
    if denom == 0.0:
        return math.nan
    return float((x * y).sum()) / denom


def _as_vector(values, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise EvaluationError(f"{name} must be a flat sequence")
    if len(arr) < 3:
        raise EvaluationError(f"need at least 3 points, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def srocc(scores, targets) -> float:
    """Rank correlation with average ranks on ties; NaN if either is constant."""
    x = _as_vector(scores, "scores")
    y = _as_vector(targets, "targets")
    if len(x) != len(y):
        raise EvaluationError(f"{len(x)} scores vs {len(y)} targets")
    return _pearson(_average_ranks(x), _average_ranks(y))


def plcc(scores, targets) -> float:
    """Pearson linear correlation; NaN if either input is constant."""
    x = _as_vector(scores, "scores")
    y = _as_vector(targets, "targets")
    if len(x) != len(y):
        raise EvaluationError(f"{len(x)} scores vs {len(y)} targets")
    return _pearson(x, y)


def patch_average_score(metric, ref: np.ndarray, dist: np.ndarray,
                        spec: PatchSpec) -> float:
    """Mean metric value over aligned grid patches of the two images."""
    images.validate_image(ref)
    images.validate_image(dist)
    if ref.shape != dist.shape:
        raise EvaluationError(
            f"image shapes differ: {ref.shape} vs {dist.shape}"
        )
    ref_patches = images.patch_grid(ref, spec)
    dist_patches = images.patch_grid(dist, spec)
    values = [
        float(metric(rp, dp)) for rp, dp in zip(ref_patches, dist_patches)
    ]
    if all(v == values[0] for v in values):
        return values[0]  # the mean of a constant list is that constant
    # fsum rounds the exact sum once, so the result cannot depend on patch
    # enumeration order
    return math.fsum(values) / len(values)


def _load_or_skip(cache, path, skip_missing, notes):
    key = str(path)
    if key in cache:
        return cache[key]
    try:
        img = images.load_image(path)
    except (CompiqaError, OSError) as exc:
        if skip_missing:
            notes.append(f"skipped record: {exc}")
            return None
        raise
    cache[key] = img
    return img


def run_comparison(metrics, triplets, spec: PatchSpec,
                   skip_missing: bool = False,
                   per_triplet_csv=None) -> EvalReport:
    """Per-metric 2AFC accuracy over a triplet dataset.

    metrics: list of (name, handle) pairs evaluated in the given order.
    triplets: TripletSample records (from the training module's loader).
    Missing/broken images either fail fast or are skipped with a note,
    depending on skip_missing.
    """
    if not metrics:
        raise EvaluationError("no metrics to compare")
    if not triplets:
        raise EvaluationError("no triplets to evaluate")
    notes = []
    cache = {}
    per_metric = {name: ([], []) for name, _ in metrics}
    csv_rows = []
    for sample in triplets:
        ref = _load_or_skip(cache, sample.ref_path, skip_missing, notes)
        dist_a = _load_or_skip(cache, sample.dist_a_path, skip_missing, notes)
        dist_b = _load_or_skip(cache, sample.dist_b_path, skip_missing, notes)
        if ref is None or dist_a is None or dist_b is None:
            continue
        for name, handle in metrics:
            d1 = patch_average_score(handle, ref, dist_a, spec)
            d2 = patch_average_score(handle, ref, dist_b, spec)
            h_star = predict_judgment(d1, d2)
            predictions, labels = per_metric[name]
            predictions.append(h_star)
            labels.append(sample.h)
            csv_rows.append((
                name, str(sample.ref_path), str(sample.dist_a_path),
                str(sample.dist_b_path), d1, d2, h_star, sample.h,
            ))
    rows = []
    for name, _ in metrics:
        predictions, labels = per_metric[name]
        if not predictions:
            raise EvaluationError(f"no usable triplets for metric {name!r}")
        n_excluded = sum(1 for label in labels if label == 0.5)
        rows.append(AccuracyRow(
            metric=name,
            accuracy=accuracy(predictions, labels),
            n_used=len(labels) - n_excluded,
            n_excluded=n_excluded,
        ))
        if n_excluded:
            notes.append(
                f"{name}: dropped {n_excluded} evenly-split (h=0.5) records"
            )
    if per_triplet_csv is not None:
        path = Path(per_triplet_csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["metric", "ref", "dist_a", "dist_b", "d1", "d2", "h_star", "h"]
            )
            writer.writerows(csv_rows)
    return EvalReport(
        accuracy_rows=tuple(rows),
        n_records=len(triplets),
        patch_size=spec.size,
        patch_stride=spec.stride,
        notes=tuple(notes),
    )


def run_mos_evaluation(metrics, mos_samples, spec: PatchSpec,
                       skip_missing: bool = False) -> EvalReport:
    """Per-metric SROCC/PLCC of patch-averaged distances against s targets."""
    if not metrics:
        raise EvaluationError("no metrics to evaluate")
    if not mos_samples:
        raise EvaluationError("no MOS records to evaluate")
    notes = []
    cache = {}
    rows = []
    scores_by_metric = {name: [] for name, _ in metrics}
    targets = []
    for sample in mos_samples:
        ref = _load_or_skip(cache, sample.ref_path, skip_missing, notes)
        dist = _load_or_skip(cache, sample.dist_path, skip_missing, notes)
        if ref is None or dist is None:
            continue
        targets.append(sample.s)
        for name, handle in metrics:
            scores_by_metric[name].append(
                patch_average_score(handle, ref, dist, spec)
            )
    for name, _ in metrics:
        scores = scores_by_metric[name]
        if len(scores) < 3:
            raise EvaluationError(
                f"metric {name!r} has {len(scores)} usable records; need 3"
            )
        rho = srocc(scores, targets)
        r = plcc(scores, targets)
        flagged = math.isnan(rho) or math.isnan(r)
        if flagged:
            notes.append(f"{name}: correlation undefined on constant input")
        rows.append(CorrelationRow(
            metric=name, srocc=rho, plcc=r, n=len(scores), flagged=flagged,
        ))
    return EvalReport(
        correlation_rows=tuple(rows),
        n_records=len(mos_samples),
        patch_size=spec.size,
        patch_stride=spec.stride,
        notes=tuple(notes),
    )
