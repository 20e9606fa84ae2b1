"""Pixel-level precision/recall with a distance tolerance, and average precision over thresholds."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))
TOLERANCE_FRACTION = 0.0075


@dataclass(frozen=True)
class MatchResult:
    threshold: float
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        # nothing predicted counts as precise
        n = self.tp + self.fp
        return 1.0 if n == 0 else self.tp / n

    @property
    def recall(self) -> float:
        n = self.tp + self.fn
        return 1.0 if n == 0 else self.tp / n

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.threshold, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def tolerance_px(shape: tuple[int, int], fraction: float = TOLERANCE_FRACTION) -> float:
    return fraction * math.hypot(shape[0], shape[1])


def _offsets(tol: float) -> list[tuple[int, int]]:
    r = int(math.floor(tol))
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= tol * tol]
    return sorted(offs, key=lambda o: (o[0] ** 2 + o[1] ** 2, o))


def _shift_view(a: np.ndarray, dy: int, dx: int):
    """Slices pairing a[y, x] with a[y+dy, x+dx] over the overlapping region."""
    H, W = a.shape
    src = (slice(max(0, -dy), H - max(0, dy)), slice(max(0, -dx), W - max(0, dx)))
    dst = (slice(max(0, dy), H - max(0, -dy)), slice(max(0, dx), W - max(0, -dx)))
    return src, dst


def match_pixels(pred: np.ndarray, gt: np.ndarray, tol_px: float, threshold: float = float("nan")) -> MatchResult:
    """Greedy one-to-one matching of predicted to ground-truth pixels, nearest offsets first.

    Within one offset every predicted pixel has exactly one candidate and vice
    versa, so each offset pass is conflict free; passes run in increasing
    distance (ties by offset), which makes the matching deterministic.
    """
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"raster shapes differ: {pred.shape} vs {gt.shape}")
    free_p = pred.copy()
    free_g = gt.copy()
    tp = 0
    for dy, dx in _offsets(tol_px):
        src, dst = _shift_view(pred, dy, dx)
        hit = free_p[src] & free_g[dst]
        n = int(hit.sum())
        if n:
            tp += n
            free_p[src] &= ~hit
            free_g[dst] &= ~hit
    return MatchResult(threshold, tp, int(pred.sum()) - tp, int(gt.sum()) - tp)


def pr_curve(pred_real: np.ndarray, gt: np.ndarray, thresholds: Sequence[float] = THRESHOLDS,
             tol_px: float | None = None) -> list[MatchResult]:
    """Match results after binarizing ``pred_real > t`` for each threshold."""
    thresholds = list(thresholds)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    tol = tolerance_px(gt.shape) if tol_px is None else tol_px
    return [match_pixels(pred_real > t, gt, tol, t) for t in thresholds]


def ap_from_curve(results: Iterable[MatchResult]) -> float:
    """Trapezoidal area under the precision/recall points, ordered by recall.

    Thresholds at which nothing is predicted have no defined precision and are
    left out; the remaining curve is extended flat from its lowest-recall point
    down to recall 0. No defined point at all gives 0.
    """
    pts = sorted(((r.recall, r.precision) for r in results if r.tp + r.fp > 0),
                 key=lambda p: (p[0], -p[1]))
    if not pts:
        return 0.0
    rec = np.array([0.0] + [p[0] for p in pts])
    prec = np.array([pts[0][1]] + [p[1] for p in pts])
    return float(np.sum((rec[1:] - rec[:-1]) * (prec[1:] + prec[:-1]) / 2))


def average_precision(pred_real: np.ndarray, gt: np.ndarray, thresholds: Sequence[float] = THRESHOLDS,
                      tol_px: float | None = None) -> float:
    return ap_from_curve(pr_curve(pred_real, gt, thresholds, tol_px))


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("HTPRIOR_THREADS", "1")))
    except ValueError:
        return 1


def dataset_pr_curve(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                     thresholds: Sequence[float] = THRESHOLDS) -> list[MatchResult]:
    """Per-threshold counts pooled over all images (reduction in image order)."""
    def one(pair):
        return pr_curve(pair[0], pair[1], thresholds)

    pairs = list(zip(preds, gts))
    if _workers() > 1:
        with ThreadPoolExecutor(_workers()) as pool:
            per_image = list(pool.map(one, pairs))
    else:
        per_image = [one(p) for p in pairs]
    total = [MatchResult(t, 0, 0, 0) for t in thresholds]
    for curve in per_image:
        total = [a + b for a, b in zip(total, curve)]
    return total


def dataset_average_precision(preds, gts, thresholds=THRESHOLDS) -> float:
    return ap_from_curve(dataset_pr_curve(preds, gts, thresholds))


def format_report(curve: Sequence[MatchResult], ap: float, title: str = "") -> str:
    lines = [title] if title else []
    lines.append(f"AP: {100 * ap:.2f}%")
    for r in curve:
        lines.append(f"threshold {r.threshold:.1f}: precision {r.precision:.4f} recall {r.recall:.4f} "
                     f"tp {r.tp} fp {r.fp} fn {r.fn}")
    return "\n".join(lines) + "\n"


def write_csv(path, curve: Sequence[MatchResult]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("threshold,precision,recall\n")
        for r in curve:
            fh.write(f"{r.threshold:.1f},{r.precision:.6f},{r.recall:.6f}\n")
