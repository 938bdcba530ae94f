"""Final label assembly and F1 evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .labels import CLASSES, NUM_CLASSES, PARTS, REPORT_ROWS

__all__ = ["assemble_final", "confusion_counts", "F1Report", "F1Accumulator", "f1_scores",
           "prf"]

_NEG = -1e4


def assemble_final(part_maps: Iterable, canvas: tuple[int, int]) -> np.ndarray:
    """Merge remapped part scores into one class-index map (H, W).

    ``part_maps`` yields ``(part_index, scores, coverage)`` with ``scores``
    shaped (1 + k, H, W) and ``coverage`` (H, W) or None.  Foreground
    channels go to their global classes with an element-wise max where
    windows overlap; background is fixed at score 0.  Pixels a part does not
    cover (coverage < 0.5) contribute nothing.
    """
    H, W = canvas
    scores = np.full((NUM_CLASSES, H, W), _NEG, dtype=np.float64)
    scores[0] = 0.0
    for idx, maps, coverage in part_maps:
        maps = np.asarray(maps)
        if maps.shape[1:] != (H, W):
            raise ValueError(f"assemble_final: part map {maps.shape[1:]} vs canvas {(H, W)}")
        part = PARTS[idx]
        valid = np.ones((H, W), bool) if coverage is None else np.asarray(coverage) >= 0.5
        for k, cls in enumerate(part.classes):
            cand = np.where(valid, maps[1 + k], _NEG)
            np.maximum(scores[cls], cand, out=scores[cls])
    e = np.exp(scores - scores.max(axis=0, keepdims=True))
    prob = e / e.sum(axis=0, keepdims=True)
    return prob.argmax(axis=0)


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """(TP, FP, FN) per working class, shape (9, 3); row 0 is background."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"f1: size mismatch {pred.shape} vs {gt.shape}")
    cm = np.bincount(gt.ravel() * NUM_CLASSES + pred.ravel(),
                     minlength=NUM_CLASSES * NUM_CLASSES).reshape(NUM_CLASSES, NUM_CLASSES)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    return np.stack([tp, fp, fn], axis=1).astype(np.int64)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class F1Report:
    per_class: dict = field(default_factory=dict)  # name -> (P, R, F1)
    rows: dict = field(default_factory=dict)  # merged report rows -> (P, R, F1)
    overall: tuple = (0.0, 0.0, 0.0)

    COLUMNS = tuple(name for name, _ in REPORT_ROWS) + ("overall",)

    def f1(self, row: str) -> float:
        if row == "overall":
            return self.overall[2]
        if row in self.rows:
            return self.rows[row][2]
        return self.per_class[row][2]

    def to_table(self) -> str:
        head = " ".join(f"{c:>8}" for c in self.COLUMNS)
        vals = " ".join(f"{self.f1(c):8.3f}" for c in self.COLUMNS)
        return f"{'':>8} {head}\n{'F1':>8} {vals}\n"

    def to_dict(self) -> dict:
        return {
            "per_class": {k: list(v) for k, v in self.per_class.items()},
            "rows": {k: list(v) for k, v in self.rows.items()},
            "overall": list(self.overall),
        }


class F1Accumulator:
    """Pools counts over images so every score is micro-averaged."""

    def __init__(self):
        self.counts = np.zeros((NUM_CLASSES, 3), dtype=np.int64)
        self.row_counts = {name: np.zeros(3, dtype=np.int64) for name, _ in REPORT_ROWS}

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        self.counts += confusion_counts(pred, gt)
        for name, classes in REPORT_ROWS:
            p = np.isin(pred, classes)
            g = np.isin(gt, classes)
            self.row_counts[name] += [np.sum(p & g), np.sum(p & ~g), np.sum(~p & g)]

    def report(self) -> F1Report:
        per_class = {CLASSES[c]: prf(*self.counts[c]) for c in range(1, NUM_CLASSES)}
        rows = {name: prf(*cnt) for name, cnt in self.row_counts.items()}
        overall = prf(*self.counts[1:].sum(axis=0))
        return F1Report(per_class, rows, overall)


def f1_scores(pred: np.ndarray, gt: np.ndarray | None = None) -> F1Report:
    """F1 report for one prediction/ground-truth pair, or for sequences of pairs."""
    acc = F1Accumulator()
    if isinstance(pred, np.ndarray) and pred.ndim == 2:
        acc.add(pred, gt)
    else:
        for p, g in zip(pred, gt):
            acc.add(p, g)
    return acc.report()
