"""Per-label operating points from classifier scores.

Thresholds minimise ``L(theta) = -ln(mean_i F1_i(theta))`` where ``F1_i`` is
the F1 score of image ``i``'s predicted label set (``mode="image"``) or of
label ``i`` across images (``mode="label"``).  An image or label with no true
and no predicted positives scores F1 = 1.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .patterndb import LabelSpace, LabelSpaceMismatch, PatternVector


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreMatrix:
    image_ids: Tuple[str, ...]
    label_keys: Tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2 or s.shape != (len(self.image_ids), len(self.label_keys)):
            raise CalibrationError(
                f"score matrix shape {s.shape} does not match {len(self.image_ids)} images x {len(self.label_keys)} labels"
            )
        if s.size and (np.isnan(s).any() or s.min() < 0.0 or s.max() > 1.0):
            raise CalibrationError("scores must lie in [0, 1]")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    def row(self, image_id: str) -> np.ndarray:
        return self.scores[self.image_ids.index(image_id)]

    def aligned(self, other: "ScoreMatrix") -> "ScoreMatrix":
        """``other`` reordered to this matrix's image and label order."""
        if set(other.image_ids) != set(self.image_ids) or set(other.label_keys) != set(self.label_keys):
            raise CalibrationError("truth and score files cover different images or labels")
        ri = [other.image_ids.index(i) for i in self.image_ids]
        ci = [other.label_keys.index(k) for k in self.label_keys]
        return ScoreMatrix(self.image_ids, self.label_keys, other.scores[np.ix_(ri, ci)])


def read_score_csv(path) -> ScoreMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "image_id":
        raise CalibrationError(f"{path}: header must start with image_id")
    keys = tuple(rows[0][1:])
    ids, values = [], []
    for lineno, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        if len(r) != len(keys) + 1:
            raise CalibrationError(f"{path}: line {lineno}: expected {len(keys) + 1} fields")
        ids.append(r[0])
        try:
            values.append([float(v) for v in r[1:]])
        except ValueError:
            raise CalibrationError(f"{path}: line {lineno}: non-numeric score") from None
    return ScoreMatrix(tuple(ids), keys, np.array(values, dtype=np.float64).reshape(len(ids), len(keys)))


def write_score_csv(m: ScoreMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", *m.label_keys])
        for i, row in zip(m.image_ids, m.scores):
            w.writerow([i, *(repr(float(v)) for v in row)])


@dataclass(frozen=True)
class OperatingPoints:
    label_keys: Tuple[str, ...]
    thresholds: Tuple[float, ...]
    achieved_loss: float
    mode: str = "image"

    def to_json(self) -> str:
        return json.dumps(
            {
                "mode": self.mode,
                "achieved_loss": self.achieved_loss,
                "labels": list(self.label_keys),
                "thresholds": list(self.thresholds),
            },
            indent=2,
        ) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "OperatingPoints":
        d = json.loads(text)
        return cls(tuple(d["labels"]), tuple(float(t) for t in d["thresholds"]), float(d["achieved_loss"]), d.get("mode", "image"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "OperatingPoints":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def f1_scores(pred: np.ndarray, truth: np.ndarray, axis: int = 1) -> np.ndarray:
    """F1 along ``axis`` (1: per image row, 0: per label column); empty/empty = 1."""
    pred = pred.astype(bool)
    truth = truth.astype(bool)
    tp = (pred & truth).sum(axis)
    fp = (pred & ~truth).sum(axis)
    fn = (~pred & truth).sum(axis)
    denom = 2 * tp + fp + fn
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom == 0, 1.0, 2 * tp / np.maximum(denom, 1))


def loss(scores: np.ndarray, truth: np.ndarray, thresholds: Sequence[float], mode: str = "image") -> float:
    pred = scores >= np.asarray(thresholds, dtype=np.float64)
    mean = float(f1_scores(pred, truth, axis=1 if mode == "image" else 0).mean())
    return math.inf if mean <= 0.0 else -math.log(mean)


def candidate_thresholds(column: np.ndarray) -> np.ndarray:
    return np.unique(np.concatenate([column, [0.0, 1.0]]))


def _label_f1_init(scores: np.ndarray, truth: np.ndarray) -> List[float]:
    out = []
    for l in range(scores.shape[1]):
        best_t, best_f = None, -1.0
        for t in candidate_thresholds(scores[:, l]):
            f = float(f1_scores((scores[:, l] >= t)[:, None], truth[:, l][:, None], axis=0)[0])
            if f >= best_f:  # ties resolve to the higher threshold
                best_t, best_f = float(t), f
        out.append(best_t)
    return out


def calibrate(scores: ScoreMatrix, truth: ScoreMatrix, mode: str = "image", max_passes: int = 1000) -> OperatingPoints:
    """Per-label F1-optimal start, then coordinate descent on the loss.

    Each pass visits labels in order and moves one threshold to the
    candidate (observed scores plus 0 and 1) with the lowest loss; a move
    is taken only when it strictly improves.  Stops when a full pass makes
    no move.
    """
    if mode not in ("image", "label"):
        raise CalibrationError(f"unknown mode {mode!r}")
    if not scores.image_ids or not scores.label_keys:
        raise CalibrationError("empty score matrix")
    truth = scores.aligned(truth)
    s = scores.scores
    t = truth.scores
    if not np.isin(t, (0.0, 1.0)).all():
        raise CalibrationError("truth values must be 0 or 1")

    theta = _label_f1_init(s, t)
    current = loss(s, t, theta, mode)
    cands = [candidate_thresholds(s[:, l]) for l in range(s.shape[1])]
    for _ in range(max_passes):
        moved = False
        for l in range(s.shape[1]):
            best_v, best_loss = theta[l], current
            for c in cands[l]:
                if c == theta[l]:
                    continue
                trial = list(theta)
                trial[l] = float(c)
                v = loss(s, t, trial, mode)
                if v < best_loss:
                    best_v, best_loss = float(c), v
            if best_loss < current:
                theta[l] = best_v
                current = best_loss
                moved = True
        if not moved:
            break
    return OperatingPoints(scores.label_keys, tuple(theta), current, mode)


def apply_thresholds(row, points: OperatingPoints, space: LabelSpace) -> PatternVector:
    """Bit l set iff the label's score is >= its threshold."""
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (len(points.label_keys),):
        raise LabelSpaceMismatch("score row does not match the operating points")
    bits = np.zeros(len(space), dtype=np.uint8)
    for key, score, th in zip(points.label_keys, row, points.thresholds):
        if key not in space:
            raise LabelSpaceMismatch(f"label {key!r} is not in the label space")
        if score >= th:
            bits[space.index_of(key)] = 1
    return PatternVector(bits)


def merge_patterns(cfl: PatternVector, ffl: PatternVector, space: LabelSpace) -> PatternVector:
    """Combine core-label and fine-label predictions into one query pattern.

    Fine bits pass through.  A core label (from either input) is kept only
    when no fine label of the same core and sense is set.
    """
    n = len(space)
    if len(cfl) != n or len(ffl) != n:
        raise LabelSpaceMismatch("pattern lengths do not match the label space")
    core_idx = set(space.cfl_subset)
    stray = set(cfl.set_indices()) - core_idx
    if stray:
        raise LabelSpaceMismatch(f"core pattern sets non-core labels {sorted(stray)}")
    out = np.zeros(n, dtype=np.uint8)
    covered = set()
    for i in ffl.set_indices():
        if i not in core_idx:
            out[i] = 1
            lab = space.label(i)
            covered.add((lab.finding_type, lab.present, lab.core))
    for i in set(cfl.set_indices()) | (set(ffl.set_indices()) & core_idx):
        lab = space.label(i)
        if (lab.finding_type, lab.present, lab.core) not in covered:
            out[i] = 1
    return PatternVector(out)


def label_auc(scores: np.ndarray, truth: np.ndarray) -> List[float]:
    """Per-label ROC AUC (Mann-Whitney); NaN when a label has one class only."""
    out = []
    for l in range(scores.shape[1]):
        pos = scores[truth[:, l] == 1, l]
        neg = scores[truth[:, l] == 0, l]
        if not len(pos) or not len(neg):
            out.append(float("nan"))
            continue
        gt = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        out.append(float(gt / (len(pos) * len(neg))))
    return out
