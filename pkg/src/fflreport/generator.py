"""Report assembly from a query label pattern.

The query is matched to the nearest stored pattern under the weighted
distance ``sqrt(sum_l w_l (P_l - Q_l)^2) / |F|``; the top-ranked report of
that pattern is retrieved and every sentence asserting a label the query
lacks is dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .extraction import parse_label
from .patterndb import LabelSpaceMismatch, PatternDatabase, PatternDBError, PatternVector, lookup

# Distances closer than this are treated as tied.
TIE_TOLERANCE = 1e-12


@dataclass
class MatchResult:
    matched_pattern: PatternVector
    distance: float
    source_report_id: str
    assembled_sentences: List[str] = field(default_factory=list)
    pruned_sentences: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def text(self) -> str:
        return " ".join(self.assembled_sentences)

    def explain(self, space) -> dict:
        return {
            "matched_pattern": self.matched_pattern.to_string(),
            "matched_labels": [space.keys[i] for i in self.matched_pattern.set_indices()],
            "distance": self.distance,
            "source_report_id": self.source_report_id,
            "assembled_sentences": list(self.assembled_sentences),
            "pruned_sentences": [{"text": t, "reason": r} for t, r in self.pruned_sentences],
        }


def pattern_distance(q: PatternVector, p: PatternVector, space) -> float:
    n = len(space)
    if len(q) != n or len(p) != n:
        raise LabelSpaceMismatch(f"pattern lengths {len(q)}/{len(p)} do not match label space of {n}")
    diff = (q.bits != p.bits).astype(np.float64)
    return math.sqrt(float(diff @ space.weight_array)) / n


def nearest_pattern(q: PatternVector, db: PatternDatabase) -> Tuple[PatternVector, float]:
    """Closest stored pattern.

    An exact hit returns at distance 0 without scanning.  Ties go to the
    pattern whose top report ranks higher, then to the smaller bit string.
    """
    if not db.entries:
        raise PatternDBError("pattern database is empty")
    n = len(db.label_space)
    if len(q) != n:
        raise LabelSpaceMismatch(f"query of length {len(q)} against label space of {n}")
    if lookup(q, db):
        return q, 0.0
    patterns, mat = db.matrix()
    sq = (mat != q.bits) @ db.label_space.weight_array
    dist = np.sqrt(sq) / n
    best = float(dist.min())
    tied = np.flatnonzero(dist <= best + TIE_TOLERANCE)
    if len(tied) > 1:
        i = min(tied, key=lambda k: (-db.entries[patterns[k]][0].rank, patterns[k].to_string()))
    else:
        i = int(tied[0])
    return patterns[i], float(dist[i])


def assemble_report(q: PatternVector, db: PatternDatabase, keep_negatives: bool = False) -> MatchResult:
    """Retrieve the best report for ``q`` and prune unsupported sentences.

    A sentence is kept when every label it asserts has its bit set in the
    query; sentences with no labels are always kept.  ``keep_negatives``
    keeps negative-finding labels regardless of the query.
    """
    pattern, dist = nearest_pattern(q, db)
    report = db.entries[pattern][0]
    query = set(q.set_indices())
    result = MatchResult(pattern, dist, report.report_id)
    for s in report.sentences:
        missing = []
        for key, bit in zip(s.labels, s.label_bits):
            if bit is not None and bit in query:
                continue
            label = parse_label(key)
            if keep_negatives and not label.present:
                continue
            missing.append(label)
        if missing:
            reason = "; ".join(
                f"{m.core} absent in query" if m.present else f"negative {m.core} absent in query" for m in missing
            )
            result.pruned_sentences.append((s.text, reason))
        else:
            result.assembled_sentences.append(s.text)
    return result
