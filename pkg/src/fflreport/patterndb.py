"""Binary label patterns and the pattern -> ranked report database.

Reports sharing one label pattern form a cohort.  Within a cohort each
relevant sentence ``s`` gets support ``h(s) = (#cohort reports containing s) /
cohort size`` and a report's rank is the sum of ``h`` over its relevant
sentences.  Reports are stored best-first.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from .extraction import FflLabel, SentenceExtraction, parse_label
from .text import normalize_sentence

FORMAT_VERSION = 1
MAGIC = b"FFLDB"
_PREFIX = struct.Struct(">5sHII")
_DIGEST = 32


class PatternDBError(ValueError):
    pass


class EmptyCorpusError(PatternDBError):
    pass


class VersionMismatchError(PatternDBError):
    pass


class ChecksumError(PatternDBError):
    pass


class LabelSpaceMismatch(ValueError):
    pass


class PatternVector:
    """Immutable 0/1 indicator vector over a label space."""

    __slots__ = ("bits", "_key")

    def __init__(self, bits):
        arr = np.array(bits, dtype=np.uint8).reshape(-1)
        if arr.size and arr.max() > 1:
            raise ValueError("pattern bits must be 0 or 1")
        arr.setflags(write=False)
        self.bits = arr
        self._key = arr.tobytes()

    @classmethod
    def zeros(cls, n: int) -> "PatternVector":
        return cls(np.zeros(n, dtype=np.uint8))

    @classmethod
    def from_indices(cls, n: int, indices: Iterable[int]) -> "PatternVector":
        arr = np.zeros(n, dtype=np.uint8)
        arr[list(indices)] = 1
        return cls(arr)

    @classmethod
    def from_string(cls, s: str) -> "PatternVector":
        return cls([int(c) for c in s])

    def to_string(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)

    def set_indices(self) -> List[int]:
        return np.flatnonzero(self.bits).tolist()

    def __len__(self):
        return self.bits.size

    def __eq__(self, other):
        return isinstance(other, PatternVector) and self._key == other._key and len(self) == len(other)

    def __hash__(self):
        return hash(self._key)

    def __repr__(self):
        return f"PatternVector({self.to_string()!r})"


@dataclass(frozen=True)
class LabelSpace:
    """Ordered label set with per-label weights and support counts.

    ``cfl_subset`` indexes the bare core labels (no modifiers).
    """

    keys: Tuple[str, ...]
    weights: Tuple[float, ...]
    support: Tuple[int, ...]
    cfl_subset: Tuple[int, ...] = ()
    _index: Dict[str, int] = field(default_factory=dict, compare=False, repr=False)
    _by_core: Dict[Tuple[str, bool, str], List[Tuple[int, frozenset]]] = field(
        default_factory=dict, compare=False, repr=False
    )

    def __post_init__(self):
        if not self.keys:
            raise PatternDBError("label space must not be empty")
        if not (len(self.keys) == len(self.weights) == len(self.support)):
            raise PatternDBError("label space arrays differ in length")
        if len(set(self.keys)) != len(self.keys):
            raise PatternDBError("duplicate label key in label space")
        for w in self.weights:
            if not 0.0 < w <= 1.0:
                raise PatternDBError(f"label weight {w} outside (0, 1]")
        self._index.update({k: i for i, k in enumerate(self.keys)})
        for i, k in enumerate(self.keys):
            lab = parse_label(k)
            self._by_core.setdefault((lab.finding_type, lab.present, lab.core), []).append(
                (i, frozenset(lab.modifiers))
            )

    def __len__(self):
        return len(self.keys)

    def index_of(self, key: str) -> int:
        return self._index[key]

    def __contains__(self, key) -> bool:
        return key in self._index

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)

    def label(self, i: int) -> FflLabel:
        return parse_label(self.keys[i])

    def map_label(self, label: FflLabel) -> Optional[int]:
        """Index of the label, or of its nearest in-space counterpart.

        The nearest counterpart shares type, negation and core and carries a
        subset of the label's modifiers (largest subset wins, then key order).
        """
        key = label.serialize()
        if key in self._index:
            return self._index[key]
        mods = set(label.modifiers)
        best = None
        for i, m in self._by_core.get((label.finding_type, label.present, label.core), []):
            if m <= mods:
                cand = (-len(m), self.keys[i], i)
                if best is None or cand < best:
                    best = cand
        return None if best is None else best[2]

    @classmethod
    def build(
        cls,
        report_labels: Mapping[str, Iterable[FflLabel]],
        lex,
        min_support: int = 1,
    ) -> "LabelSpace":
        """Admit labels supported by at least ``min_support`` reports.

        A bare core label is supported by every report carrying any label of
        that core.  Bare labels come first, each group in key order.
        """
        if min_support < 1:
            raise PatternDBError("min_support must be >= 1")
        exact: Counter = Counter()
        bare: Counter = Counter()
        for labels in report_labels.values():
            labels = list(labels)
            exact.update({l.serialize() for l in labels if l.modifiers})
            bare.update({l.bare().serialize() for l in labels})
        bare_keys = sorted(k for k, c in bare.items() if c >= min_support)
        fine_keys = sorted(k for k, c in exact.items() if c >= min_support)
        keys = bare_keys + fine_keys
        if not keys:
            raise PatternDBError(f"no label reaches min_support={min_support}")
        support = [bare[k] for k in bare_keys] + [exact[k] for k in fine_keys]
        weights = [lex.weight(parse_label(k).core) for k in keys]
        return cls(tuple(keys), tuple(weights), tuple(support), tuple(range(len(bare_keys))))

    def to_text(self) -> str:
        lines = ["# index\tweight\tsupport\tcfl\tlabel"]
        cfl = set(self.cfl_subset)
        for i, k in enumerate(self.keys):
            lines.append(f"{i}\t{self.weights[i]!r}\t{self.support[i]}\t{int(i in cfl)}\t{k}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LabelSpace":
        keys, weights, support, cfl = [], [], [], []
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            i, w, s, c, k = line.split("\t")
            if int(i) != len(keys):
                raise PatternDBError("label space header out of order")
            keys.append(k)
            weights.append(float(w))
            support.append(int(s))
            if c == "1":
                cfl.append(int(i))
        return cls(tuple(keys), tuple(weights), tuple(support), tuple(cfl))


def map_labels(labels: Iterable[FflLabel], space: LabelSpace) -> Tuple[List[Optional[int]], int]:
    idx = [space.map_label(l) for l in labels]
    return idx, sum(i is None for i in idx)


def report_to_pattern(labels: Iterable[FflLabel], space: LabelSpace, stats: Optional[Counter] = None) -> PatternVector:
    idx, ignored = map_labels(labels, space)
    if stats is not None:
        stats["ignored_labels"] += ignored
    return PatternVector.from_indices(len(space), [i for i in idx if i is not None])


@dataclass(frozen=True)
class StoredSentence:
    text: str
    labels: Tuple[str, ...] = ()
    label_bits: Tuple[Optional[int], ...] = ()


@dataclass(frozen=True)
class RankedReport:
    report_id: str
    sentences: Tuple[StoredSentence, ...]
    relevant: Tuple[int, ...]     # positions into ``sentences``
    h: Tuple[float, ...]          # support of each relevant sentence
    rank: float

    @property
    def relevant_sentences(self) -> List[str]:
        return [self.sentences[i].text for i in self.relevant]


@dataclass
class PatternDatabase:
    label_space: LabelSpace
    entries: Dict[PatternVector, List[RankedReport]]
    sentence_stats: Dict[str, Dict[str, int]] = field(default_factory=dict)
    _matrix: Optional[Tuple[List[PatternVector], np.ndarray]] = field(default=None, compare=False, repr=False)

    def __len__(self):
        return len(self.entries)

    def patterns(self) -> List[PatternVector]:
        return list(self.entries)

    def matrix(self) -> Tuple[List[PatternVector], np.ndarray]:
        """Stored patterns and their stacked bit matrix, cached."""
        if self._matrix is None:
            pats = sorted(self.entries, key=PatternVector.to_string)
            mat = np.stack([p.bits for p in pats]) if pats else np.zeros((0, len(self.label_space)), np.uint8)
            self._matrix = (pats, mat)
        return self._matrix

    def stats(self) -> dict:
        return {
            "patterns": len(self.entries),
            "reports": sum(len(v) for v in self.entries.values()),
            "sentences": len(self.sentence_stats),
            "labels": len(self.label_space),
        }


def _group_reports(extractions: Iterable[SentenceExtraction]) -> Dict[str, List[SentenceExtraction]]:
    reports: Dict[str, List[SentenceExtraction]] = defaultdict(list)
    for e in extractions:
        reports[e.report_id].append(e)
    return {rid: sorted(v, key=lambda e: e.sentence_index) for rid, v in reports.items()}


def build_database(
    extractions: Iterable[SentenceExtraction],
    lex=None,
    min_support: int = 1,
    space: Optional[LabelSpace] = None,
    all_sentences_relevant: bool = False,
) -> PatternDatabase:
    """Group reports by label pattern and rank each cohort.

    Relevant sentences are those carrying at least one in-pattern label,
    or every sentence with ``all_sentences_relevant``.  Repeated sentences
    within a report count once.  Ties in rank are ordered by report id.
    """
    reports = _group_reports(extractions)
    if not reports:
        raise EmptyCorpusError("cannot build a database from an empty corpus")
    if space is None:
        if lex is None:
            raise PatternDBError("a lexicon is required to derive the label space")
        space = LabelSpace.build({rid: [l for s in sents for l in s.labels] for rid, sents in reports.items()}, lex, min_support)

    n = len(space)
    cohorts: Dict[PatternVector, List[Tuple[str, List[StoredSentence], List[int], List[str]]]] = defaultdict(list)
    for rid in sorted(reports):
        stored, relevant, keys, bits = [], [], [], set()
        seen = set()
        for s in reports[rid]:
            idx, _ = map_labels(s.labels, space)
            stored.append(StoredSentence(s.text, tuple(l.serialize() for l in s.labels), tuple(idx)))
            mapped = [i for i in idx if i is not None]
            bits.update(mapped)
            key = normalize_sentence(s.text)
            if (mapped or all_sentences_relevant) and key not in seen:
                seen.add(key)
                relevant.append(len(stored) - 1)
                keys.append(key)
        cohorts[PatternVector.from_indices(n, bits)].append((rid, stored, relevant, keys))

    entries: Dict[PatternVector, List[RankedReport]] = {}
    sentence_stats: Dict[str, Dict[str, int]] = defaultdict(dict)
    for pattern in sorted(cohorts, key=PatternVector.to_string):
        members = cohorts[pattern]
        size = len(members)
        contain: Counter = Counter()
        for _, _, _, keys in members:
            contain.update(set(keys))
        pkey = pattern.to_string()
        for s, c in contain.items():
            sentence_stats[s][pkey] = c
        ranked = []
        for rid, stored, relevant, keys in members:
            h = tuple(contain[k] / size for k in keys)
            ranked.append(RankedReport(rid, tuple(stored), tuple(relevant), h, float(sum(h))))
        ranked.sort(key=lambda r: (-r.rank, r.report_id))
        entries[pattern] = ranked
    return PatternDatabase(space, entries, {k: dict(sorted(v.items())) for k, v in sorted(sentence_stats.items())})


def lookup(pattern: PatternVector, db: PatternDatabase) -> List[RankedReport]:
    """Exact-match retrieval; empty when the pattern is not stored."""
    return db.entries.get(pattern, [])


# -- persistence -------------------------------------------------------------


def _payload(db: PatternDatabase) -> dict:
    entries = []
    for pattern in sorted(db.entries, key=PatternVector.to_string):
        reports = []
        for r in db.entries[pattern]:
            reports.append({
                "report_id": r.report_id,
                "rank": r.rank,
                "relevant": list(r.relevant),
                "h": list(r.h),
                "sentences": [
                    {"text": s.text, "labels": list(s.labels), "label_bits": list(s.label_bits)} for s in r.sentences
                ],
            })
        entries.append({"pattern": pattern.to_string(), "reports": reports})
    return {"entries": entries, "sentence_stats": db.sentence_stats}


def dumps_db(db: PatternDatabase) -> bytes:
    header = db.label_space.to_text().encode("utf-8")
    body = json.dumps(_payload(db), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    body = zlib.compress(body, 6)
    data = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header), len(body)) + header + body
    return data + hashlib.sha256(data).digest()


def loads_db(data: bytes) -> PatternDatabase:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise PatternDBError("not a pattern database file")
    if len(data) < _PREFIX.size + _DIGEST or hashlib.sha256(data[:-_DIGEST]).digest() != data[-_DIGEST:]:
        raise ChecksumError("pattern database checksum mismatch (truncated or corrupted file)")
    _, version, hlen, blen = _PREFIX.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"database format version {version}, expected {FORMAT_VERSION}")
    if _PREFIX.size + hlen + blen + _DIGEST != len(data):
        raise ChecksumError("pattern database length mismatch")
    header = data[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8")
    body = json.loads(zlib.decompress(data[_PREFIX.size + hlen:_PREFIX.size + hlen + blen]).decode("utf-8"))
    space = LabelSpace.from_text(header)
    entries = {}
    for e in body["entries"]:
        entries[PatternVector.from_string(e["pattern"])] = [
            RankedReport(
                r["report_id"],
                tuple(StoredSentence(s["text"], tuple(s["labels"]), tuple(s["label_bits"])) for s in r["sentences"]),
                tuple(r["relevant"]),
                tuple(r["h"]),
                r["rank"],
            )
            for r in e["reports"]
        ]
    return PatternDatabase(space, entries, body["sentence_stats"])


def save_db(db: PatternDatabase, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_db(db))


def load_db(path) -> PatternDatabase:
    with open(path, "rb") as fh:
        return loads_db(fh.read())
