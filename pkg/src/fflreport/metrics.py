"""Text-overlap metrics (BLEU, ROUGE-L, METEOR-lite) and extraction auditing.

All text metrics tokenize by lowercasing and taking ``\\w+`` runs.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .extraction import FflLabel, SentenceExtraction

_WORD_RE = re.compile(r"\w+")

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5


def tokenize(text: str) -> List[str]:
    return _WORD_RE.findall(text.lower())


def _tokens(x) -> List[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, refs: Sequence[Sequence[str]]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def _bleu_stats(cand: Sequence[str], refs: Sequence[Sequence[str]], n: int):
    matches, totals = [], []
    for k in range(1, n + 1):
        c = _ngrams(cand, k)
        max_ref: Counter = Counter()
        for r in refs:
            for g, cnt in _ngrams(r, k).items():
                max_ref[g] = max(max_ref[g], cnt)
        matches.append(sum(min(cnt, max_ref[g]) for g, cnt in c.items()))
        totals.append(max(len(cand) - k + 1, 0))
    return matches, totals, len(cand), _closest_ref_len(len(cand), refs)


def _bleu_from_stats(matches, totals, c_len, r_len, smooth: bool) -> float:
    if c_len == 0:
        return 0.0
    logs = []
    for k, (m, t) in enumerate(zip(matches, totals)):
        if smooth and k > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        logs.append(math.log(m / t))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(sum(logs) / len(logs))


def bleu_n(candidate, references, n: int = 4, smooth: bool = False) -> float:
    """Sentence BLEU-n: geometric mean of clipped 1..n-gram precisions times brevity penalty.

    ``smooth`` applies add-one smoothing to the 2..n-gram precisions.
    """
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    if isinstance(references, str):
        references = [references]
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references]
    if not cand or not refs:
        return 0.0
    return _bleu_from_stats(*_bleu_stats(cand, refs, n), smooth)


def corpus_bleu(candidates: Sequence, references: Sequence, n: int = 4, smooth: bool = False) -> float:
    """Corpus BLEU: n-gram matches, totals and lengths summed over pairs before the ratio."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    M, T = [0] * n, [0] * n
    C = R = 0
    for cand, refs in zip(candidates, references):
        if isinstance(refs, str):
            refs = [refs]
        cand = _tokens(cand)
        refs = [_tokens(r) for r in refs]
        m, t, c, r = _bleu_stats(cand, refs, n)
        M = [a + b for a, b in zip(M, m)]
        T = [a + b for a, b in zip(T, t)]
        C += c
        R += r
    return _bleu_from_stats(M, T, C, R, smooth)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure ``(1+b^2) P R / (R + b^2 P)``."""
    c, r = _tokens(candidate), _tokens(reference)
    if not c or not r:
        return 0.0
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)


_SUFFIXES = ("ations", "ation", "ings", "ing", "edly", "ness", "ies", "ied", "es", "ed", "ly", "s")


def stem(word: str) -> str:
    """Strip one common English suffix, keeping a stem of at least three letters."""
    for suf in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            base = word[: -len(suf)]
            if suf in ("ies", "ied"):
                base += "y"
            return base
    return word


def _align(cand: Sequence[str], ref: Sequence[str]) -> List[Tuple[int, int]]:
    pairs: Dict[int, int] = {}
    used = set()
    for key in (lambda w: w, stem):
        ref_keys = [key(w) for w in ref]
        last = None
        for i, w in enumerate(cand):
            if i in pairs:
                last = pairs[i]
                continue
            k = key(w)
            options = [j for j, rk in enumerate(ref_keys) if rk == k and j not in used]
            if not options:
                continue
            j = last + 1 if last is not None and last + 1 in options else options[0]
            pairs[i] = j
            used.add(j)
            last = j
    return sorted(pairs.items())


def meteor_lite(candidate, reference, alpha: float = METEOR_ALPHA, beta: float = METEOR_BETA,
                gamma: float = METEOR_GAMMA) -> float:
    """Unigram METEOR without synonym tables.

    Exact matches first, then suffix-stripped stems.  ``Fmean = P R / (alpha P
    + (1 - alpha) R)`` and the fragmentation penalty is ``gamma (chunks /
    matches)^beta``.  A candidate identical to the reference scores 1.
    """
    c, r = _tokens(candidate), _tokens(reference)
    if not c or not r:
        return 0.0
    if c == r:
        return 1.0
    align = _align(c, r)
    m = len(align)
    if m == 0:
        return 0.0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(align, align[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    p, rec = m / len(c), m / len(r)
    fmean = p * rec / (alpha * p + (1 - alpha) * rec)
    return fmean * (1 - gamma * (chunks / m) ** beta)


@dataclass
class MetricReport:
    bleu: Tuple[float, float, float, float]
    rouge_l: float
    meteor: float
    per_pair: Optional[Dict[str, dict]] = None

    def to_dict(self) -> dict:
        d = {
            "bleu_1": self.bleu[0], "bleu_2": self.bleu[1], "bleu_3": self.bleu[2], "bleu_4": self.bleu[3],
            "rouge_l": self.rouge_l, "meteor_lite": self.meteor,
        }
        if self.per_pair is not None:
            d["per_pair"] = self.per_pair
        return d


def evaluate_pairs(pairs: Mapping[str, Tuple[str, str]], smooth: bool = False) -> MetricReport:
    """Corpus BLEU-1..4 plus mean ROUGE-L and METEOR-lite over ``id -> (candidate, reference)``."""
    ids = sorted(pairs)
    cands = [pairs[i][0] for i in ids]
    refs = [pairs[i][1] for i in ids]
    per = {}
    for i in ids:
        c, r = pairs[i]
        per[i] = {
            **{f"bleu_{n}": bleu_n(c, [r], n, smooth) for n in range(1, 5)},
            "rouge_l": rouge_l(c, r),
            "meteor_lite": meteor_lite(c, r),
        }
    mean = lambda k: sum(p[k] for p in per.values()) / len(per) if per else 0.0
    return MetricReport(
        tuple(corpus_bleu(cands, refs, n, smooth) for n in range(1, 5)),
        mean("rouge_l"),
        mean("meteor_lite"),
        per,
    )


# -- extraction audit -----------------------------------------------------------------


class AlignmentError(ValueError):
    pass


@dataclass
class ExtractionAudit:
    reports: int = 0
    sentences: int = 0
    relevant_sentences: int = 0
    gold_labels: int = 0
    labels_extracted: int = 0
    missed_findings: int = 0
    overcalls: int = 0
    negation_errors: int = 0
    incorrect_modifiers: int = 0
    missed_modifiers: int = 0
    extracted_modifiers: int = 0

    @property
    def overcall_rate(self) -> float:
        return self.overcalls / self.labels_extracted if self.labels_extracted else 0.0

    @property
    def modifier_precision(self) -> float:
        if not self.extracted_modifiers:
            return 1.0
        return (self.extracted_modifiers - self.incorrect_modifiers) / self.extracted_modifiers

    @property
    def modifier_recall(self) -> float:
        correct = self.extracted_modifiers - self.incorrect_modifiers
        denom = correct + self.missed_modifiers
        return correct / denom if denom else 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(overcall_rate=self.overcall_rate, modifier_precision=self.modifier_precision,
                 modifier_recall=self.modifier_recall)
        return d


def _pair_labels(gold: List[FflLabel], got: List[FflLabel]):
    """Pair gold and extracted labels of the same core, best overlap first."""
    free = list(range(len(got)))
    pairs, missed = [], []
    for g in gold:
        options = [k for k in free if got[k].core == g.core]
        if not options:
            missed.append(g)
            continue
        gm = set(g.modifiers)
        k = max(options, key=lambda k: (got[k].present == g.present, len(gm & set(got[k].modifiers)), -k))
        free.remove(k)
        pairs.append((g, got[k]))
    return pairs, missed, [got[k] for k in free]


def audit_extraction(extractions: Iterable[SentenceExtraction], gold: Mapping[Tuple[str, int], List[FflLabel]]) -> ExtractionAudit:
    """Missed / overcalled findings and modifier association errors against gold labels.

    A label whose negation sense differs from gold counts as an overcall.
    Gold must cover exactly the extracted (report_id, sentence_index) keys.
    """
    ext = {(e.report_id, e.sentence_index): e for e in extractions}
    gold_keys = set(gold)
    if gold_keys != set(ext):
        missing = sorted(gold_keys - set(ext))[:5]
        extra = sorted(set(ext) - gold_keys)[:5]
        raise AlignmentError(f"gold/extraction keys differ: gold-only {missing}, extraction-only {extra}")
    audit = ExtractionAudit()
    audit.reports = len({k[0] for k in ext})
    for key in sorted(ext):
        got = list(ext[key].labels)
        want = list(gold[key])
        audit.sentences += 1
        audit.relevant_sentences += bool(want)
        audit.gold_labels += len(want)
        audit.labels_extracted += len(got)
        audit.extracted_modifiers += sum(len(l.modifiers) for l in got)
        pairs, missed, extra = _pair_labels(want, got)
        audit.missed_findings += len(missed)
        audit.overcalls += len(extra)
        for g, e in pairs:
            if g.present != e.present:
                audit.overcalls += 1
                audit.negation_errors += 1
            gm, em = set(g.modifiers), set(e.modifiers)
            audit.incorrect_modifiers += len(em - gm)
            audit.missed_modifiers += len(gm - em)
        for e in extra:
            audit.incorrect_modifiers += len(e.modifiers)
    return audit
