"""Independent reference implementations and synthetic corpora used by tests."""

import itertools
import math
import random

import numpy as np

from fflreport.extraction import FflLabel, SentenceExtraction
from fflreport.patterndb import LabelSpace, PatternVector, build_database
from fflreport.text import normalize_sentence

CORES = ["opacity", "pleural_effusion", "pneumothorax", "cardiomegaly", "atelectasis", "pulmonary_edema"]


def toy_space(n_fine=0, weights=None):
    """Bare labels for CORES (yes/no) plus optional fine variants."""
    keys = []
    for c in CORES:
        for present in (True, False):
            keys.append(FflLabel("anatomical", present, c).serialize())
    bare = len(keys)
    for k in range(n_fine):
        keys.append(FflLabel("anatomical", True, CORES[k % len(CORES)], (("severity", f"s{k}"),)).serialize())
    w = weights or [0.1 * (1 + (i % 10)) for i in range(len(keys))]
    return LabelSpace(tuple(keys), tuple(w), tuple(0 for _ in keys), tuple(range(bare)))


def sentence_pool(rng, size, space, max_labels=2, empty_share=0.2):
    pool = []
    for k in range(size):
        if rng.random() < empty_share:
            labels = []
        else:
            labels = [space.label(i) for i in rng.sample(range(len(space)), rng.randint(1, max_labels))]
        pool.append((f"Sentence number {k}.", labels))
    return pool


def synthetic_corpus(rng, n_reports, pool, max_sentences=4):
    ext = []
    for r in range(n_reports):
        picks = [rng.randrange(len(pool)) for _ in range(rng.randint(1, max_sentences))]
        for j, p in enumerate(picks):
            text, labels = pool[p]
            ext.append(SentenceExtraction(f"rep{r:03d}", j, text, list(labels)))
    return ext


def rank_oracle(extractions, space):
    """Rank(R) = sum over R's distinct relevant sentences s of |{R' in group : s in R'}| / |group|.

    Written as the literal double loop: for every report, for every other
    report of the same pattern, test containment sentence by sentence.
    """
    reports = {}
    for e in extractions:
        reports.setdefault(e.report_id, []).append(e)
    key_of = {label: i for i, label in enumerate(space.keys)}

    def mapped(label):
        exact = key_of.get(label.serialize())
        if exact is not None:
            return exact
        best = None
        for i, k in enumerate(space.keys):
            cand = space.label(i)
            if (cand.finding_type, cand.present, cand.core) == (label.finding_type, label.present, label.core) \
                    and set(cand.modifiers) <= set(label.modifiers):
                score = (-len(cand.modifiers), k)
                if best is None or score < best[0]:
                    best = (score, i)
        return None if best is None else best[1]

    pattern, relevant = {}, {}
    for rid, sents in reports.items():
        bits = set()
        rel = []
        for s in sorted(sents, key=lambda e: e.sentence_index):
            idx = [mapped(l) for l in s.labels]
            idx = [i for i in idx if i is not None]
            bits.update(idx)
            if idx:
                key = normalize_sentence(s.text)
                if key not in rel:
                    rel.append(key)
        pattern[rid] = tuple(sorted(bits))
        relevant[rid] = rel
    ranks = {}
    for rid in reports:
        group = [o for o in reports if pattern[o] == pattern[rid]]
        total = 0.0
        for s in relevant[rid]:
            count = 0
            for other in group:
                if s in relevant[other]:
                    count += 1
            total += count / len(group)
        ranks[rid] = (pattern[rid], total)
    return ranks


def naive_distance(p, q, weights):
    return math.sqrt(sum(w * (int(a) - int(b)) ** 2 for a, b, w in zip(p, q, weights))) / len(weights)


def naive_nearest(q, patterns, weights):
    return min(naive_distance(q, p, weights) for p in patterns)


def large_db(n_patterns=924, n_sentences=5246, n_labels=40, seed=5):
    """Synthetic database with exactly ``n_patterns`` patterns and ``n_sentences`` distinct sentences."""
    rng = random.Random(seed)
    keys = [FflLabel("anatomical", True, f"finding{i:02d}").serialize() for i in range(n_labels)]
    space = LabelSpace(tuple(keys), tuple(0.1 + 0.9 * rng.random() for _ in keys), tuple(1 for _ in keys),
                       tuple(range(n_labels)))
    patterns = set()
    while len(patterns) < n_patterns:
        patterns.add(tuple(sorted(rng.sample(range(n_labels), rng.randint(1, 5)))))
    patterns = sorted(patterns)
    ext = []
    sid = 0
    per = n_sentences // n_patterns
    extra = n_sentences - per * n_patterns
    for k, bits in enumerate(patterns):
        count = per + (1 if k < extra else 0)
        labels = [space.label(i) for i in bits]
        for j in range(count):
            # every sentence carries one of the pattern's labels so the report keeps its pattern
            ext.append(SentenceExtraction(f"r{k:04d}", j, f"Distinct sentence {sid}.", [labels[j % len(labels)]]))
            sid += 1
        for b, lab in enumerate(labels[count:]):
            ext[-1].labels.append(lab)
    return build_database(ext, space=space), patterns, space


def exhaustive_calibration(scores, truth, grid, mode="image"):
    """Minimum loss over every assignment of grid thresholds to labels."""
    from fflreport.calibration import loss

    best = math.inf
    for theta in itertools.product(grid, repeat=scores.shape[1]):
        best = min(best, loss(scores, truth, theta, mode))
    return best


def random_instance(rng, max_images=6, max_labels=3, grid=(0.0, 0.25, 0.5, 0.75, 1.0)):
    n = rng.randint(1, max_images)
    m = rng.randint(1, max_labels)
    s = np.array([[rng.choice(grid) for _ in range(m)] for _ in range(n)])
    t = np.array([[float(rng.random() < 0.5) for _ in range(m)] for _ in range(n)])
    return s, t


def pattern_bits(v: PatternVector):
    return tuple(int(b) for b in v.bits)
