"""Fine finding label extraction from report sentences.

Four steps run per sentence: lexicon concept detection, phrasal grouping over
the dependency parse, negation-scope detection, and pattern completion from
lexicon knowledge (default locations, ontology roll-up).
"""

from __future__ import annotations

import re
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from .lexicon import LOCATION, MODIFIER_CATEGORIES, Lexicon
from .parsing import ParsedSentence, is_function_word, parse_report_text

# Negation scope never crosses these.
DEFAULT_BOUNDARIES = frozenset({"but", "however", "although", "though", "yet", "except", "whereas", "while", ";", ":"})
# Tokens allowed between two coordinated findings sharing one negation.
COORDINATORS = frozenset({",", "or", "nor", "and", "/"})
_LIST_CLOSERS = frozenset({"or", "nor"})

_CATEGORY_ORDER = {c: i for i, c in enumerate(MODIFIER_CATEGORIES)}


class LabelSyntaxError(ValueError):
    pass


@dataclass(frozen=True)
class FflLabel:
    """One finding description ``<type|yes/no|core|category:value|...>``.

    Modifiers are kept sorted (category order, then value) and de-duplicated,
    so equal descriptions serialize identically.
    """

    finding_type: str
    present: bool
    core: str
    modifiers: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):
        mods = sorted(set(tuple(m) for m in self.modifiers), key=lambda m: (_CATEGORY_ORDER.get(m[0], 99), m[0], m[1]))
        object.__setattr__(self, "modifiers", tuple(mods))
        for part in (self.finding_type, self.core, *(c for c, _ in mods), *(v for _, v in mods)):
            if not part or any(ch in part for ch in "|<>") or part != part.strip():
                raise LabelSyntaxError(f"illegal label field {part!r}")
        for c, _ in mods:
            if ":" in c:
                raise LabelSyntaxError(f"illegal modifier category {c!r}")

    @property
    def negation(self) -> str:
        return "yes" if self.present else "no"

    def serialize(self) -> str:
        fields = [self.finding_type, self.negation, self.core] + [f"{c}:{v}" for c, v in self.modifiers]
        return "<" + "|".join(fields) + ">"

    __str__ = serialize

    def bare(self) -> "FflLabel":
        return FflLabel(self.finding_type, self.present, self.core)

    def modifier_values(self, category: str) -> List[str]:
        return [v for c, v in self.modifiers if c == category]


def parse_label(text: str) -> FflLabel:
    text = text.strip()
    if not (text.startswith("<") and text.endswith(">")):
        raise LabelSyntaxError(f"label must be enclosed in <...>: {text!r}")
    parts = text[1:-1].split("|")
    if len(parts) < 3:
        raise LabelSyntaxError(f"label needs type, negation and core: {text!r}")
    t, n, c = parts[:3]
    if n not in ("yes", "no"):
        raise LabelSyntaxError(f"negation field must be yes or no: {text!r}")
    mods = []
    for m in parts[3:]:
        cat, sep, val = m.partition(":")
        if not sep:
            raise LabelSyntaxError(f"modifier must be category:value: {m!r}")
        mods.append((cat, val))
    return FflLabel(t, n == "yes", c, tuple(mods))


@dataclass(frozen=True)
class Concept:
    """A lexicon match over token indices (1-based, contiguous)."""

    indices: Tuple[int, ...]
    kind: str                       # "finding" | "modifier"
    value: str                      # finding id, or modifier term
    category: Optional[str] = None  # modifier category

    @property
    def start(self) -> int:
        return self.indices[0]

    @property
    def end(self) -> int:
        return self.indices[-1]


@dataclass(frozen=True)
class PhrasalGroup:
    token_indices: FrozenSet[int]
    concepts: Tuple[Concept, ...] = ()

    @property
    def cores(self) -> List[Concept]:
        return [c for c in self.concepts if c.kind == "finding"]

    @property
    def modifiers(self) -> List[Concept]:
        return [c for c in self.concepts if c.kind == "modifier"]

    @property
    def contains_core(self) -> bool:
        return bool(self.cores)

    @property
    def core_id(self) -> Optional[str]:
        cores = self.cores
        return cores[0].value if cores else None


@dataclass(frozen=True)
class Attachment:
    core: Concept
    modifiers: Tuple[Concept, ...]


@dataclass
class SentenceExtraction:
    report_id: str
    sentence_index: int
    text: str
    labels: List[FflLabel] = field(default_factory=list)
    provenance: List[Tuple[int, ...]] = field(default_factory=list)
    audit: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        return {
            "report_id": self.report_id,
            "sentence_index": self.sentence_index,
            "text": self.text,
            "labels": [l.serialize() for l in self.labels],
            "provenance": [list(p) for p in self.provenance],
            "audit": dict(sorted(self.audit.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SentenceExtraction":
        return cls(
            report_id=str(d["report_id"]),
            sentence_index=int(d["sentence_index"]),
            text=d.get("text", ""),
            labels=[parse_label(s) for s in d.get("labels", [])],
            provenance=[tuple(p) for p in d.get("provenance", [])],
            audit=Counter(d.get("audit", {})),
        )


# -- step (a): concept detection ------------------------------------------


def _scan(sentence: ParsedSentence, lex: Lexicon):
    return lex.scan([t.forms for t in sentence.tokens])


def detect_concepts(sentence: ParsedSentence, lex: Lexicon) -> List[Concept]:
    """Longest-match finding and modifier spans, left to right."""
    out = []
    for start, end, key in _scan(sentence, lex):
        idx = tuple(range(start + 1, end + 1))
        if key[0] == "finding":
            out.append(Concept(idx, "finding", key[1]))
        elif key[0] == "modifier":
            out.append(Concept(idx, "modifier", key[2], key[1]))
    return out


def detect_seeds(sentence: ParsedSentence, lex: Lexicon) -> List[Tuple[int, ...]]:
    """Token index tuples of negation seed terms not inside a concept span."""
    return [tuple(range(s + 1, e + 1)) for s, e, key in _scan(sentence, lex) if key[0] == "negation"]


# -- step (b): phrasal grouping --------------------------------------------


class _DSU:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def group_phrases(sentence: ParsedSentence, concepts: Sequence[Concept], lex: Optional[Lexicon] = None) -> List[PhrasalGroup]:
    """Connected components over word positions.

    Function words and punctuation separate groups.  Unknown tokens are
    skipped: they never belong to a group but a dependency path running only
    through unknown tokens still connects its known end points.  Tokens of one
    concept span always share a group.
    """
    in_span = {i for c in concepts for i in c.indices}
    nodes = [
        t.index for t in sentence.tokens if t.index in in_span or not is_function_word(t, lex)
    ]
    node_set = set(nodes)
    dsu = _DSU(nodes)
    for t in sentence.tokens:
        if t.index in node_set and t.head in node_set:
            dsu.union(t.index, t.head)
    for c in concepts:
        for i in c.indices[1:]:
            dsu.union(c.indices[0], i)

    known = {i for i in nodes if i in in_span or not sentence.token(i).is_unknown}
    members: Dict[int, set] = {}
    for i in nodes:
        if i in known:
            members.setdefault(dsu.find(i), set()).add(i)
    groups = []
    for root in sorted(members, key=lambda r: min(members[r])):
        idx = frozenset(members[root])
        groups.append(PhrasalGroup(idx, tuple(c for c in concepts if c.start in idx)))
    return groups


# -- modifier association ----------------------------------------------------


def _span_distance(a: Iterable[int], b: Iterable[int]) -> int:
    return min(abs(i - j) for i in a for j in b)


def _nearest(candidates, anchor: Iterable[int], key=lambda x: x.indices):
    """Nearest by token distance; ties go to the candidate further left."""
    anchor = list(anchor)
    return min(candidates, key=lambda c: (_span_distance(key(c), anchor), min(key(c))))


def _core_by_head_chain(sentence: ParsedSentence, mod: Concept, cores: Sequence[Concept]) -> Optional[Concept]:
    owner = {i: c for c in cores for i in c.indices}
    span = set(mod.indices)
    cur = next((i for i in mod.indices if sentence.token(i).head not in span), mod.indices[-1])
    seen = set()
    while cur and cur not in seen:
        if cur in owner:
            return owner[cur]
        seen.add(cur)
        cur = sentence.token(cur).head
    return None


def associate_modifiers(sentence: ParsedSentence, groups: Sequence[PhrasalGroup]) -> Tuple[List[Attachment], List[Concept]]:
    """Attach every modifier to one core finding.

    Within a group holding several cores the modifier goes to the core on its
    head chain, else to the nearest core.  Modifiers of coreless groups go to
    the nearest core-bearing group.  Returns (attachments in core order,
    discarded modifiers).
    """
    core_groups = [g for g in groups if g.contains_core]
    assigned: Dict[Concept, List[Concept]] = {c: [] for g in core_groups for c in g.cores}
    discarded = []
    for g in groups:
        if not g.modifiers:
            continue
        if g.contains_core:
            target_group = g
        elif core_groups:
            target_group = _nearest(core_groups, g.token_indices, key=lambda x: x.token_indices)
        else:
            discarded.extend(g.modifiers)
            continue
        cores = target_group.cores
        for m in g.modifiers:
            core = None
            if len(cores) == 1:
                core = cores[0]
            elif target_group is g:
                core = _core_by_head_chain(sentence, m, cores)
            if core is None:
                core = _nearest(cores, m.indices)
            assigned[core].append(m)
    attachments = [Attachment(c, tuple(assigned[c])) for c in sorted(assigned, key=lambda c: c.start)]
    return attachments, discarded


# -- step (c): negation --------------------------------------------------------


def _coordinated(sentence: ParsedSentence, a: Concept, b: Concept, modifier_tokens: set) -> bool:
    """Whether two finding spans form a coordinated list ("no A, B or C")."""
    first, second = (a, b) if a.start < b.start else (b, a)
    gap = range(first.end + 1, second.start)
    forms = [sentence.token(i).lemma.lower() for i in gap]
    for i, f in zip(gap, forms):
        if f not in COORDINATORS and i not in modifier_tokens:
            return False
    has_mod = any(i in modifier_tokens for i in gap)
    if "and" in forms and has_mod:
        return False
    if "," in forms and not _LIST_CLOSERS.intersection(forms):
        later = [t.lemma.lower() for t in sentence.tokens[second.end:]]
        if not _LIST_CLOSERS.intersection(later):
            return False
    return True


def negation_scopes(
    sentence: ParsedSentence,
    groups: Sequence[PhrasalGroup],
    lex: Lexicon,
    boundaries: FrozenSet[str] = DEFAULT_BOUNDARIES,
) -> List[FrozenSet[int]]:
    """Token scope of each negation seed, grown along dependency edges to a fixpoint.

    Expansion never enters or crosses a boundary word and never enters a
    phrasal group claimed by an earlier seed.  From a finding the scope only
    moves down to its dependents, or sideways/up to another finding joined
    to it by plain coordination.
    """
    concepts = [c for g in groups for c in g.concepts]
    finding_of = {i: c for c in concepts if c.kind == "finding" for i in c.indices}
    modifier_tokens = {i for c in concepts if c.kind == "modifier" for i in c.indices}
    group_of = {i: gi for gi, g in enumerate(groups) for i in g.token_indices}
    forms = {t.index: t.lemma.lower() for t in sentence.tokens}
    barrier = sorted(i for i, f in forms.items() if f in boundaries or sentence.token(i).surface.lower() in boundaries)
    children: Dict[int, List[int]] = {}
    for t in sentence.tokens:
        children.setdefault(t.head, []).append(t.index)

    def crosses(a, b):
        lo, hi = min(a, b), max(a, b)
        return any(lo < i < hi for i in barrier) or b in barrier

    claimed: set = set()
    scopes = []
    for seed in detect_seeds(sentence, lex):
        scope = set(seed)
        queue = deque(seed)
        while queue:
            t = queue.popleft()
            tf = finding_of.get(t)
            head = sentence.token(t).head
            neighbours = list(children.get(t, []))
            if head:
                neighbours.append(head)
                if tf is not None:
                    neighbours.extend(children.get(head, []))
            for n in sorted(set(neighbours)):
                if n in scope or crosses(t, n) or group_of.get(n) in claimed:
                    continue
                nf = finding_of.get(n)
                if tf is not None and nf is not tf:
                    if nf is None:
                        if sentence.token(n).head != t:
                            continue
                    elif not _coordinated(sentence, tf, nf, modifier_tokens):
                        continue
                new = set(nf.indices) if nf is not None else {n}
                new -= scope
                scope |= new
                queue.extend(sorted(new))
        claimed |= {group_of[i] for i in scope if i in group_of}
        scopes.append(frozenset(scope))
    return scopes


def detect_negation(
    sentence: ParsedSentence,
    groups: Sequence[PhrasalGroup],
    lex: Lexicon,
    boundaries: FrozenSet[str] = DEFAULT_BOUNDARIES,
) -> Dict[Concept, bool]:
    """Map each core finding concept to True when it lies inside a negation scope."""
    scope = set().union(*negation_scopes(sentence, groups, lex, boundaries))
    return {c: bool(scope.intersection(c.indices)) for g in groups for c in g.cores}


# -- step (d): pattern completion --------------------------------------------


def _complete(label: FflLabel, lex: Lexicon) -> Tuple[FflLabel, int, bool]:
    mods = list(label.modifiers)
    filled = False
    if not label.modifier_values(LOCATION):
        loc = lex.default_location(label.core)
        if loc is not None:
            mods.append((LOCATION, loc))
            filled = True
    core = lex.rollup(label.core)
    ftype = lex.finding(core).finding_type
    allowed = set(lex.allowed_categories(ftype))
    kept = [m for m in mods if m[0] in allowed]
    return FflLabel(ftype, label.present, core, tuple(kept)), len(mods) - len(kept), filled


def complete_pattern(labels: Iterable[FflLabel], lex: Lexicon) -> List[FflLabel]:
    """Insert default locations, roll cores up the ontology, drop disallowed modifiers."""
    return [_complete(l, lex)[0] for l in labels]


# -- composition ----------------------------------------------------------------


def extract_sentence(sentence: ParsedSentence, lex: Lexicon, boundaries: FrozenSet[str] = DEFAULT_BOUNDARIES) -> SentenceExtraction:
    audit: Counter = Counter()
    concepts = detect_concepts(sentence, lex)
    groups = group_phrases(sentence, concepts, lex)
    attachments, discarded = associate_modifiers(sentence, groups)
    negated = detect_negation(sentence, groups, lex, boundaries)
    audit.update(
        concepts=len(concepts),
        findings=sum(c.kind == "finding" for c in concepts),
        modifiers=sum(c.kind == "modifier" for c in concepts),
        groups=len(groups),
        seeds=len(detect_seeds(sentence, lex)),
        negated=sum(negated.values()),
        discarded_modifiers=len(discarded),
    )

    out = SentenceExtraction(sentence.report_id, sentence.sentence_index, sentence.raw_text, audit=audit)
    index: Dict[FflLabel, int] = {}
    for att in attachments:
        finding = lex.finding(att.core.value)
        raw = FflLabel(
            finding.finding_type,
            not negated[att.core],
            finding.id,
            tuple((m.category, m.value) for m in att.modifiers),
        )
        label, dropped, filled = _complete(raw, lex)
        audit["invalid_category_modifiers"] += dropped
        audit["completed_locations"] += int(filled)
        prov = set(att.core.indices)
        for m in att.modifiers:
            if (m.category, m.value) in label.modifiers:
                prov.update(m.indices)
        if label in index:
            k = index[label]
            out.provenance[k] = tuple(sorted(set(out.provenance[k]) | prov))
        else:
            index[label] = len(out.labels)
            out.labels.append(label)
            out.provenance.append(tuple(sorted(prov)))
    audit["labels"] = len(out.labels)
    return out


_HEADER_RE = re.compile(r"(?:^|(?<=\.)[ \t]+)[ \t]*([A-Za-z][A-Za-z /]{0,40}?)[ \t]*:", re.M)
_KNOWN_HEADERS = {
    "findings", "impression", "indication", "history", "clinical history", "comparison", "comparisons",
    "technique", "examination", "exam", "reason for exam", "recommendation", "recommendations",
    "notification", "conclusion", "procedure", "wet read", "final report",
}
_KEPT_SECTIONS = {"findings", "impression"}


def relevant_text(text: str) -> str:
    """Findings and Impression sections, or the whole text when neither header is present."""
    headers = []
    for m in _HEADER_RE.finditer(text):
        name = m.group(1).strip()
        if name.lower() in _KNOWN_HEADERS or (name.isupper() and len(name) > 2):
            headers.append((m.start(), m.end(), name.lower()))
    if not any(h[2] in _KEPT_SECTIONS for h in headers):
        return text
    parts = []
    for k, (_, body_start, name) in enumerate(headers):
        if name in _KEPT_SECTIONS:
            body_end = headers[k + 1][0] if k + 1 < len(headers) else len(text)
            parts.append(text[body_start:body_end].strip())
    return "\n\n".join(p for p in parts if p)


def extract_report(
    report,
    lex: Lexicon,
    report_id: str = "",
    boundaries: FrozenSet[str] = DEFAULT_BOUNDARIES,
) -> List[SentenceExtraction]:
    """Run the four extraction steps over a report.

    ``report`` is either raw text (section-filtered, split into sentences and
    parsed with the fallback parser) or a sequence of ParsedSentence.
    """
    if isinstance(report, str):
        sentences = parse_report_text(relevant_text(report), lex, report_id)
    else:
        sentences = list(report)
    return [extract_sentence(s, lex, boundaries) for s in sentences]
