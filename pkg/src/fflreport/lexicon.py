"""Core-finding and modifier vocabulary.

A lexicon is a UTF-8 JSON document with top-level arrays ``findings``,
``modifiers`` and ``negation_seeds`` (plus optional ``version`` and
``finding_types``).  The JSON Schema in ``data/lexicon_schema.json`` covers the
structure; :func:`validate_lexicon_data` adds the semantic checks (unique ids,
acyclic ontology, unambiguous terms).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import jsonschema

from .text import normalize_term, term_tokens

FINDING_TYPES = (
    "anatomical",
    "tubes_lines",
    "device",
    "viewpoint",
    "disease",
    "technical",
)

MODIFIER_CATEGORIES = (
    "laterality",
    "location",
    "severity",
    "size",
    "appearance",
    "count",
    "temporal",
    "shape",
    "distribution",
)

LOCATION = "location"


class LexiconError(ValueError):
    """Lexicon file violates the schema or a semantic invariant."""


class DuplicateIdError(LexiconError):
    pass


class OntologyCycleError(LexiconError):
    pass


@dataclass(frozen=True)
class CoreFinding:
    id: str
    canonical_name: str
    finding_type: str
    synonyms: Tuple[str, ...]
    criticality: int
    ontology_parent: Optional[str] = None
    default_location: Optional[str] = None
    is_core: bool = True


@dataclass(frozen=True)
class ModifierDef:
    category: str
    terms: Tuple[str, ...]


# A concept key: ("finding", finding_id) or ("modifier", category, term).
ConceptKey = Tuple[str, ...]


@dataclass(frozen=True)
class Lexicon:
    findings: Tuple[CoreFinding, ...]
    modifiers: Tuple[ModifierDef, ...]
    negation_seeds: Tuple[str, ...]
    version: str = ""
    finding_types: Tuple[Tuple[str, Tuple[str, ...]], ...] = ()

    _by_id: Dict[str, CoreFinding] = field(default_factory=dict, compare=False, repr=False)
    _terms: Dict[Tuple[str, ...], ConceptKey] = field(default_factory=dict, compare=False, repr=False)
    _modifier_category: Dict[str, str] = field(default_factory=dict, compare=False, repr=False)
    _seeds: Dict[Tuple[str, ...], str] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self._by_id.update({f.id: f for f in self.findings})
        for f in self.findings:
            for syn in f.synonyms:
                self._terms[term_tokens(syn)] = ("finding", f.id)
        for m in self.modifiers:
            for term in m.terms:
                self._terms[term_tokens(term)] = ("modifier", m.category, normalize_term(term))
                self._modifier_category[normalize_term(term)] = m.category
        for seed in self.negation_seeds:
            self._seeds[term_tokens(seed)] = normalize_term(seed)

    # -- lookups ---------------------------------------------------------

    def finding(self, finding_id: str) -> CoreFinding:
        try:
            return self._by_id[finding_id]
        except KeyError:
            raise KeyError(f"unknown finding id {finding_id!r}") from None

    def __contains__(self, finding_id) -> bool:
        return finding_id in self._by_id

    @property
    def terms(self) -> Dict[Tuple[str, ...], ConceptKey]:
        """Token tuple -> concept key for every synonym and modifier term."""
        return self._terms

    @property
    def seeds(self) -> Dict[Tuple[str, ...], str]:
        return self._seeds

    def scan(self, tokens: List[Tuple[str, ...]]) -> List[Tuple[int, int, ConceptKey]]:
        """Greedy longest-match scan over token alternatives.

        ``tokens`` holds, per position, the lowercased forms a token may match
        by (surface, lemma).  Returns ``(start, end, key)`` with ``end``
        exclusive; keys are concept keys or ``("negation", seed)``.  A concept
        term beats a negation seed of the same length.
        """
        out = []
        i, n = 0, len(tokens)
        trie = self._trie()
        while i < n:
            best = None
            stack = [(i, trie)]
            while stack:
                j, node = stack.pop()
                if "$" in node:
                    key = node["$"]
                    length = j - i
                    if best is None or length > best[0] or (length == best[0] and best[1][0] == "negation"):
                        best = (length, key)
                if j < n:
                    for form in set(tokens[j]):
                        if form in node:
                            stack.append((j + 1, node[form]))
            if best is None:
                i += 1
                continue
            out.append((i, i + best[0], best[1]))
            i += best[0]
        return out

    def _trie(self) -> dict:
        trie = self.__dict__.get("_trie_cache")
        if trie is None:
            trie = {}
            entries = [(k, ("negation", v)) for k, v in self._seeds.items()] + list(self._terms.items())
            for key, value in entries:
                node = trie
                for tok in key:
                    node = node.setdefault(tok, {})
                if "$" not in node or node["$"][0] == "negation":
                    node["$"] = value
            object.__setattr__(self, "_trie_cache", trie)
        return trie

    def modifier_category(self, term: str) -> Optional[str]:
        return self._modifier_category.get(normalize_term(term))

    def allowed_categories(self, finding_type: str) -> Tuple[str, ...]:
        for name, cats in self.finding_types:
            if name == finding_type:
                return cats
        return MODIFIER_CATEGORIES

    def rollup(self, finding_id: str) -> str:
        """Nearest ancestor (inclusive) flagged as a core finding."""
        f = self.finding(finding_id)
        while not f.is_core:
            f = self._by_id[f.ontology_parent]
        return f.id

    def default_location(self, finding_id: str) -> Optional[str]:
        """Default location of a finding, inherited from ancestors when unset."""
        f = self.finding(finding_id)
        while f.default_location is None and f.ontology_parent is not None:
            f = self._by_id[f.ontology_parent]
        return f.default_location

    def weight(self, finding_id: str) -> float:
        """Normalized clinical criticality in (0, 1]."""
        return self.finding(self.rollup(finding_id)).criticality / 10.0

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        findings = []
        for f in self.findings:
            d = {
                "id": f.id,
                "canonical_name": f.canonical_name,
                "finding_type": f.finding_type,
                "synonyms": list(f.synonyms),
                "criticality": f.criticality,
                "is_core": f.is_core,
            }
            if f.ontology_parent is not None:
                d["ontology_parent"] = f.ontology_parent
            if f.default_location is not None:
                d["default_location"] = f.default_location
            findings.append(d)
        return {
            "version": self.version,
            "finding_types": {name: list(cats) for name, cats in self.finding_types},
            "findings": findings,
            "modifiers": [{"category": m.category, "terms": list(m.terms)} for m in self.modifiers],
            "negation_seeds": list(self.negation_seeds),
        }


@lru_cache(maxsize=1)
def _schema() -> dict:
    return json.loads(resources.files("fflreport.data").joinpath("lexicon_schema.json").read_text("utf-8"))


def _record_name(data: dict, path: Iterable) -> str:
    path = list(path)
    if len(path) >= 2 and path[0] == "findings" and isinstance(path[1], int):
        rec = data["findings"][path[1]]
        ident = rec.get("id") if isinstance(rec, dict) else None
        return f"findings[{path[1]}]" + (f" (id={ident!r})" if ident else "")
    return "/".join(str(p) for p in path) or "<root>"


def validate_lexicon_data(data: dict) -> List[str]:
    """Return every problem found in a raw lexicon document (empty when valid)."""
    problems = []
    validator = jsonschema.Draft202012Validator(_schema())
    for err in sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path))):
        problems.append(f"{_record_name(data, err.absolute_path)}: {err.message}")
    if problems:
        return problems

    types = data.get("finding_types") or {t: list(MODIFIER_CATEGORIES) for t in FINDING_TYPES}
    categories = [m["category"] for m in data["modifiers"]]
    if len(set(categories)) != len(categories):
        problems.append("modifiers: duplicate category")
    if len(set(categories)) != len(MODIFIER_CATEGORIES):
        problems.append(f"modifiers: expected {len(MODIFIER_CATEGORIES)} categories, found {len(set(categories))}")
    for name, cats in types.items():
        for c in cats:
            if c not in categories:
                problems.append(f"finding_types[{name!r}]: unknown modifier category {c!r}")

    ids = {}
    for i, rec in enumerate(data["findings"]):
        if rec["id"] in ids:
            problems.append(f"findings[{i}] (id={rec['id']!r}): duplicate id (first at findings[{ids[rec['id']]}])")
        else:
            ids[rec["id"]] = i
        if rec["finding_type"] not in types:
            problems.append(f"findings[{i}] (id={rec['id']!r}): unknown finding_type {rec['finding_type']!r}")
        syns = [normalize_term(s) for s in rec["synonyms"]]
        if len(set(syns)) != len(syns):
            problems.append(f"findings[{i}] (id={rec['id']!r}): duplicate synonym")

    owner = {}
    for i, rec in enumerate(data["findings"]):
        for s in rec["synonyms"]:
            key = term_tokens(s)
            if not key:
                problems.append(f"findings[{i}] (id={rec['id']!r}): synonym {s!r} has no word tokens")
            elif key in owner and owner[key] != rec["id"]:
                problems.append(f"findings[{i}] (id={rec['id']!r}): synonym {s!r} already maps to {owner[key]!r}")
            owner.setdefault(key, rec["id"])
    for m in data["modifiers"]:
        for t in m["terms"]:
            key = term_tokens(t)
            if not key:
                problems.append(f"modifiers[{m['category']!r}]: term {t!r} has no word tokens")
            elif key in owner and owner[key] != m["category"]:
                problems.append(f"modifiers[{m['category']!r}]: term {t!r} already maps to {owner[key]!r}")
            owner.setdefault(key, m["category"])

    by_id = {rec["id"]: rec for rec in data["findings"]}
    for rec in data["findings"]:
        parent = rec.get("ontology_parent")
        if parent is not None and parent not in by_id:
            problems.append(f"finding {rec['id']!r}: ontology_parent {parent!r} does not exist")
    if problems:
        return problems
    for rec in data["findings"]:
        seen = [rec["id"]]
        cur = rec
        while cur.get("ontology_parent") is not None:
            cur = by_id[cur["ontology_parent"]]
            if cur["id"] in seen:
                problems.append(f"finding {rec['id']!r}: cyclic ontology {' -> '.join(seen + [cur['id']])}")
                break
            seen.append(cur["id"])
        else:
            if not cur.get("is_core", True):
                problems.append(f"finding {rec['id']!r}: ontology root {cur['id']!r} is not a core finding")
    return problems


def lexicon_from_dict(data: dict) -> Lexicon:
    problems = validate_lexicon_data(data)
    if problems:
        msg = "; ".join(problems)
        if any("duplicate id" in p for p in problems):
            raise DuplicateIdError(msg)
        if any("cyclic ontology" in p for p in problems):
            raise OntologyCycleError(msg)
        raise LexiconError(msg)
    findings = tuple(
        CoreFinding(
            id=rec["id"],
            canonical_name=rec.get("canonical_name", rec["id"]),
            finding_type=rec["finding_type"],
            synonyms=tuple(normalize_term(s) for s in rec["synonyms"]),
            criticality=rec["criticality"],
            ontology_parent=rec.get("ontology_parent"),
            default_location=rec.get("default_location"),
            is_core=rec.get("is_core", rec.get("ontology_parent") is None),
        )
        for rec in data["findings"]
    )
    modifiers = tuple(
        ModifierDef(m["category"], tuple(normalize_term(t) for t in m["terms"])) for m in data["modifiers"]
    )
    types = data.get("finding_types") or {t: list(MODIFIER_CATEGORIES) for t in FINDING_TYPES}
    return Lexicon(
        findings=findings,
        modifiers=modifiers,
        negation_seeds=tuple(normalize_term(s) for s in data["negation_seeds"]),
        version=data.get("version", ""),
        finding_types=tuple((name, tuple(cats)) for name, cats in types.items()),
    )


def load_lexicon(path) -> Lexicon:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise LexiconError(f"{path}: not valid JSON ({e})") from e
    return lexicon_from_dict(data)


def save_lexicon(lex: Lexicon, path) -> None:
    Path(path).write_text(json.dumps(lex.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


DEMO_LEXICON_PATH = resources.files("fflreport.data").joinpath("demo_lexicon.json")


@lru_cache(maxsize=1)
def demo_lexicon() -> Lexicon:
    """The bundled 78-finding demonstration lexicon."""
    return lexicon_from_dict(json.loads(DEMO_LEXICON_PATH.read_text("utf-8")))
