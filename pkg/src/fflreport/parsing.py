"""Dependency-parse token sequences for report sentences.

Two sources are supported.  The primary one is an external parser's output in
a tab-separated format, one token per row::

    # report_id = r17            (optional metadata lines)
    # sentence_index = 0
    # text = No pneumothorax.
    1<TAB>No<TAB>no<TAB>2<TAB>0
    2<TAB>pneumothorax<TAB>pneumothorax<TAB>0<TAB>0

with columns index, surface, lemma, head (0 = root) and unknown flag (``1``
or ``u`` for unknown, ``0`` otherwise).  Sentences are separated by a blank
line.  The second source, :func:`fallback_parse`, is a deterministic heuristic
so that the pipeline runs without any external tool.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

from .text import PUNCT_TOKENS, tokenize

# Closed-class words a real parser would always resolve.  They are never
# is_unknown and they separate phrasal groups.
FUNCTION_WORDS = frozenset(
    """
    a an the this that these those there here it its is are was were be been being
    has have had of in on at to into onto from by with within for as than
    and or but nor however although though yet except whereas while also
    which who whose what when where
    may might can could would should will
    no not without none
    """.split()
)

_ABBREVIATIONS = frozenset({"dr", "mr", "mrs", "ms", "vs", "approx", "e.g", "i.e", "etc", "fig", "st", "cf"})


class ParseFormatError(ValueError):
    """A row of a parse file could not be read."""


class ParseStructureError(ValueError):
    """Head indices of a sentence do not form a single-rooted tree."""


@dataclass(frozen=True)
class Token:
    index: int
    surface: str
    lemma: str
    head: int
    is_unknown: bool = False

    @property
    def forms(self) -> Tuple[str, ...]:
        s, l = self.surface.lower(), self.lemma.lower()
        return (s,) if s == l else (s, l)


@dataclass(frozen=True)
class ParsedSentence:
    report_id: str
    sentence_index: int
    tokens: Tuple[Token, ...]
    raw_text: str = ""

    def __len__(self):
        return len(self.tokens)

    def token(self, index: int) -> Token:
        return self.tokens[index - 1]

    def dependents(self, index: int) -> List[int]:
        return [t.index for t in self.tokens if t.head == index]


def is_function_word(token: Token, lex=None) -> bool:
    form = token.lemma.lower()
    if token.surface in PUNCT_TOKENS or form in FUNCTION_WORDS:
        return True
    return lex is not None and (form,) in lex.seeds


def check_tree(tokens: Sequence[Token], where: str = "") -> None:
    """Raise ParseStructureError unless tokens form a single-rooted tree."""
    n = len(tokens)
    for pos, tok in enumerate(tokens, start=1):
        if tok.index != pos:
            raise ParseStructureError(f"{where}token indices not contiguous at position {pos}")
        if not 0 <= tok.head <= n:
            raise ParseStructureError(f"{where}token {tok.index}: head {tok.head} out of range")
        if tok.head == tok.index:
            raise ParseStructureError(f"{where}token {tok.index}: head equals own index")
    if n == 0:
        return
    roots = [t.index for t in tokens if t.head == 0]
    if len(roots) != 1:
        raise ParseStructureError(f"{where}expected exactly one root, found {len(roots)}")
    heads = {t.index: t.head for t in tokens}
    for start in heads:
        seen = set()
        cur = start
        while cur != 0:
            if cur in seen:
                raise ParseStructureError(f"{where}cycle through token {cur}")
            seen.add(cur)
            cur = heads[cur]


def _parse_flag(value: str, lineno: int) -> bool:
    v = value.strip().lower()
    if v in ("1", "u", "true"):
        return True
    if v in ("0", "", "-", "false"):
        return False
    raise ParseFormatError(f"line {lineno}: bad unknown flag {value!r}")


def read_parse(lines: Iterable[str], source: str = "<parse>") -> List[ParsedSentence]:
    sentences: List[ParsedSentence] = []
    meta: dict = {}
    rows: List[Token] = []

    def flush():
        nonlocal rows, meta
        if not rows and not meta:
            return
        idx = int(meta.get("sentence_index", len(sentences)))
        check_tree(rows, where=f"{source}: sentence {idx}: ")
        text = meta.get("text", " ".join(t.surface for t in rows))
        sentences.append(ParsedSentence(meta.get("report_id", ""), idx, tuple(rows), text))
        rows, meta = [], {}

    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise ParseFormatError(f"{source}: line {lineno}: expected 5 tab-separated fields, got {len(cols)}")
        try:
            index, head = int(cols[0]), int(cols[3])
        except ValueError:
            raise ParseFormatError(f"{source}: line {lineno}: index and head must be integers") from None
        rows.append(Token(index, cols[1], cols[2], head, _parse_flag(cols[4], lineno)))
    flush()
    return sentences


def ingest_parse(path) -> List[ParsedSentence]:
    """Read an external parser's output file."""
    with open(path, encoding="utf-8") as fh:
        return read_parse(fh, source=str(path))


def format_parse(sentences: Iterable[ParsedSentence]) -> str:
    blocks = []
    for s in sentences:
        lines = [
            f"# report_id = {s.report_id}",
            f"# sentence_index = {s.sentence_index}",
            f"# text = {' '.join(s.raw_text.split())}",
        ]
        for t in s.tokens:
            lines.append(f"{t.index}\t{t.surface}\t{t.lemma}\t{t.head}\t{int(t.is_unknown)}")
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def write_parse(sentences: Iterable[ParsedSentence], path) -> None:
    Path(path).write_text(format_parse(sentences), encoding="utf-8")


_BOUNDARY_RE = re.compile(r"\.(?=\s+[A-Z])|\.\s*$|\n\s*\n|\n(?=[ \t]*[A-Z])")


def split_sentences(text: str) -> List[str]:
    """Split report text on period/newline + capital or end of text.

    A period after a listed abbreviation ("e.g.", "Dr.") is not a boundary.
    """
    out = []
    start = 0
    for m in _BOUNDARY_RE.finditer(text):
        if m.group().startswith("."):
            words = text[start:m.start()].split()
            if words and words[-1].lower().rstrip(".") in _ABBREVIATIONS:
                continue
            end = m.start() + 1
        else:
            end = m.start()
        piece = " ".join(text[start:end].split())
        if piece and piece != ".":
            out.append(piece)
        start = m.end()
    tail = " ".join(text[start:].split())
    if tail and tail != ".":
        out.append(tail)
    return out


def fallback_parse(raw_text: str, lex=None, report_id: str = "", sentence_index: int = 0) -> ParsedSentence:
    """Heuristic dependency parse.

    Tokens are words and clause punctuation.  Lexicon spans are matched
    longest-first.  Runs of non-function tokens form chunks; inside a chunk a
    token attaches to the nearest following noun-like token (finding head,
    location word, unresolved word), otherwise to the chunk head, which is the
    chunk's last finding if it has one.  Non-final tokens of a lexicon span
    attach to the span's final token.  Function words attach to the next chunk
    in their comma segment (else the previous chunk) and every chunk head
    attaches to the chunk of the first finding, or to the last chunk when the
    sentence has no finding.
    """
    surfaces = tokenize(raw_text)
    n = len(surfaces)
    if n == 0:
        return ParsedSentence(report_id, sentence_index, (), raw_text)
    lemmas = [s.lower() for s in surfaces]
    spans = lex.scan([(l,) for l in lemmas]) if lex is not None else []

    kind = ["other"] * n          # finding | modifier | seed | func | punct | other
    span_end = list(range(n))     # position of the final token of the token's span
    noun_like = [False] * n
    for start, end, key in spans:
        for p in range(start, end):
            kind[p] = key[0] if key[0] != "negation" else "seed"
            span_end[p] = end - 1
        if key[0] == "finding" or (key[0] == "modifier" and key[1] == "location"):
            noun_like[end - 1] = True
    for p in range(n):
        if kind[p] == "other":
            if surfaces[p] in PUNCT_TOKENS:
                kind[p] = "punct"
            elif lemmas[p] in FUNCTION_WORDS:
                kind[p] = "func"
            else:
                noun_like[p] = True
    unknown = [k == "other" for k in kind]

    chunks: List[List[int]] = []
    for p in range(n):
        if kind[p] in ("func", "seed", "punct"):
            continue
        if chunks and chunks[-1][-1] == p - 1:
            chunks[-1].append(p)
        else:
            chunks.append([p])

    heads = [-1] * n
    chunk_head = {}
    chunk_of = {}
    for ci, chunk in enumerate(chunks):
        finals = [p for p in chunk if kind[p] == "finding" and span_end[p] == p]
        nouns = [p for p in chunk if noun_like[p]]
        h = finals[-1] if finals else (nouns[-1] if nouns else chunk[-1])
        chunk_head[ci] = h
        for p in chunk:
            chunk_of[p] = ci
        for p in chunk:
            if p == h:
                continue
            if span_end[p] != p:
                heads[p] = span_end[p]
                continue
            following = [q for q in chunk if q > p and noun_like[q]]
            heads[p] = following[0] if following else h

    first_finding = next((p for p in range(n) if kind[p] == "finding"), None)
    if first_finding is not None:
        root = chunk_head[chunk_of[first_finding]]
    elif chunks:
        root = chunk_head[len(chunks) - 1]
    else:
        root = n - 1
    for ci, h in chunk_head.items():
        heads[h] = root if h != root else -1

    for p in range(n):
        if p in chunk_of or p == root:
            continue
        nxt = prev = None
        for ci, chunk in enumerate(chunks):
            if chunk[0] > p and nxt is None:
                between = range(p + 1, chunk[0])
                if kind[p] != "punct" and not any(kind[q] == "punct" for q in between):
                    nxt = ci
            if chunk[-1] < p:
                prev = ci
        if kind[p] == "punct":
            target = prev if prev is not None else nxt
        else:
            target = nxt if nxt is not None else prev
        heads[p] = chunk_head[target] if target is not None else root

    tokens = tuple(
        Token(p + 1, surfaces[p], lemmas[p], 0 if p == root else heads[p] + 1, unknown[p]) for p in range(n)
    )
    return ParsedSentence(report_id, sentence_index, tokens, raw_text)


def parse_report_text(text: str, lex=None, report_id: str = "") -> List[ParsedSentence]:
    return [fallback_parse(s, lex, report_id, i) for i, s in enumerate(split_sentences(text))]
