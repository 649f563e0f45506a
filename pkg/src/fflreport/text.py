"""Shared tokenization and sentence normalization helpers."""

import re

# Words keep inner hyphens/apostrophes ("ill-defined", "port-a-cath"); a few
# clause punctuation marks survive as their own tokens.
TOKEN_RE = re.compile(r"[A-Za-z0-9]+(?:['\-][A-Za-z0-9]+)*|[,;:]")
PUNCT_TOKENS = frozenset({",", ";", ":"})


def tokenize(text):
    """Split text into word and clause-punctuation tokens."""
    return TOKEN_RE.findall(text)


def term_tokens(term):
    """Lowercased word tokens of a lexicon term, punctuation dropped."""
    return tuple(t.lower() for t in TOKEN_RE.findall(term) if t not in PUNCT_TOKENS)


def normalize_term(term):
    return " ".join(term.lower().split())


def normalize_sentence(text):
    """Sentence identity key: lowercase, collapsed whitespace, no terminal punctuation."""
    s = " ".join(text.lower().split())
    return s.rstrip(" .!?;:,")
