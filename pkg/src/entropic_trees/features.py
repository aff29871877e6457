"""Bag-of-words features for post texts.

Vocabulary selection keeps the most document-frequent terms, vectors are
term-count times smoothed inverse document frequency, and every row is
L2-normalized.  All of it is deterministic: term order is lexicographic
and frequency ties break the same way.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

_WORD = re.compile(r"\w+")

DEFAULT_MAX_DIMS = 5000


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; punctuation never makes it through."""
    return _WORD.findall(text.lower())


@dataclass
class TfidfVocabulary:
    """Frozen term set with document frequencies from the fitting corpus."""

    terms: list[str]
    df: list[int]
    n_docs: int
    index: dict[str, int] = field(init=False, repr=False)
    idf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.terms) != len(self.df):
            raise ValueError("terms and df must be parallel")
        if self.n_docs < 0:
            raise ValueError("n_docs must be nonnegative")
        if any(self.terms[i] >= self.terms[i + 1] for i in range(len(self.terms) - 1)):
            raise ValueError("terms must be strictly sorted")
        self.index = {t: i for i, t in enumerate(self.terms)}
        n = self.n_docs
        self.idf = np.array(
            [math.log((1 + n) / (1 + d)) + 1.0 for d in self.df], dtype=np.float64
        )

    @property
    def n_dims(self) -> int:
        return len(self.terms)

    def transform(self, texts: list[str]) -> np.ndarray:
        """Rows of L2-normalized tf-idf; an all-unknown text stays zero."""
        out = np.zeros((len(texts), len(self.terms)), dtype=np.float64)
        index = self.index
        for i, text in enumerate(texts):
            row = out[i]
            for tok in tokenize(text):
                j = index.get(tok)
                if j is not None:
                    row[j] += 1.0
            row *= self.idf
            norm = math.sqrt(float(row @ row))
            if norm > 0.0:
                row /= norm
        return out

    def to_payload(self) -> dict:
        return {"terms": self.terms, "df": self.df, "n_docs": self.n_docs}

    @classmethod
    def from_payload(cls, payload: dict) -> "TfidfVocabulary":
        return cls(
            terms=list(payload["terms"]),
            df=[int(d) for d in payload["df"]],
            n_docs=int(payload["n_docs"]),
        )


def fit_vocabulary(texts: list[str], max_dims: int = DEFAULT_MAX_DIMS) -> TfidfVocabulary:
    """Pick the max_dims most document-frequent terms, ties lexicographic."""
    if not texts:
        raise ValueError("cannot fit a vocabulary on an empty corpus")
    if max_dims < 1:
        raise ValueError(f"max_dims must be >= 1, got {max_dims}")
    df: dict[str, int] = {}
    for text in texts:
        for tok in set(tokenize(text)):
            df[tok] = df.get(tok, 0) + 1
    ranked = sorted(df, key=lambda t: (-df[t], t))[:max_dims]
    terms = sorted(ranked)
    return TfidfVocabulary(terms=terms, df=[df[t] for t in terms], n_docs=len(texts))
