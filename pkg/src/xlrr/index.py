"""Analyzers, inverted index and BM25 first-stage retrieval."""

from __future__ import annotations

import json
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Iterable, Sequence

from nltk.stem.porter import PorterStemmer

from .corpus import Collection, Query, atomic_write_text
from .errors import FormatError, UnknownIdError, XlrrError

# Lucene's classic English stop set.
ENGLISH_STOPWORDS = frozenset(
    "a an and are as at be but by for if in into is it no not of on or such "
    "that the their then there these they this to was will with".split()
)

_NON_ALNUM = re.compile(r"[^0-9a-z]+")
_stemmer = PorterStemmer(mode=PorterStemmer.MARTIN_EXTENSIONS)


class TokenizerMode(str, Enum):
    ENGLISH = "english"
    WHITESPACE = "whitespace"


@dataclass(frozen=True)
class TokenizerConfig:
    mode: TokenizerMode = TokenizerMode.ENGLISH

    def __post_init__(self):
        object.__setattr__(self, "mode", TokenizerMode(self.mode))


@lru_cache(maxsize=65536)
def _stem(term: str) -> str:
    return _stemmer.stem(term)


def tokenize(text: str, cfg: TokenizerConfig = TokenizerConfig()) -> list[str]:
    if cfg.mode is TokenizerMode.WHITESPACE:
        return text.split()
    terms = []
    for tok in _NON_ALNUM.split(text.lower()):
        if tok and tok not in ENGLISH_STOPWORDS:
            terms.append(_stem(tok))
    return terms


@dataclass(frozen=True)
class BM25Params:
    k1: float = 0.9
    b: float = 0.4
    top_k: int = 100

    def __post_init__(self):
        if not self.k1 > 0:
            raise XlrrError(f"k1 must be > 0, got {self.k1}")
        if not 0 <= self.b <= 1:
            raise XlrrError(f"b must lie in [0, 1], got {self.b}")
        if self.top_k < 1:
            raise XlrrError(f"top_k must be >= 1, got {self.top_k}")


@dataclass
class InvertedIndex:
    """Postings are ``term -> [(internal_id, tf), ...]`` in ascending internal id."""

    postings: dict[str, list[tuple[int, int]]]
    doc_lengths: list[int]
    doc_ids: list[str]
    tokenizer: TokenizerConfig = TokenizerConfig()
    use_translation: bool = False
    avg_doc_length: float = field(init=False)

    def __post_init__(self):
        n = len(self.doc_lengths)
        self.avg_doc_length = sum(self.doc_lengths) / n if n else 0.0

    @property
    def doc_count(self) -> int:
        return len(self.doc_lengths)

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1 + (self.doc_count - df + 0.5) / (df + 0.5))

    def internal_id(self, doc_id: str) -> int:
        try:
            return self.doc_ids.index(doc_id)
        except ValueError:
            raise UnknownIdError(f"doc_id {doc_id!r} is not in the index") from None

    def to_json(self) -> str:
        payload = {
            "tokenizer": self.tokenizer.mode.value,
            "use_translation": self.use_translation,
            "doc_ids": self.doc_ids,
            "doc_lengths": self.doc_lengths,
            "postings": {t: [list(p) for p in self.postings[t]] for t in sorted(self.postings)},
        }
        return json.dumps(payload, ensure_ascii=False, sort_keys=True) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "InvertedIndex":
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
            return cls(
                postings={t: [(d, tf) for d, tf in ps] for t, ps in payload["postings"].items()},
                doc_lengths=list(payload["doc_lengths"]),
                doc_ids=list(payload["doc_ids"]),
                tokenizer=TokenizerConfig(payload["tokenizer"]),
                use_translation=bool(payload["use_translation"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(path, 1, f"not an index artifact: {exc}") from None


def build_index(
    coll: Collection | Iterable, cfg: TokenizerConfig = TokenizerConfig(), use_translation: bool = False
) -> InvertedIndex:
    """Index passage text, or each passage's translation when `use_translation` is set."""
    postings: dict[str, list[tuple[int, int]]] = {}
    doc_lengths: list[int] = []
    doc_ids: list[str] = []
    for internal, passage in enumerate(coll):
        if use_translation:
            if passage.translated_text is None:
                raise XlrrError(f"passage {passage.doc_id!r} has no translated_text")
            body = passage.translated_text
        else:
            body = passage.text
        terms = tokenize(body, cfg)
        doc_ids.append(passage.doc_id)
        doc_lengths.append(len(terms))
        for term, tf in Counter(terms).items():
            postings.setdefault(term, []).append((internal, tf))
    return InvertedIndex(postings, doc_lengths, doc_ids, cfg, use_translation)


def _term_weight(idf: float, tf: int, length: int, avg_len: float, params: BM25Params) -> float:
    norm = 1 - params.b + params.b * length / avg_len
    return idf * tf / (tf + params.k1 * norm)


def bm25_score(index: InvertedIndex, params: BM25Params, query_terms: Sequence[str], doc: int) -> float:
    if not 0 <= doc < index.doc_count:
        raise UnknownIdError(f"internal doc id {doc} is not in the index")
    score = 0.0
    for term in query_terms:
        tf = dict(index.postings.get(term, ())).get(doc, 0)
        if tf:
            score += _term_weight(index.idf(term), tf, index.doc_lengths[doc], index.avg_doc_length, params)
    return score


@dataclass(frozen=True)
class RankedList:
    query_id: str
    entries: tuple[tuple[str, float], ...]
    stage_tag: str

    def __post_init__(self):
        seen = set()
        prev = None
        for doc_id, score in self.entries:
            if doc_id in seen:
                raise XlrrError(f"duplicate doc_id {doc_id!r} in ranked list for {self.query_id!r}")
            seen.add(doc_id)
            if prev is not None and score > prev:
                raise XlrrError(f"ranked list for {self.query_id!r} is not sorted at {doc_id!r}")
            prev = score

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def trec_lines(self) -> list[str]:
        return [
            f"{self.query_id} Q0 {doc_id} {rank} {score:.6f} {self.stage_tag}"
            for rank, (doc_id, score) in enumerate(self.entries, start=1)
        ]


def sort_entries(scores: dict[str, float]) -> list[tuple[str, float]]:
    return sorted(scores.items(), key=lambda e: (-e[1], e[0]))


def retrieve_topk(
    index: InvertedIndex,
    params: BM25Params,
    query: Query,
    cfg: TokenizerConfig | None = None,
    tag: str = "bm25",
) -> RankedList:
    cfg = cfg or index.tokenizer
    if cfg != index.tokenizer:
        raise XlrrError(f"query tokenizer {cfg.mode.value} differs from index tokenizer {index.tokenizer.mode.value}")
    accum: dict[int, float] = {}
    for term in tokenize(query.text, cfg):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for doc, tf in plist:
            weight = _term_weight(idf, tf, index.doc_lengths[doc], index.avg_doc_length, params)
            accum[doc] = accum.get(doc, 0.0) + weight
    scores = {index.doc_ids[d]: s for d, s in accum.items() if s > 0}
    return RankedList(query.query_id, tuple(sort_entries(scores)[: params.top_k]), tag)


def write_run(lists: Iterable[RankedList], path: str | os.PathLike) -> None:
    lines = [line for rl in lists for line in rl.trec_lines()]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
