"""Passages, queries and relevance judgments: loading, validation, persistence."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import DuplicateIdError, FormatError, UnknownIdError, XlrrError

LANGUAGES = {
    "ha": "Hausa",
    "so": "Somali",
    "sw": "Swahili",
    "yo": "Yoruba",
    "en": "English",
}


class Provenance(str, Enum):
    NATIVE = "native"
    TRANSLATED = "translated"
    LLM_TRANSLATED = "llm_translated"


def check_language(code: str) -> str:
    if code not in LANGUAGES:
        raise XlrrError(f"unsupported language code {code!r}; expected one of {sorted(LANGUAGES)}")
    return code


@dataclass(frozen=True)
class Passage:
    doc_id: str
    text: str
    language: str
    translated_text: str | None = None

    def __post_init__(self):
        if not self.doc_id:
            raise XlrrError("passage doc_id must be non-empty")
        if not self.text:
            raise XlrrError(f"passage {self.doc_id!r} has empty text")
        check_language(self.language)

    @property
    def rerank_text(self) -> str:
        """Text shown to the reranker: the translation when one exists."""
        return self.translated_text if self.translated_text is not None else self.text


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str
    language: str

    def __post_init__(self):
        if not self.query_id:
            raise XlrrError("query_id must be non-empty")
        if not self.text:
            raise XlrrError(f"query {self.query_id!r} has empty text")
        check_language(self.language)


@dataclass(frozen=True)
class QrelSet:
    judgments: Mapping[tuple[str, str], int]
    relevance_threshold: int = 1

    def __post_init__(self):
        if self.relevance_threshold < 1:
            raise XlrrError("relevance_threshold must be >= 1")
        for key, grade in self.judgments.items():
            if not isinstance(grade, int) or grade < 0:
                raise XlrrError(f"grade for {key} must be a non-negative integer, got {grade!r}")

    def grade(self, query_id: str, doc_id: str) -> int:
        return self.judgments.get((query_id, doc_id), 0)

    def for_query(self, query_id: str) -> dict[str, int]:
        return {d: g for (q, d), g in self.judgments.items() if q == query_id}

    def query_ids(self) -> list[str]:
        return sorted({q for q, _ in self.judgments})


@dataclass(frozen=True)
class Collection:
    name: str
    language: str
    passages: tuple[Passage, ...]
    provenance: Provenance = Provenance.NATIVE
    _by_id: dict[str, Passage] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        check_language(self.language)
        by_id: dict[str, Passage] = {}
        for p in self.passages:
            if p.doc_id in by_id:
                raise DuplicateIdError(f"duplicate doc_id {p.doc_id!r} in collection {self.name!r}")
            if p.language != self.language:
                raise XlrrError(
                    f"passage {p.doc_id!r} has language {p.language!r}, collection is {self.language!r}"
                )
            by_id[p.doc_id] = p
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.passages)

    def __iter__(self) -> Iterator[Passage]:
        return iter(self.passages)

    def __contains__(self, doc_id: object) -> bool:
        return doc_id in self._by_id

    def get(self, doc_id: str) -> Passage:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise UnknownIdError(f"unknown doc_id {doc_id!r} in collection {self.name!r}") from None


def _lines(path: str | os.PathLike) -> Iterator[tuple[int, str]]:
    path = Path(path)
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError(path, lineno, f"invalid UTF-8 ({exc.reason})") from None
            line = line.rstrip("\r\n")
            if line.strip():
                yield lineno, line


def load_passages(
    path: str | os.PathLike,
    provenance: Provenance | str = Provenance.NATIVE,
    language: str = "en",
    name: str | None = None,
) -> Collection:
    """Read a line-delimited JSON passage file into a `Collection`.

    Each line must hold an object with string fields ``docid`` and ``text``
    and may carry ``translated_text``. Duplicate ids and malformed records
    raise; blank lines are ignored.
    """
    provenance = Provenance(provenance)
    passages: list[Passage] = []
    seen: set[str] = set()
    for lineno, line in _lines(path):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(path, lineno, f"not a JSON object: {exc.msg}") from None
        if not isinstance(record, dict):
            raise FormatError(path, lineno, "record must be a JSON object")
        for key in ("docid", "text"):
            if not isinstance(record.get(key), str) or not record[key]:
                raise FormatError(path, lineno, f"missing or empty field {key!r}")
        translated = record.get("translated_text")
        if translated is not None and not isinstance(translated, str):
            raise FormatError(path, lineno, "translated_text must be a string")
        doc_id = record["docid"]
        if doc_id in seen:
            raise DuplicateIdError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
        seen.add(doc_id)
        passages.append(Passage(doc_id, record["text"], language, translated))
    return Collection(name or Path(path).stem, language, tuple(passages), provenance)


def passage_records(coll: Collection) -> Iterator[dict]:
    for p in coll:
        record = {"docid": p.doc_id, "text": p.text}
        if p.translated_text is not None:
            record["translated_text"] = p.translated_text
        yield record


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the destination directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_passages(coll: Collection) -> str:
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in passage_records(coll))


def write_passages(coll: Collection, path: str | os.PathLike) -> None:
    atomic_write_text(path, dump_passages(coll))


def load_queries(path: str | os.PathLike, language: str) -> list[Query]:
    """Read ``query_id<TAB>text`` lines."""
    queries: list[Query] = []
    seen: set[str] = set()
    for lineno, line in _lines(path):
        parts = line.split("\t", 1)
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise FormatError(path, lineno, "expected 'query_id<TAB>text'")
        qid, text = parts[0].strip(), parts[1].strip()
        if qid in seen:
            raise DuplicateIdError(f"{path}:{lineno}: duplicate query_id {qid!r}")
        seen.add(qid)
        queries.append(Query(qid, text, language))
    return queries


def write_queries(queries: Iterable[Query], path: str | os.PathLike) -> None:
    atomic_write_text(path, "".join(f"{q.query_id}\t{q.text}\n" for q in queries))


def load_qrels(path: str | os.PathLike, threshold: int = 1) -> QrelSet:
    """Read TREC qrels: ``qid Q0 docid grade`` per line."""
    judgments: dict[tuple[str, str], int] = {}
    for lineno, line in _lines(path):
        fields = line.split()
        if len(fields) != 4:
            raise FormatError(path, lineno, f"expected 4 fields, got {len(fields)}")
        qid, _, doc_id, raw_grade = fields
        try:
            grade = int(raw_grade)
        except ValueError:
            raise FormatError(path, lineno, f"grade {raw_grade!r} is not an integer") from None
        if grade < 0:
            raise FormatError(path, lineno, f"grade {grade} is negative")
        if (qid, doc_id) in judgments:
            raise DuplicateIdError(f"{path}:{lineno}: duplicate judgment for ({qid}, {doc_id})")
        judgments[(qid, doc_id)] = grade
    return QrelSet(judgments, threshold)


def write_qrels(qrels: QrelSet, path: str | os.PathLike) -> None:
    atomic_write_text(
        path, "".join(f"{q} Q0 {d} {g}\n" for (q, d), g in qrels.judgments.items())
    )


def attach_translations(coll: Collection, translations: Mapping[str, str]) -> Collection:
    """Return a copy of `coll` with ``translated_text`` set from `translations`."""
    for doc_id in translations:
        if doc_id not in coll:
            raise UnknownIdError(f"translation given for unknown doc_id {doc_id!r}")
    if not translations:
        return coll
    passages = tuple(
        replace(p, translated_text=translations[p.doc_id]) if p.doc_id in translations else p
        for p in coll
    )
    return replace(coll, passages=passages, provenance=Provenance.LLM_TRANSLATED)
