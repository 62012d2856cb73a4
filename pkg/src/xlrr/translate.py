"""Zero-shot LLM document translation feeding BM25-DT and reranking."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from .backend import Backend, CompletionRequest, CostLedger
from .corpus import Collection, Passage, Provenance, check_language
from .errors import XlrrError
from .prompts import build_translation_prompt


def translate_passage(doc: Passage, backend: Backend, target: str = "en") -> str:
    request = CompletionRequest(
        user_text=build_translation_prompt(doc, target),
        request_tag=f"translate:{doc.doc_id}",
    )
    return backend.complete(request).text.strip()


def translate_collection(coll: Collection, backend: Backend, target: str = "en") -> Collection:
    """Translate every passage through `backend`.

    Completed translations live in the backend cache, so an interrupted run
    resumes where it stopped.
    """
    if coll.provenance is not Provenance.NATIVE:
        raise XlrrError(f"collection {coll.name!r} is {coll.provenance.value}, expected native passages")
    check_language(target)
    if not len(coll):
        return replace(coll, provenance=Provenance.LLM_TRANSLATED)
    with ThreadPoolExecutor(max_workers=backend.max_in_flight) as pool:
        texts = list(pool.map(lambda p: translate_passage(p, backend, target), coll))
    passages = tuple(replace(p, translated_text=t) for p, t in zip(coll, texts))
    return replace(coll, passages=passages, provenance=Provenance.LLM_TRANSLATED)


@dataclass(frozen=True)
class TranslationReport:
    length_ratios: dict[str, float]
    empty_translations: list[str]
    prompt_tokens: int
    completion_tokens: int
    total_cost: float

    @property
    def mean_length_ratio(self) -> float:
        ratios = list(self.length_ratios.values())
        return sum(ratios) / len(ratios) if ratios else 0.0

    def to_dict(self) -> dict:
        return {
            "passages": len(self.length_ratios),
            "mean_length_ratio": round(self.mean_length_ratio, 6),
            "length_ratios": {k: round(v, 6) for k, v in self.length_ratios.items()},
            "empty_translations": self.empty_translations,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "total_cost": round(self.total_cost, 9),
        }


def translation_report(coll: Collection, ledger: CostLedger | None = None) -> TranslationReport:
    if coll.provenance is not Provenance.LLM_TRANSLATED:
        raise XlrrError(f"collection {coll.name!r} has no LLM translations")
    ratios = {}
    empty = []
    for p in coll:
        translated = p.translated_text or ""
        ratios[p.doc_id] = len(translated) / len(p.text)
        if not translated:
            empty.append(p.doc_id)
    models = ledger.models.values() if ledger else ()
    return TranslationReport(
        length_ratios=ratios,
        empty_translations=empty,
        prompt_tokens=sum(u.prompt_tokens for u in models),
        completion_tokens=sum(u.completion_tokens for u in models),
        total_cost=ledger.total_cost if ledger else 0.0,
    )
