"""Listwise rerank and zero-shot translation prompts."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .corpus import LANGUAGES, Passage, Query
from .errors import BudgetError, XlrrError

# Completion tokens reserved per ranked identifier ("[12] > " is ~2 estimator tokens).
TOKENS_PER_IDENTIFIER = 8


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files("xlrr").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


def estimate_tokens(text: str) -> int:
    """Characters / 4, rounded up. Deliberately not a model tokenizer."""
    return math.ceil(len(text) / 4)


def truncate_to_tokens(text: str, cap: int) -> str:
    """Longest whitespace-delimited prefix whose estimate stays within `cap`.

    A single word longer than the cap is cut mid-word; that is the only case
    where a word gets split.
    """
    text = " ".join(text.split())
    max_chars = cap * 4
    if len(text) <= max_chars:
        return text
    cut = text[:max_chars]
    if text[max_chars] == " ":
        return cut
    space = cut.rfind(" ")
    return cut[:space] if space > 0 else cut


@dataclass(frozen=True)
class TokenBudget:
    context_limit: int = 4096
    per_passage_cap: int = 300
    reserved_completion: int = 160

    def __post_init__(self):
        if self.per_passage_cap < 1:
            raise XlrrError("per_passage_cap must be >= 1")
        if self.reserved_completion < 0 or self.context_limit < 1:
            raise XlrrError("context_limit must be positive and reserved_completion non-negative")

    @property
    def prompt_limit(self) -> int:
        return self.context_limit - self.reserved_completion

    @classmethod
    def for_window(
        cls, context_limit: int, window_size: int, per_passage_cap: int = 300, extra_reserve: int = 0
    ) -> "TokenBudget":
        """Budget for `window_size`-passage prompts, lowering the passage cap until a full window fits.

        `extra_reserve` covers completion tokens spent before the ranking
        itself (hidden reasoning).
        """
        reserved = TOKENS_PER_IDENTIFIER * window_size + extra_reserve
        fit = (context_limit - reserved - prompt_overhead(window_size)) // window_size
        if fit < 1:
            raise BudgetError(f"a {window_size}-passage window cannot fit a {context_limit}-token context")
        return cls(context_limit, min(per_passage_cap, fit), reserved)


def prompt_overhead(num: int) -> int:
    """Upper bound on template tokens for `num` passages with a 64-token query."""
    query = "x" * 256
    passages = "\n".join(f"[{i}] " for i in range(1, num + 1))
    user = load_template("rerank_user").format(num=num, query=query, passages=passages)
    return estimate_tokens(load_template("rerank_system")) + estimate_tokens(user) + num


@dataclass(frozen=True)
class RerankPrompt:
    system_text: str
    user_text: str
    window_ids: tuple[str, ...]
    num: int

    @property
    def token_estimate(self) -> int:
        return estimate_tokens(self.system_text) + estimate_tokens(self.user_text)


def build_rerank_prompt(
    query: Query, window: Sequence[Passage], budget: TokenBudget = TokenBudget()
) -> RerankPrompt:
    if not window:
        raise XlrrError("cannot build a rerank prompt for an empty window")
    if len(window) > 100:
        raise XlrrError(f"window of {len(window)} passages exceeds the 100-candidate cap")
    num = len(window)
    ids = tuple(p.doc_id for p in window)
    if budget.reserved_completion < TOKENS_PER_IDENTIFIER * num:
        raise BudgetError(
            f"reserved_completion {budget.reserved_completion} is below {TOKENS_PER_IDENTIFIER} x {num}"
        )
    lines = [
        f"[{i}] {truncate_to_tokens(p.rerank_text, budget.per_passage_cap)}"
        for i, p in enumerate(window, start=1)
    ]
    prompt = RerankPrompt(
        system_text=load_template("rerank_system"),
        user_text=load_template("rerank_user").format(num=num, query=query.text, passages="\n".join(lines)),
        window_ids=ids,
        num=num,
    )
    if prompt.token_estimate > budget.prompt_limit:
        raise BudgetError(
            f"prompt for window {ids[0]}..{ids[-1]} of query {query.query_id!r} needs "
            f"{prompt.token_estimate} tokens, limit is {budget.prompt_limit}"
        )
    return prompt


def build_translation_prompt(doc: Passage, target_language: str = "en") -> str:
    if not doc.text:
        raise XlrrError(f"passage {doc.doc_id!r} has no text to translate")
    for code in (doc.language, target_language):
        if code not in LANGUAGES:
            raise XlrrError(f"unsupported language code {code!r}")
    return load_template("translation").format(
        doc=doc.text,
        source_language=LANGUAGES[doc.language],
        target_language=LANGUAGES[target_language],
    )
