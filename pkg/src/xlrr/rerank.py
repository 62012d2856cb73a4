"""Sliding-window listwise reranking over first-stage candidates."""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .backend import Backend, CompletionRequest
from .corpus import Passage, Query
from .errors import XlrrError
from .index import RankedList
from .prompts import TokenBudget, build_rerank_prompt

MAX_CANDIDATES = 100

_INTEGER = re.compile(r"[0-9]+")


@dataclass(frozen=True)
class WindowPlan:
    window_size: int = 20
    stride: int = 10
    passes: int = 1

    def __post_init__(self):
        if not 1 <= self.stride <= self.window_size <= MAX_CANDIDATES:
            raise XlrrError(
                f"need 1 <= stride <= window_size <= {MAX_CANDIDATES}, "
                f"got stride={self.stride} window_size={self.window_size}"
            )
        if self.passes != 1:
            raise XlrrError("only single-pass reranking is supported")

    def spans(self, length: int) -> list[tuple[int, int]]:
        """Half-open window spans, back to front, ending with the one that starts at 0."""
        if length <= 0:
            return []
        spans = []
        end = length
        start = max(0, end - self.window_size)
        while True:
            spans.append((start, end))
            if start == 0:
                return spans
            end -= self.stride
            start = max(0, end - self.window_size)


@dataclass(frozen=True)
class Permutation:
    order: tuple[int, ...]
    num: int
    repairs: int = 0


def parse_permutation(completion: str | bytes, num: int) -> Permutation:
    """Turn any completion into a permutation of ``1..num``.

    Integers are read in order of appearance. Out-of-range values and repeats
    are dropped, then missing positions are appended in ascending order.
    `repairs` counts every dropped or appended item.
    """
    if num < 1:
        raise XlrrError(f"num must be >= 1, got {num}")
    if isinstance(completion, (bytes, bytearray)):
        completion = completion.decode("utf-8", errors="replace")
    order: list[int] = []
    seen: set[int] = set()
    dropped = 0
    for match in _INTEGER.finditer(completion):
        value = int(match.group())
        if 1 <= value <= num and value not in seen:
            seen.add(value)
            order.append(value)
        else:
            dropped += 1
    missing = [i for i in range(1, num + 1) if i not in seen]
    return Permutation(tuple(order + missing), num, dropped + len(missing))


def apply_permutation(segment: Sequence[str], perm: Permutation) -> list[str]:
    if len(segment) != perm.num:
        raise XlrrError(f"segment has {len(segment)} items but permutation covers {perm.num}")
    return [segment[i - 1] for i in perm.order]


def assign_run_scores(doc_ids: Sequence[str], query_id: str, tag: str) -> RankedList:
    if len(set(doc_ids)) != len(doc_ids):
        raise XlrrError(f"duplicate doc_ids in reranked list for {query_id!r}")
    return RankedList(query_id, tuple((d, 1.0 / i) for i, d in enumerate(doc_ids, start=1)), tag)


@dataclass(frozen=True)
class WindowRecord:
    query_id: str
    start: int
    end: int
    window_ids: tuple[str, ...]
    completion: str
    order: tuple[int, ...]
    repairs: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "query_id": self.query_id,
                "start": self.start,
                "end": self.end,
                "window_ids": list(self.window_ids),
                "completion": self.completion,
                "order": list(self.order),
                "repairs": self.repairs,
            },
            ensure_ascii=False,
        )


@dataclass
class RerankTrace:
    records: list[WindowRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    @property
    def total_repairs(self) -> int:
        return sum(r.repairs for r in self.records)


class RerankAborted(XlrrError):
    """Backend failure mid-list; `trace` holds the windows completed so far."""

    def __init__(self, message: str, trace: RerankTrace):
        super().__init__(message)
        self.trace = trace


def sliding_window_rerank(
    candidates: RankedList,
    plan: WindowPlan,
    backend: Backend,
    query: Query,
    passages: Mapping[str, Passage],
    budget: TokenBudget = TokenBudget(),
    tag: str = "rerank",
) -> tuple[RankedList, RerankTrace]:
    """One back-to-front pass; each window is reordered in place before the next is read."""
    if len(candidates) > MAX_CANDIDATES:
        raise XlrrError(f"{len(candidates)} candidates exceed the {MAX_CANDIDATES}-document cap")
    ranking = candidates.doc_ids
    for doc_id in ranking:
        if doc_id not in passages:
            raise XlrrError(f"candidate {doc_id!r} for query {query.query_id!r} has no passage")
    trace = RerankTrace()
    for start, end in plan.spans(len(ranking)):
        window = ranking[start:end]
        prompt = build_rerank_prompt(query, [passages[d] for d in window], budget)
        request = CompletionRequest(
            user_text=prompt.user_text,
            system_text=prompt.system_text,
            request_tag=f"rerank:{query.query_id}:{start}-{end}",
            window_ids=prompt.window_ids,
            query_id=query.query_id,
        )
        try:
            response = backend.complete(request)
        except XlrrError as exc:
            raise RerankAborted(f"query {query.query_id!r}, window {start}-{end}: {exc}", trace) from exc
        perm = parse_permutation(response.text, len(window))
        ranking[start:end] = apply_permutation(window, perm)
        trace.records.append(
            WindowRecord(query.query_id, start, end, tuple(window), response.text, perm.order, perm.repairs)
        )
    return assign_run_scores(ranking, query.query_id, tag), trace


def rerank_run(
    run: Sequence[RankedList],
    queries: Mapping[str, Query],
    passages: Mapping[str, Passage],
    backend: Backend,
    plan: WindowPlan = WindowPlan(),
    budget: TokenBudget = TokenBudget(),
    tag: str = "rerank",
) -> tuple[list[RankedList], RerankTrace]:
    """Rerank every query of a run; queries run concurrently, output keeps input order."""
    for rl in run:
        if rl.query_id not in queries:
            raise XlrrError(f"run has query {rl.query_id!r} with no query text")

    def one(rl: RankedList):
        try:
            return sliding_window_rerank(rl, plan, backend, queries[rl.query_id], passages, budget, tag)
        except RerankAborted as exc:
            return exc

    with ThreadPoolExecutor(max_workers=backend.max_in_flight) as pool:
        outcomes = list(pool.map(one, run))

    reranked: list[RankedList] = []
    trace = RerankTrace()
    failure = None
    for outcome in outcomes:
        if isinstance(outcome, RerankAborted):
            trace.records.extend(outcome.trace.records)
            failure = failure or outcome
        else:
            reranked.append(outcome[0])
            trace.records.extend(outcome[1].records)
    if failure is not None:
        raise RerankAborted(str(failure), trace)
    return reranked, trace
