"""nDCG / MRR over TREC runs, per-language aggregation, comparison tables."""

from __future__ import annotations

import csv
import io
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import QrelSet, check_language, load_qrels
from .errors import FormatError, XlrrError
from .index import RankedList

DEFAULT_METRICS = ("ndcg@10", "mrr@100")
CSV_HEADER = ("config", "metric", "language", "value")

_METRIC = re.compile(r"^(ndcg|mrr)@([1-9][0-9]*)$")


def parse_metric(name: str) -> tuple[str, int]:
    match = _METRIC.match(name.strip().lower())
    if not match:
        raise XlrrError(f"unknown metric {name!r}; expected ndcg@K or mrr@K")
    return match.group(1), int(match.group(2))


def metric_label(name: str) -> str:
    kind, k = parse_metric(name)
    return f"nDCG@{k}" if kind == "ndcg" else f"MRR@{k}"


def _doc_ids(run: RankedList | Sequence[str]) -> Sequence[str]:
    return run.doc_ids if isinstance(run, RankedList) else run


def ndcg_at_k(run: RankedList | Sequence[str], qrels: QrelSet, k: int = 10, query_id: str | None = None) -> float:
    """Linear-gain nDCG (trec_eval ``ndcg_cut``). Ideal ordering uses every judged grade."""
    if k < 1:
        raise XlrrError("k must be >= 1")
    qid = run.query_id if isinstance(run, RankedList) else query_id
    judged = qrels.for_query(qid)
    ideal = sorted((g for g in judged.values() if g > 0), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal))
    if idcg == 0:
        return 0.0
    dcg = sum(judged.get(d, 0) / math.log2(i + 2) for i, d in enumerate(_doc_ids(run)[:k]))
    return dcg / idcg


def mrr_at_k(run: RankedList | Sequence[str], qrels: QrelSet, k: int = 100, query_id: str | None = None) -> float:
    if k < 1:
        raise XlrrError("k must be >= 1")
    qid = run.query_id if isinstance(run, RankedList) else query_id
    judged = qrels.for_query(qid)
    for rank, doc_id in enumerate(_doc_ids(run)[:k], start=1):
        if judged.get(doc_id, 0) >= qrels.relevance_threshold:
            return 1.0 / rank
    return 0.0


def metric_value(name: str, doc_ids: Sequence[str], qrels: QrelSet, query_id: str) -> float:
    kind, k = parse_metric(name)
    fn = ndcg_at_k if kind == "ndcg" else mrr_at_k
    return fn(doc_ids, qrels, k, query_id=query_id)


@dataclass
class RunFile:
    """Ranked doc ids per query, in file order, after format validation."""

    rankings: dict[str, list[tuple[str, float]]]
    tag: str = ""

    def doc_ids(self, query_id: str) -> list[str]:
        return [d for d, _ in self.rankings.get(query_id, ())]

    def ranked_lists(self) -> list[RankedList]:
        return [RankedList(q, tuple(entries), self.tag) for q, entries in self.rankings.items()]


def read_run(path: str | os.PathLike) -> RunFile:
    rankings: dict[str, list[tuple[str, float]]] = {}
    seen: dict[str, set[str]] = {}
    tag = ""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 6:
                raise FormatError(path, lineno, f"expected 6 fields 'qid Q0 docid rank score tag', got {len(fields)}")
            qid, _, doc_id, raw_rank, raw_score, tag = fields
            try:
                rank, score = int(raw_rank), float(raw_score)
            except ValueError:
                raise FormatError(path, lineno, f"bad rank {raw_rank!r} or score {raw_score!r}") from None
            if not math.isfinite(score):
                raise FormatError(path, lineno, f"score {raw_score!r} is not finite")
            entries = rankings.setdefault(qid, [])
            if rank != len(entries) + 1:
                raise FormatError(path, lineno, f"rank {rank} for query {qid!r}, expected {len(entries) + 1}")
            if entries and score > entries[-1][1]:
                raise FormatError(path, lineno, f"score increases at rank {rank} for query {qid!r}")
            if doc_id in seen.setdefault(qid, set()):
                raise FormatError(path, lineno, f"doc {doc_id!r} repeated for query {qid!r}")
            seen[qid].add(doc_id)
            entries.append((doc_id, score))
    return RunFile(rankings, tag)


@dataclass
class MetricReport:
    """Per-query values and per-language means for one configuration.

    ``per_query[metric][language][query_id]`` and ``means[metric][language]``.
    """

    config: str
    per_query: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    means: dict[str, dict[str, float]] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def metrics(self) -> list[str]:
        return list(self.means)

    def languages(self, metric: str) -> list[str]:
        return list(self.means.get(metric, {}))

    def merge(self, other: "MetricReport") -> "MetricReport":
        merged = MetricReport(self.config, meta={**self.meta, **other.meta})
        for src in (self, other):
            for metric, by_lang in src.means.items():
                merged.means.setdefault(metric, {}).update(by_lang)
            for metric, by_lang in src.per_query.items():
                merged.per_query.setdefault(metric, {}).update(by_lang)
        return merged

    def csv_rows(self) -> list[tuple[str, str, str, str]]:
        return [
            (self.config, metric, lang, f"{value:.4f}")
            for metric, by_lang in self.means.items()
            for lang, value in by_lang.items()
        ]


def evaluate(
    run: RunFile | Mapping[str, Sequence[str]],
    qrels: QrelSet,
    metrics: Sequence[str] = DEFAULT_METRICS,
    language: str = "en",
    config: str = "run",
) -> MetricReport:
    """Score every query in `qrels`; queries the run lacks score 0."""
    check_language(language)
    for name in metrics:
        parse_metric(name)
    lookup = run.doc_ids if isinstance(run, RunFile) else (lambda q: run.get(q, ()))
    report = MetricReport(config)
    query_ids = qrels.query_ids()
    for name in metrics:
        values = {q: metric_value(name, lookup(q), qrels, q) for q in query_ids}
        report.per_query[name] = {language: values}
        report.means[name] = {language: sum(values.values()) / len(values) if values else 0.0}
    return report


def evaluate_run(
    run_path: str | os.PathLike,
    qrels_path: str | os.PathLike,
    metrics: Sequence[str] = DEFAULT_METRICS,
    language: str = "en",
    config: str | None = None,
    threshold: int = 1,
) -> MetricReport:
    run = read_run(run_path)
    qrels = load_qrels(qrels_path, threshold)
    return evaluate(run, qrels, metrics, language, config or run.tag or Path(run_path).stem)


def write_metric_csv(reports: Iterable[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for report in reports:
        writer.writerows(report.csv_rows())
    return buf.getvalue()


def write_per_query_csv(reports: Iterable[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("config", "metric", "language", "query_id", "value"))
    for report in reports:
        for metric, by_lang in report.per_query.items():
            for lang, values in by_lang.items():
                for qid, value in values.items():
                    writer.writerow((report.config, metric, lang, qid, f"{value:.4f}"))
    return buf.getvalue()


def read_metric_csv(path: str | os.PathLike) -> list[MetricReport]:
    """Rebuild reports (means only) from CSV; configs keep first-seen order."""
    reports: dict[str, MetricReport] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise FormatError(path, 1, f"expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(path, lineno, "expected 4 columns")
            config, metric, lang, raw = row
            try:
                value = float(raw)
            except ValueError:
                raise FormatError(path, lineno, f"value {raw!r} is not a number") from None
            parse_metric(metric)
            report = reports.setdefault(config, MetricReport(config))
            report.means.setdefault(metric, {})[lang] = value
    return list(reports.values())


@dataclass(frozen=True)
class ReportLayout:
    metrics: tuple[str, ...] = DEFAULT_METRICS
    languages: tuple[str, ...] | None = None
    meta_columns: tuple[str, ...] = ()


def render_report(reports: Sequence[MetricReport], layout: ReportLayout = ReportLayout()) -> tuple[str, str]:
    """Render an aligned text table and its CSV twin.

    Rows follow `reports` order; column groups are metric x language with
    values at four decimals.
    """
    if not reports:
        raise XlrrError("nothing to report")
    languages = layout.languages or tuple(reports[0].languages(layout.metrics[0]))
    for report in reports:
        for metric in layout.metrics:
            have = report.languages(metric)
            if sorted(have) != sorted(languages):
                raise XlrrError(
                    f"report {report.config!r} has languages {sorted(have)} for {metric}, expected {sorted(languages)}"
                )

    left_headers = ["config", *layout.meta_columns]
    value_headers = [lang for _ in layout.metrics for lang in languages]
    rows = [
        [r.config, *(r.meta.get(c, "") for c in layout.meta_columns)]
        + [f"{r.means[m][lang]:.4f}" for m in layout.metrics for lang in languages]
        for r in reports
    ]
    headers = left_headers + value_headers
    widths = [max(len(headers[i]), *(len(row[i]) for row in rows)) for i in range(len(headers))]
    n_left, n_lang = len(left_headers), len(languages)
    for g, metric in enumerate(layout.metrics):
        last = n_left + (g + 1) * n_lang - 1
        span = sum(widths[last - n_lang + 1:last + 1]) + n_lang - 1
        widths[last] += max(0, len(metric_label(metric)) - span)

    def join(row: list[str]) -> str:
        parts = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row[:n_left]))]
        for g in range(len(layout.metrics)):
            lo = n_left + g * n_lang
            parts.append(" ".join(row[i].ljust(widths[i]) for i in range(lo, lo + n_lang)))
        return "  ".join(parts).rstrip()

    group_labels = [" " * sum(widths[:n_left]) + " " * (2 * (n_left - 1))]
    for g, metric in enumerate(layout.metrics):
        lo = n_left + g * n_lang
        span = sum(widths[lo:lo + n_lang]) + n_lang - 1
        group_labels.append(metric_label(metric).ljust(span))
    lines = ["  ".join(group_labels).rstrip(), join(headers), *(join(row) for row in rows)]
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in reports:
        for m in layout.metrics:
            for lang in languages:
                writer.writerow((r.config, m, lang, f"{r.means[m][lang]:.4f}"))
    return text, buf.getvalue()

