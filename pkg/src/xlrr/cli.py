"""``xlrr`` command line: index, retrieve, translate, rerank, eval, report."""

from __future__ import annotations

import functools
import json
import logging
from dataclasses import replace
from pathlib import Path

import click

from .backend import ResponseCache, parse_backend_spec
from .corpus import atomic_write_text, dump_passages, load_passages, load_qrels, load_queries
from .errors import XlrrError
from .evaluation import (
    DEFAULT_METRICS,
    ReportLayout,
    evaluate,
    read_metric_csv,
    read_run,
    render_report,
    write_metric_csv,
    write_per_query_csv,
)
from .harness import load_config, manifest_path, output_lock, require, stage_settings, write_manifest
from .index import BM25Params, InvertedIndex, TokenizerConfig, build_index, retrieve_topk, write_run
from .prompts import TokenBudget
from .rerank import MAX_CANDIDATES, RerankAborted, WindowPlan, rerank_run
from .translate import translate_collection, translation_report

log = logging.getLogger("xlrr")


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    raise SystemExit(2)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FileNotFoundError as exc:
            _fail(f"file not found: {exc.filename}")
        except XlrrError as exc:
            _fail(str(exc))
    return wrapper


def _settings(ctx: click.Context, stage: str, **flags) -> dict:
    return stage_settings(ctx.obj["config"], stage, **flags)


def _cache(settings: dict) -> ResponseCache:
    directory = settings.get("cache_dir") or Path(settings["out"]).parent / "cache"
    return ResponseCache(directory)


def _check_exists(*paths) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise XlrrError(f"file not found: {p}")


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="TOML experiment file; flags override its values.")
@click.option("--cache-dir", default=None, help="Completion cache directory.")
@click.option("-v", "--verbose", count=True)
@click.version_option(package_name="artifact")
@click.pass_context
def main(ctx: click.Context, config_path, cache_dir, verbose):
    """Cross-lingual BM25 retrieval with listwise LLM reranking."""
    logging.basicConfig(level=logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(config_path)
    except XlrrError as exc:
        _fail(str(exc))
    if cache_dir is not None:
        config["cache_dir"] = cache_dir
    ctx.obj = {"config": config}


@main.command("index")
@click.option("--passages")
@click.option("--tokenizer", type=click.Choice(["english", "whitespace"]))
@click.option("--use-translation/--no-use-translation", default=None)
@click.option("--language")
@click.option("--provenance", type=click.Choice(["native", "translated", "llm_translated"]))
@click.option("--out")
@click.pass_context
@handle_errors
def index_cmd(ctx, **flags):
    """Build a BM25 index artifact from a passage file."""
    s = _settings(ctx, "index", **flags)
    require(s, "passages", "out")
    s.setdefault("tokenizer", "english")
    s.setdefault("use_translation", False)
    s.setdefault("language", "en")
    s.setdefault("provenance", "native")
    _check_exists(s["passages"])
    with output_lock(s["out"]):
        coll = load_passages(s["passages"], s["provenance"], s["language"])
        index = build_index(coll, TokenizerConfig(s["tokenizer"]), bool(s["use_translation"]))
        index.save(s["out"])
        write_manifest(manifest_path(s["out"]), "index", s, {"passages": s["passages"]}, {"index": s["out"]})
    click.echo(f"indexed N={index.doc_count} documents, avg_len={index.avg_doc_length:.2f}, "
               f"terms={len(index.postings)}", err=True)


@main.command("retrieve")
@click.option("--index")
@click.option("--queries")
@click.option("--language")
@click.option("--k1", type=float)
@click.option("--b", "b", type=float)
@click.option("--top-k", type=int)
@click.option("--tag")
@click.option("--out")
@click.pass_context
@handle_errors
def retrieve_cmd(ctx, **flags):
    """Run BM25 over the queries and write a TREC run file."""
    s = _settings(ctx, "retrieve", **flags)
    require(s, "index", "queries", "out")
    s.setdefault("language", "en")
    s.setdefault("tag", "bm25")
    params = BM25Params(s.setdefault("k1", 0.9), s.setdefault("b", 0.4), s.setdefault("top_k", 100))
    _check_exists(s["index"], s["queries"])
    with output_lock(s["out"]):
        index = InvertedIndex.load(s["index"])
        queries = load_queries(s["queries"], s["language"])
        lists = [retrieve_topk(index, params, q, tag=s["tag"]) for q in queries]
        write_run(lists, s["out"])
        write_manifest(manifest_path(s["out"]), "retrieve", s,
                       {"index": s["index"], "queries": s["queries"]}, {"run": s["out"]})
    click.echo(f"retrieved {sum(map(len, lists))} entries for {len(lists)} queries", err=True)


def _backend(s: dict, qrels=None):
    overrides = {
        "requests_per_minute": s.get("requests_per_minute"),
        "max_retries": s.get("max_retries"),
        "temperature": s.get("temperature"),
        "context_limit": s.get("context_limit"),
        "price_per_1k_prompt": s.get("price_per_1k_prompt"),
        "price_per_1k_completion": s.get("price_per_1k_completion"),
    }
    spec = s["backend"]
    if spec == "mock:scripted" and s.get("script"):
        spec = f"mock:scripted:{s['script']}"
    return parse_backend_spec(spec, cache=_cache(s), qrels=qrels,
                              models_file=s.get("models_file"), **overrides)


@main.command("translate")
@click.option("--passages")
@click.option("--language", help="Source language code of the passages.")
@click.option("--target", help="Target language code (default en).")
@click.option("--backend")
@click.option("--models-file")
@click.option("--requests-per-minute", type=int)
@click.option("--out")
@click.pass_context
@handle_errors
def translate_cmd(ctx, **flags):
    """Zero-shot translate a native passage collection."""
    s = _settings(ctx, "translate", **flags)
    require(s, "passages", "language", "backend", "out")
    s.setdefault("target", "en")
    _check_exists(s["passages"])
    with output_lock(s["out"]):
        coll = load_passages(s["passages"], "native", s["language"])
        backend = _backend(s)
        translated = translate_collection(coll, backend, s["target"])
        atomic_write_text(s["out"], dump_passages(translated))
        report_path = Path(s["out"]).with_name(Path(s["out"]).name + ".report.json")
        report = translation_report(translated, backend.ledger).to_dict()
        atomic_write_text(report_path, json.dumps(report, indent=2, ensure_ascii=False) + "\n")
        write_manifest(manifest_path(s["out"]), "translate", s, {"passages": s["passages"]},
                       {"translations": s["out"], "report": report_path}, backend)
    click.echo(f"translated {len(translated)} passages; {len(report['empty_translations'])} empty; "
               f"cache hits={backend.cache_hits} misses={backend.cache_misses}", err=True)


@main.command("rerank")
@click.option("--run", help="First-stage TREC run file.")
@click.option("--passages")
@click.option("--queries")
@click.option("--language")
@click.option("--backend", help="mock:identity|reverse|qrels_perfect|scripted:<file>, openai:<model>, anthropic:<model>")
@click.option("--qrels", help="Judgments for the qrels_perfect mock.")
@click.option("--script", help="JSON list of completions for mock:scripted.")
@click.option("--window", "window_size", type=int)
@click.option("--stride", type=int)
@click.option("--per-passage-cap", type=int)
@click.option("--context-limit", type=int)
@click.option("--models-file")
@click.option("--requests-per-minute", type=int)
@click.option("--tag")
@click.option("--trace", help="Window-level audit log (default <out>.trace.jsonl).")
@click.option("--out")
@click.pass_context
@handle_errors
def rerank_cmd(ctx, **flags):
    """Listwise-rerank the top candidates of a run."""
    s = _settings(ctx, "rerank", **flags)
    require(s, "run", "passages", "queries", "backend", "out")
    s.setdefault("language", "en")
    s.setdefault("tag", "rerank")
    s.setdefault("window_size", 20)
    s.setdefault("stride", 10)
    s.setdefault("per_passage_cap", 300)
    trace_path = s.get("trace") or str(Path(s["out"]).with_name(Path(s["out"]).name + ".trace.jsonl"))
    _check_exists(s["run"], s["passages"], s["queries"])
    inputs = {"run": s["run"], "passages": s["passages"], "queries": s["queries"]}
    with output_lock(s["out"]):
        qrels = None
        if s.get("qrels"):
            qrels = load_qrels(s["qrels"])
            inputs["qrels"] = s["qrels"]
        coll = load_passages(s["passages"], "native", s["language"])
        queries = {q.query_id: q for q in load_queries(s["queries"], s["language"])}
        run = read_run(s["run"])
        candidates = [replace(rl, entries=rl.entries[:MAX_CANDIDATES]) for rl in run.ranked_lists()]
        plan = WindowPlan(s["window_size"], s["stride"])
        backend = _backend(s, qrels)
        window = min(plan.window_size, max((len(c) for c in candidates), default=1))
        budget = TokenBudget.for_window(backend.cfg.context_limit, max(window, 1), s["per_passage_cap"],
                                        backend.cfg.reasoning_reserve)
        backend.cfg = replace(backend.cfg, max_completion_tokens=budget.reserved_completion)
        passages = {p.doc_id: p for p in coll}
        try:
            reranked, trace = rerank_run(candidates, queries, passages, backend, plan, budget, s["tag"])
        except RerankAborted as exc:
            atomic_write_text(trace_path, exc.trace.to_jsonl())
            raise
        write_run(reranked, s["out"])
        atomic_write_text(trace_path, trace.to_jsonl())
        write_manifest(manifest_path(s["out"]), "rerank", s, inputs,
                       {"run": s["out"], "trace": trace_path}, backend)
    click.echo(f"reranked {len(reranked)} queries in {len(trace.records)} windows "
               f"({trace.total_repairs} repairs); cache hits={backend.cache_hits} "
               f"misses={backend.cache_misses}; cost={backend.ledger.total_cost:.6f}", err=True)


@main.command("eval")
@click.option("--run")
@click.option("--qrels")
@click.option("--language")
@click.option("--config-name", help="Row label for this run (default: the run tag).")
@click.option("--metrics", help="Comma-separated, e.g. ndcg@10,mrr@100.")
@click.option("--threshold", type=int, help="Minimum grade counted as relevant by MRR.")
@click.option("--per-query", help="Optional per-query CSV path.")
@click.option("--out", help="Metric CSV path.")
@click.pass_context
@handle_errors
def eval_cmd(ctx, **flags):
    """Score a run against qrels and write the metric CSV."""
    s = _settings(ctx, "eval", **flags)
    require(s, "run", "qrels", "out")
    s.setdefault("language", "en")
    s.setdefault("threshold", 1)
    metrics = s.get("metrics") or list(DEFAULT_METRICS)
    if isinstance(metrics, str):
        metrics = [m.strip() for m in metrics.split(",") if m.strip()]
    s["metrics"] = metrics
    _check_exists(s["run"], s["qrels"])
    with output_lock(s["out"]):
        run = read_run(s["run"])
        qrels = load_qrels(s["qrels"], s["threshold"])
        s.setdefault("config_name", run.tag or Path(s["run"]).stem)
        report = evaluate(run, qrels, metrics, s["language"], s["config_name"])
        atomic_write_text(s["out"], write_metric_csv([report]))
        outputs = {"metrics": s["out"]}
        if s.get("per_query"):
            atomic_write_text(s["per_query"], write_per_query_csv([report]))
            outputs["per_query"] = s["per_query"]
        write_manifest(manifest_path(s["out"]), "eval", s, {"run": s["run"], "qrels": s["qrels"]}, outputs)
    text, _ = render_report([report], ReportLayout(tuple(metrics), (s["language"],)))
    click.echo(text, nl=False)


@main.command("report")
@click.option("--inputs", multiple=True, help="Metric CSVs from `xlrr eval` (repeatable).")
@click.option("--metrics", help="Comma-separated metric columns.")
@click.option("--languages", help="Comma-separated language columns, in order.")
@click.option("--csv-out", help="CSV twin of the table (default <out>.csv).")
@click.option("--out", help="Text table path.")
@click.pass_context
@handle_errors
def report_cmd(ctx, **flags):
    """Combine metric CSVs into a comparison table, one row per configuration."""
    s = _settings(ctx, "report", **flags)
    require(s, "inputs", "out")
    inputs = list(s["inputs"])
    _check_exists(*inputs)
    metrics = s.get("metrics") or list(DEFAULT_METRICS)
    if isinstance(metrics, str):
        metrics = [m.strip() for m in metrics.split(",")]
    languages = s.get("languages")
    if isinstance(languages, str):
        languages = [x.strip() for x in languages.split(",")]
    meta = s.get("meta", {})
    meta_columns = tuple(s.get("meta_columns", ()))
    s["metrics"] = metrics
    csv_out = s.get("csv_out") or str(Path(s["out"]).with_suffix(".csv"))
    with output_lock(s["out"]):
        merged: dict = {}
        for path in inputs:
            for report in read_metric_csv(path):
                merged[report.config] = merged[report.config].merge(report) if report.config in merged else report
        reports = list(merged.values())
        for r in reports:
            r.meta.update({k: str(v) for k, v in meta.get(r.config, {}).items()})
        layout = ReportLayout(tuple(metrics), tuple(languages) if languages else None, meta_columns)
        text, table_csv = render_report(reports, layout)
        atomic_write_text(s["out"], text)
        atomic_write_text(csv_out, table_csv)
        write_manifest(manifest_path(s["out"]), "report", s,
                       {f"input{i}": p for i, p in enumerate(inputs)}, {"table": s["out"], "csv": csv_out})
    click.echo(text, nl=False)


if __name__ == "__main__":
    main()
