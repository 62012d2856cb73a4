"""Two-stage cross-lingual retrieval: BM25 candidates, listwise LLM reranking."""

__version__ = "0.1.0"
