"""Experiment config files, per-run manifests and output-directory locking."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Mapping

from filelock import FileLock, Timeout

from . import __version__
from .corpus import atomic_write_text
from .errors import XlrrError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# Settings holding file paths. Config-file values resolve against the config's
# directory, and none of them enter the config digest.
PATH_KEYS = frozenset({
    "passages", "queries", "qrels", "index", "run", "out", "trace", "cache_dir",
    "models_file", "per_query", "csv_out", "inputs", "script",
})

STAGES = ("index", "retrieve", "translate", "rerank", "eval", "report")


def load_config(path: str | os.PathLike | None) -> dict[str, Any]:
    """Read a TOML experiment file: shared top-level keys plus one table per stage."""
    if path is None:
        return {}
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise XlrrError(f"file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise XlrrError(f"{path}: {exc}") from None
    base = path.parent
    return _resolve_paths(raw, base)


def _resolve_paths(table: Mapping[str, Any], base: Path) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in table.items():
        if isinstance(value, Mapping) and key in STAGES:
            out[key] = _resolve_paths(value, base)
        elif key in PATH_KEYS and isinstance(value, str):
            out[key] = str(base / value)
        elif key in PATH_KEYS and isinstance(value, list):
            out[key] = [str(base / v) for v in value]
        else:
            out[key] = value
    return out


def stage_settings(config: Mapping[str, Any], stage: str, **flags) -> dict[str, Any]:
    """Shared keys, then the stage table, then non-None command-line flags."""
    merged = {k: v for k, v in config.items() if k not in STAGES}
    merged.update(config.get(stage, {}))
    merged.update({k: v for k, v in flags.items() if v is not None and v != ()})
    return merged


def require(settings: Mapping[str, Any], *keys: str) -> None:
    missing = [k for k in keys if settings.get(k) in (None, "", [])]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise XlrrError(f"missing required setting(s): {flags}")


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def config_digest(settings: Mapping[str, Any]) -> str:
    params = {k: v for k, v in settings.items() if k not in PATH_KEYS and k not in STAGES}
    blob = json.dumps(params, sort_keys=True, ensure_ascii=False, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_manifest(
    path: str | os.PathLike,
    command: str,
    settings: Mapping[str, Any],
    inputs: Mapping[str, str | os.PathLike],
    outputs: Mapping[str, str | os.PathLike],
    backend=None,
) -> dict:
    """Record what produced an artifact. Files appear by base name and content digest only,
    so identical runs in different directories give identical manifests."""
    manifest: dict[str, Any] = {
        "command": command,
        "version": __version__,
        "config_digest": config_digest(settings),
        "settings": {k: settings[k] for k in sorted(settings) if k not in PATH_KEYS and k not in STAGES},
        "inputs": {k: {"file": Path(p).name, "sha256": file_digest(p)} for k, p in sorted(inputs.items())},
        "outputs": {k: {"file": Path(p).name, "sha256": file_digest(p)} for k, p in sorted(outputs.items())},
    }
    if backend is not None:
        manifest["backend"] = {"provider": backend.cfg.provider.value, "model_name": backend.cfg.model_name}
        manifest["cache"] = {"hits": backend.cache_hits, "misses": backend.cache_misses}
        manifest["cost"] = {
            "by_model": backend.ledger.summary(),
            "total_cost": round(backend.ledger.total_cost, 9),
        }
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest


def manifest_path(out: str | os.PathLike) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


@contextmanager
def output_lock(out: str | os.PathLike) -> Iterator[None]:
    """Allow one command at a time per output directory."""
    directory = Path(out).parent
    directory.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(directory / ".xlrr.lock"), timeout=0)
    try:
        with lock:
            yield
    except Timeout:
        raise XlrrError(f"another xlrr command is writing to {directory}") from None
