"""Run orchestration: extract, group, summarize, persist.

A run is addressed by a hash of the corpus content and the canonical
config, so the same inputs always land in the same run directory and
a completed run is never recomputed.  Artifacts carry no timestamps or
absolute paths; identical reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .alignment import (
    DegradingProvider,
    GeneratorProvider,
    build_preference_pairs,
    export_preference_dataset,
)
from .backends import (
    HttpCompletionBackend,
    HttpEmbeddingProvider,
    HttpSummarizerBackend,
    LlmExtractionBackend,
)
from .config import RunConfig
from .corpus import Corpus
from .errors import AdesumError, TransportError, ValidationError
from .extraction import PromptTemplate, default_lexicon_backend, extract
from .grouping import HashingProvider, build_grid, verify_grid_coverage
from .summarization import (
    TemplateSummarizer,
    model_summarize,
    template_summarize,
    write_summaries_jsonl,
)

ARTIFACT_NAMES = ("config.json", "records.jsonl", "grid.json", "summaries.jsonl")


@dataclass
class RunResult:
    run_id: str
    status: str
    run_dir: Path
    artifacts: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "complete"


def corpus_digest(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for post in corpus:
        h.update(json.dumps(post.to_dict(), sort_keys=True).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def compute_run_id(corpus: Corpus, config: RunConfig) -> str:
    h = hashlib.sha256()
    h.update(corpus_digest(corpus).encode("ascii"))
    h.update(b"\n")
    h.update(config.canonical_json().encode("utf-8"))
    return h.hexdigest()[:16]


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_backends(config: RunConfig) -> dict:
    """Instantiate the configured extraction/embedding/summarizer backends."""
    http_kw = {
        "token": config.auth_token,
        "timeout": config.timeout,
        "max_retries": config.max_retries,
    }
    if config.extraction_backend == "lexicon":
        extraction = default_lexicon_backend(config.lexicon_path)
    else:
        extraction = LlmExtractionBackend(
            HttpCompletionBackend(config.endpoints["llm"], **http_kw),
            PromptTemplate(),
        )
    if config.embedding_provider == "hashing":
        provider = HashingProvider(dim=config.embedding_dim)
    else:
        provider = HttpEmbeddingProvider(
            config.endpoints["embeddings"], dim=config.embedding_dim, **http_kw
        )
    if config.summarizer_backend == "template":
        summarizer = TemplateSummarizer()
    else:
        summarizer = HttpSummarizerBackend(config.endpoints["summarizer"], **http_kw)
    return {"extraction": extraction, "provider": provider, "summarizer": summarizer}


def summarize_entry(drug: str, entry, summarizer):
    if isinstance(summarizer, TemplateSummarizer):
        return template_summarize(drug, entry)
    return model_summarize(drug, entry, summarizer)


def run_pipeline(corpus: Corpus, config: RunConfig, workdir: str | Path,
                 backends: dict | None = None) -> RunResult:
    """Execute extract -> grid -> summaries and persist under the run id.

    A completed run is returned as-is without touching its files.  A
    backend outage marks the run failed and keeps whatever artifacts
    were already written.
    """
    config.validate()
    run_id = compute_run_id(corpus, config)
    run_dir = Path(workdir) / "runs" / run_id
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("status") == "complete":
            return RunResult(
                run_id=run_id,
                status="complete",
                run_dir=run_dir,
                artifacts=manifest.get("artifacts", {}),
            )
    run_dir.mkdir(parents=True, exist_ok=True)
    backends = backends or build_backends(config)
    config.save(run_dir / "config.json")

    def _finish(status: str, counts: dict, error: str | None = None) -> RunResult:
        artifacts = {}
        for name in ARTIFACT_NAMES:
            path = run_dir / name
            if path.exists():
                artifacts[name] = {"sha256": _file_digest(path)}
        manifest = {
            "run_id": run_id,
            "status": status,
            "corpus_digest": corpus_digest(corpus),
            "artifacts": artifacts,
            **counts,
        }
        if error is not None:
            manifest["error"] = error
        manifest_path.write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return RunResult(
            run_id=run_id,
            status=status,
            run_dir=run_dir,
            artifacts=artifacts,
            error=error,
        )

    counts = {"post_count": len(corpus), "drug_count": 0, "summary_count": 0}
    try:
        records = [extract(post, backends["extraction"]) for post in corpus]
        with open(run_dir / "records.jsonl", "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

        grid = build_grid(
            records,
            backends["provider"],
            linkage=config.linkage,
            threshold=config.threshold,
        )
        verify_grid_coverage(grid, records)
        grid.write_json(run_dir / "grid.json")
        counts["drug_count"] = len(grid.drugs())

        summaries = [
            summarize_entry(drug, grid.entries[drug], backends["summarizer"])
            for drug in grid.drugs()
        ]
        write_summaries_jsonl(summaries, run_dir / "summaries.jsonl")
        counts["summary_count"] = len(summaries)
    except TransportError as exc:
        return _finish("failed", counts, error=str(exc))
    except AdesumError as exc:
        return _finish("failed", counts, error=str(exc))
    return _finish("complete", counts)


def load_run_summaries(run_dir: str | Path):
    from .summarization import read_summaries_jsonl

    path = Path(run_dir) / "summaries.jsonl"
    if not path.exists():
        raise ValidationError(f"run has no summaries artifact at {path}")
    return read_summaries_jsonl(path)


def build_run_preferences(run_dir: str | Path, rejected_backend=None,
                          out_name: str = "preferences.jsonl"):
    """Preference dataset for a completed run: gold vs degraded/generated."""
    from .grouping import DrugGroupGrid

    run_dir = Path(run_dir)
    grid_path = run_dir / "grid.json"
    if not grid_path.exists():
        raise ValidationError(f"run has no grid artifact at {grid_path}")
    grid = DrugGroupGrid.read_json(grid_path)
    gold = {s.drug: s for s in load_run_summaries(run_dir)}
    provider = (
        GeneratorProvider(rejected_backend)
        if rejected_backend is not None
        else DegradingProvider()
    )
    pairs = build_preference_pairs(gold, provider, grid)
    out_path = run_dir / out_name
    export_preference_dataset(pairs, out_path)
    return pairs, out_path
