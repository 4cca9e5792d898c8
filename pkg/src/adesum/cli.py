"""Batch entry points wrapping each pipeline stage and the service.

Every subcommand is a thin shell over one library call: read the
declared input artifacts, run the op, write the declared outputs.
Exit codes: 0 success, 2 missing prerequisite artifact (the missing
path is printed), 3 backend failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .alignment import (
    MUTATIONS,
    DegradingProvider,
    DpoBatch,
    GeneratorProvider,
    build_preference_pairs,
    dpo_loss,
    dpo_report,
    export_preference_dataset,
)
from .backends import HttpSummarizerBackend
from .config import RunConfig, apply_env_overrides
from .corpus import Corpus, anonymize, ingest_posts, split_corpus
from .errors import AdesumError, TransportError, ValidationError
from .extraction import default_lexicon_backend, extract
from .grouping import DrugGroupGrid, HashingProvider, build_grid, verify_grid_coverage
from .metrics import evaluate_summaries
from .pipeline import build_backends, summarize_entry
from .summarization import (
    DrugSummary,
    read_summaries_jsonl,
    write_summaries_jsonl,
)

EXIT_OK = 0
EXIT_MISSING_ARTIFACT = 2
EXIT_BACKEND_FAILURE = 3


def _workpath(args, name: str) -> Path:
    path = Path(name)
    if path.is_absolute():
        return path
    return Path(args.workdir) / path


def _require(args, name: str) -> Path:
    path = _workpath(args, name)
    if not path.exists():
        print(f"missing artifact: {path}", file=sys.stderr)
        raise SystemExit(EXIT_MISSING_ARTIFACT)
    return path


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        config = RunConfig.load(_require(args, args.config))
    else:
        config = RunConfig()
    config = apply_env_overrides(config)
    for flag in ("linkage", "threshold", "dim", "beta"):
        value = getattr(args, flag, None)
        if value is not None:
            if flag == "dim":
                config.embedding_dim = value
            else:
                setattr(config, flag, value)
    config.validate()
    return config


# -- subcommand bodies ---------------------------------------------------


def _cmd_ingest(args) -> int:
    input_path = _require(args, args.input)
    corpus = ingest_posts(input_path, format=args.format)
    if args.anonymize_patterns:
        pattern_path = _require(args, args.anonymize_patterns)
        patterns = [
            line.strip()
            for line in pattern_path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        scrubbed = Corpus(provenance=corpus.provenance)
        for post in corpus:
            scrubbed.add(anonymize(post, patterns))
        corpus = scrubbed
    out = _workpath(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.write_jsonl(out)
    print(f"ingested {len(corpus)} posts -> {out}")
    return EXIT_OK


def _cmd_split(args) -> int:
    corpus = Corpus.read_jsonl(_require(args, args.corpus))
    ratios = tuple(float(r) for r in args.ratios.split(","))
    assignment = split_corpus(corpus, ratios, seed=args.seed)
    out = _workpath(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(
        json.dumps(assignment.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    print(
        f"split {len(corpus)} posts into "
        f"{len(assignment.train)}/{len(assignment.validation)}/{len(assignment.test)}"
        f" -> {out}"
    )
    return EXIT_OK


def _cmd_extract(args) -> int:
    corpus = Corpus.read_jsonl(_require(args, args.corpus))
    config = _load_config(args)
    if args.backend:
        config.extraction_backend = args.backend
        config.validate()
    if config.extraction_backend == "lexicon":
        backend = default_lexicon_backend(
            str(_require(args, args.lexicon)) if args.lexicon else config.lexicon_path
        )
    else:
        backend = build_backends(config)["extraction"]
    out = _workpath(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(out, "w", encoding="utf-8") as fh:
        for post in corpus:
            record = extract(post, backend)
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
            count += len(record.items)
    print(f"extracted {count} items from {len(corpus)} posts -> {out}")
    return EXIT_OK


def _read_records(path: Path):
    from .extraction import ExtractionRecord

    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(ExtractionRecord.from_dict(json.loads(line)))
    return records


def _cmd_group(args) -> int:
    records = _read_records(_require(args, args.records))
    config = _load_config(args)
    provider = (
        HashingProvider(dim=config.embedding_dim)
        if config.embedding_provider == "hashing"
        else build_backends(config)["provider"]
    )
    grid = build_grid(
        records, provider, linkage=config.linkage, threshold=config.threshold
    )
    verify_grid_coverage(grid, records)
    out = _workpath(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    grid.write_json(out)
    print(f"grouped {len(grid.drugs())} drugs -> {out}")
    return EXIT_OK


def _cmd_summarize(args) -> int:
    config = _load_config(args)
    if args.backend:
        config.summarizer_backend = args.backend
        config.validate()
    out = _workpath(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.no_grid:
        # ablation: raw posts straight to the model backend, no extraction
        if config.summarizer_backend != "model":
            raise ValidationError("--no-grid requires --backend model")
        corpus = Corpus.read_jsonl(_require(args, args.corpus))
        backend = HttpSummarizerBackend(
            config.endpoints["summarizer"],
            token=config.auth_token,
            timeout=config.timeout,
            max_retries=config.max_retries,
        )
        summaries = []
        for post in corpus:
            text = backend.generate(post.id, {"raw_post": post.text})
            summaries.append(
                DrugSummary(
                    drug=post.id,
                    text=text,
                    severity_order_trace=(),
                    backend_id=backend.backend_id,
                )
            )
        write_summaries_jsonl(summaries, out)
        print(f"summarized {len(summaries)} raw posts -> {out}")
        return EXIT_OK
    grid = DrugGroupGrid.read_json(_require(args, args.grid))
    summarizer = build_backends(config)["summarizer"]
    summaries = [
        summarize_entry(drug, grid.entries[drug], summarizer)
        for drug in grid.drugs()
    ]
    write_summaries_jsonl(summaries, out)
    print(f"summarized {len(summaries)} drugs -> {out}")
    return EXIT_OK


def _cmd_dpo_build(args) -> int:
    grid = DrugGroupGrid.read_json(_require(args, args.grid))
    gold = {s.drug: s for s in read_summaries_jsonl(_require(args, args.summaries))}
    if args.generator_url:
        provider = GeneratorProvider(HttpSummarizerBackend(args.generator_url))
    else:
        mutations = tuple(args.mutations.split(",")) if args.mutations else MUTATIONS
        provider = DegradingProvider(mutations)
    pairs = build_preference_pairs(gold, provider, grid)
    out = _workpath(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_preference_dataset(pairs, out)
    print(f"built {len(pairs)} preference pairs -> {out}")
    return EXIT_OK


def _cmd_dpo_loss(args) -> int:
    batch_path = _require(args, args.batch)
    data = json.loads(batch_path.read_text(encoding="utf-8"))
    if args.beta is not None:
        data["beta"] = args.beta
    batch = DpoBatch.from_dict(data)
    loss = dpo_loss(batch)
    print(f"{loss:.6f}")
    if args.report:
        report_path = _workpath(args, args.report)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(
            json.dumps(dpo_report(batch), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        print(f"report -> {report_path}", file=sys.stderr)
    return EXIT_OK


def _read_predictions(path: Path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out[str(d["drug"])] = str(d["text"])
    return out


def _cmd_eval(args) -> int:
    pred = _read_predictions(_require(args, args.pred))
    gold = {s.drug: s for s in read_summaries_jsonl(_require(args, args.gold))}
    wanted = set(args.metrics.split(",")) if args.metrics else None
    provider = HashingProvider() if wanted and "embedding" in wanted else None
    report = evaluate_summaries(pred, gold, provider=provider)
    if wanted is not None:
        prefixes = {
            "rouge": ("rouge1_f1", "rouge2_f1", "rougeL_f1"),
            "bleu": ("bleu1", "bleu2", "bleu3", "bleu4"),
            "jaccard": ("jaccard",),
            "hamming": ("hamming",),
            "ros": ("ros",),
            "meteor": ("meteor",),
            "facts": ("factual_recall", "omission_rate", "partial_presence"),
            "embedding": ("embedding_f1",),
        }
        unknown = wanted - set(prefixes)
        if unknown:
            raise ValidationError(f"unknown metrics: {sorted(unknown)}")
        keep = {key for name in wanted for key in prefixes[name]}
        report.scores = {k: v for k, v in report.scores.items() if k in keep}
    print(report.to_table())
    if args.out:
        out = _workpath(args, args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        print(f"report -> {out}", file=sys.stderr)
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceSettings, create_app

    settings = ServiceSettings(
        corpus_path=_require(args, args.corpus),
        workdir=Path(args.workdir),
        config=_load_config(args),
        required_raters=args.raters,
    )
    app = create_app(settings)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adesum",
        description="Adverse drug event extraction, grouping, and summarization.",
    )
    parser.add_argument(
        "--workdir", default=".", help="base directory for relative artifact paths"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="read raw posts into a corpus artifact")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    p.add_argument("--out", default="corpus.jsonl")
    p.add_argument("--anonymize-patterns", default=None,
                   help="file with one username regex per line")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("split", help="partition the corpus into train/val/test")
    p.add_argument("--corpus", default="corpus.jsonl")
    p.add_argument("--ratios", default="0.80,0.05,0.15")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", default="split.json")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("extract", help="extract (drug, ADE, severity) items")
    p.add_argument("--corpus", default="corpus.jsonl")
    p.add_argument("--backend", choices=("lexicon", "model"), default=None)
    p.add_argument("--lexicon", default=None, help="lexicon JSON overriding the built-in")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="records.jsonl")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("group", help="cluster extracted items into the drug grid")
    p.add_argument("--records", default="records.jsonl")
    p.add_argument("--linkage", choices=("single", "average", "complete"), default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="grid.json")
    p.set_defaults(func=_cmd_group)

    p = sub.add_parser("summarize", help="write one severity-ordered summary per drug")
    p.add_argument("--grid", default="grid.json")
    p.add_argument("--backend", choices=("template", "model"), default=None)
    p.add_argument("--no-grid", action="store_true",
                   help="ablation: summarize raw posts without extraction")
    p.add_argument("--corpus", default="corpus.jsonl",
                   help="corpus for --no-grid mode")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="summaries.jsonl")
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("dpo-build", help="build the preference dataset")
    p.add_argument("--grid", default="grid.json")
    p.add_argument("--summaries", default="summaries.jsonl")
    p.add_argument("--mutations", default=None,
                   help="comma list from: " + ",".join(MUTATIONS))
    p.add_argument("--generator-url", default=None,
                   help="summarizer endpoint for non-preferred texts")
    p.add_argument("--out", default="preferences.jsonl")
    p.set_defaults(func=_cmd_dpo_build)

    p = sub.add_parser("dpo-loss", help="evaluate the preference loss on a batch file")
    p.add_argument("--batch", required=True,
                   help='JSON {"beta", "pairs": [{policy/ref logprobs}]}')
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--report", default=None, help="write full report JSON here")
    p.set_defaults(func=_cmd_dpo_loss)

    p = sub.add_parser("eval", help="score predicted summaries against gold")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--metrics", default=None,
                   help="comma list: jaccard,hamming,ros,rouge,bleu,meteor,facts,embedding")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("serve", help="start the annotation/rating HTTP service")
    p.add_argument("--corpus", default="corpus.jsonl")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--raters", type=int, default=3)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except TransportError as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND_FAILURE
    except AdesumError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
