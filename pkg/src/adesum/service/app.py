"""HTTP service: runs, grid browsing, annotation, ratings, statistics.

The app is a thin composition layer.  All pipeline math lives in the
library modules, all annotation state in ServiceStore; handlers only
translate between HTTP and those calls, so the service and the CLI can
never disagree on a number.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from ..config import RunConfig, apply_env_overrides
from ..corpus import AdeLabel, AnnotationRecord, Corpus, DrugAnnotation
from ..errors import (
    AdesumError,
    ConflictError,
    NotFoundError,
    TransportError,
    ValidationError,
)
from ..metrics import clinical_eval_aggregate
from ..pipeline import load_run_summaries, run_pipeline
from .schemas import (
    LabelSubmission,
    RatingOut,
    RatingSubmission,
    RunOut,
    RunRequest,
    SubmitOut,
    SummaryOut,
    TaskOut,
)
from .store import ServiceStore


@dataclass
class ServiceSettings:
    corpus_path: str | Path
    workdir: str | Path
    config: RunConfig = field(default_factory=RunConfig)
    required_raters: int = 3
    data_dir: str | Path | None = None

    def resolved_data_dir(self) -> Path:
        if self.data_dir is not None:
            return Path(self.data_dir)
        return Path(self.workdir) / "service"


def _record_from_submission(post_id: str, rater: str, drugs) -> AnnotationRecord:
    return AnnotationRecord(
        post_id=post_id,
        annotator_id=rater,
        drugs=tuple(
            DrugAnnotation(
                name=d.name,
                ades=tuple(
                    AdeLabel.from_dict(a.model_dump()) for a in d.ades
                ),
            )
            for d in drugs
        ),
    )


def create_app(settings: ServiceSettings) -> FastAPI:
    corpus = Corpus.read_jsonl(settings.corpus_path)
    store = ServiceStore(
        settings.resolved_data_dir(), required_raters=settings.required_raters
    )
    store.ensure_tasks(corpus.ids)
    workdir = Path(settings.workdir)
    latest_run_file = store.data_dir / "latest_run"

    app = FastAPI(title="adesum service")
    app.state.store = store
    app.state.corpus = corpus

    # -- error mapping -------------------------------------------------

    def _error(status: int, code: str, message: str) -> JSONResponse:
        return JSONResponse(status_code=status, content={"code": code, "message": message})

    @app.exception_handler(AdesumError)
    async def _adesum_error(request: Request, exc: AdesumError):
        if isinstance(exc, NotFoundError):
            return _error(404, "not_found", str(exc))
        if isinstance(exc, ConflictError):
            return _error(409, exc.code, str(exc))
        if isinstance(exc, TransportError):
            return _error(502, "backend_unavailable", str(exc))
        if isinstance(exc, ValidationError):
            return _error(400, "validation_error", str(exc))
        return _error(500, "internal_error", str(exc))

    @app.exception_handler(RequestValidationError)
    async def _request_error(request: Request, exc: RequestValidationError):
        return _error(422, "validation_error", str(exc))

    # -- runs ------------------------------------------------------------

    def _run_dir(run_id: str) -> Path:
        run_dir = workdir / "runs" / run_id
        if not (run_dir / "manifest.json").exists():
            raise NotFoundError(f"no run {run_id!r}")
        return run_dir

    def _resolve_run_id(run_id: str | None) -> str:
        if run_id:
            _run_dir(run_id)
            return run_id
        if latest_run_file.exists():
            return latest_run_file.read_text(encoding="utf-8").strip()
        raise NotFoundError("no completed runs yet; POST /runs first")

    @app.post("/runs", response_model=RunOut, status_code=201)
    def create_run(body: RunRequest):
        base = settings.config.to_dict(redact=False)
        base.update(body.config)
        run_config = apply_env_overrides(RunConfig.from_dict(base))
        result = run_pipeline(corpus, run_config, workdir)
        manifest = json.loads(
            (result.run_dir / "manifest.json").read_text(encoding="utf-8")
        )
        if result.ok:
            latest_run_file.write_text(result.run_id, encoding="utf-8")
        return RunOut(
            run_id=result.run_id,
            status=result.status,
            post_count=manifest.get("post_count"),
            drug_count=manifest.get("drug_count"),
            summary_count=manifest.get("summary_count"),
            error=result.error,
        )

    @app.get("/runs/{run_id}")
    def get_run(run_id: str):
        manifest_path = _run_dir(run_id) / "manifest.json"
        return json.loads(manifest_path.read_text(encoding="utf-8"))

    @app.get("/drugs")
    def list_drugs(run_id: str | None = None):
        rid = _resolve_run_id(run_id)
        from ..grouping import DrugGroupGrid

        grid = DrugGroupGrid.read_json(_run_dir(rid) / "grid.json")
        return {"run_id": rid, "drugs": grid.drugs()}

    @app.get("/drugs/{name}/summary", response_model=SummaryOut)
    def drug_summary(name: str, run_id: str | None = None):
        rid = _resolve_run_id(run_id)
        for summary in load_run_summaries(_run_dir(rid)):
            if summary.drug == name:
                d = summary.to_dict()
                return SummaryOut(**d)
        raise NotFoundError(f"run {rid} has no summary for drug {name!r}")

    # -- annotation -------------------------------------------------------

    @app.get("/annotation/next", response_model=TaskOut)
    def annotation_next(rater: str):
        if not rater:
            raise ValidationError("rater must be non-empty")
        task = store.next_task(rater)
        if task is None:
            raise NotFoundError("no open tasks for this rater")
        post = corpus.get(task["post_id"])
        return TaskOut(
            task_id=task["task_id"],
            post_id=task["post_id"],
            text=post.text,
            status=task["status"],
            version=task["version"],
            submissions=len(task["submissions"]),
        )

    @app.post("/annotation/{task_id}/labels", response_model=SubmitOut)
    def annotation_labels(task_id: str, body: LabelSubmission):
        task = store.get_task(task_id)
        record = _record_from_submission(task["post_id"], body.rater, body.drugs)
        task = store.submit_labels(
            task_id, body.rater, record, expected_version=body.expected_version
        )
        return SubmitOut(
            task_id=task_id, version=task["version"], status=task["status"]
        )

    @app.post("/annotation/{task_id}/adjudicate", response_model=SubmitOut)
    def annotation_adjudicate(task_id: str, body: LabelSubmission):
        task = store.get_task(task_id)
        record = _record_from_submission(task["post_id"], body.rater, body.drugs)
        task = store.adjudicate(
            task_id, body.rater, record, expected_version=body.expected_version
        )
        return SubmitOut(
            task_id=task_id, version=task["version"], status=task["status"]
        )

    @app.get("/annotation/adjudication")
    def annotation_queue():
        return {
            "tasks": [
                {
                    "task_id": t["task_id"],
                    "post_id": t["post_id"],
                    "version": t["version"],
                    "unresolved": t["unresolved"],
                }
                for t in store.adjudication_queue()
            ]
        }

    @app.get("/annotation/{task_id}")
    def annotation_task(task_id: str):
        task = store.get_task(task_id)
        return {
            "task_id": task["task_id"],
            "post_id": task["post_id"],
            "status": task["status"],
            "version": task["version"],
            "submissions": len(task["submissions"]),
            "consensus": task["consensus"],
            "unresolved": task["unresolved"],
        }

    # -- ratings ------------------------------------------------------------

    @app.post("/ratings", response_model=RatingOut, status_code=201)
    def post_rating(body: RatingSubmission):
        rid = store.submit_rating(body.summary_id, body.rater, body.scores)
        return RatingOut(rating_id=rid)

    @app.get("/ratings/sample")
    def sample_summaries(fraction: float = 0.2, seed: int = 0,
                         run_id: str | None = None):
        if not 0 < fraction <= 1:
            raise ValidationError(f"fraction must lie in (0, 1], got {fraction}")
        rid = _resolve_run_id(run_id)
        summaries = load_run_summaries(_run_dir(rid))
        if not summaries:
            raise ValidationError(f"run {rid} produced no summaries to sample")
        drugs = sorted(s.drug for s in summaries)
        k = max(1, round(fraction * len(drugs)))
        picked = sorted(random.Random(seed).sample(drugs, k))
        return {
            "run_id": rid,
            "fraction": fraction,
            "seed": seed,
            "summary_ids": [f"{rid}:{drug}" for drug in picked],
        }

    # -- statistics -----------------------------------------------------------

    @app.get("/stats/agreement")
    def stats_agreement():
        stats = store.agreement_stats()
        if stats is None:
            return {
                "status": "insufficient_data",
                "reason": "need two raters with overlapping finalized items",
            }
        return {"status": "ok", **stats}

    @app.get("/stats/clinical")
    def stats_clinical():
        return clinical_eval_aggregate(store.rating_rows())

    @app.get("/health")
    def health():
        return {"status": "ok", "posts": len(corpus), "tasks": len(store.tasks)}

    return app
