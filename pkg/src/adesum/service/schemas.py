"""Request and response bodies for the HTTP surface."""

from __future__ import annotations

from pydantic import BaseModel, Field


class AdeLabelIn(BaseModel):
    text: str
    severity: str
    adversity: bool
    evidence_terms: list[str] = Field(default_factory=list)


class DrugAnnotationIn(BaseModel):
    name: str
    ades: list[AdeLabelIn]


class LabelSubmission(BaseModel):
    rater: str
    expected_version: int
    drugs: list[DrugAnnotationIn]


class RatingSubmission(BaseModel):
    summary_id: str
    rater: str
    scores: dict[str, int]


class RunRequest(BaseModel):
    config: dict = Field(default_factory=dict)


class TaskOut(BaseModel):
    task_id: str
    post_id: str
    text: str
    status: str
    version: int
    submissions: int


class SubmitOut(BaseModel):
    task_id: str
    version: int
    status: str


class RatingOut(BaseModel):
    rating_id: str


class RunOut(BaseModel):
    run_id: str
    status: str
    post_count: int | None = None
    drug_count: int | None = None
    summary_count: int | None = None
    error: str | None = None


class SummaryOut(BaseModel):
    drug: str
    text: str
    severity_order_trace: list[list[str]]
    backend_id: str
    order_violations: list[str]
