"""Durable annotation and rating state behind the HTTP service.

Every write is one JSON line appended to an event log; the in-memory
index is rebuilt by replaying that log on startup, so a restarted
service resumes exactly where it stopped.  Optimistic versioning: each
task write bumps its version by one, and a submission carrying a stale
version is rejected without mutating anything.
"""

from __future__ import annotations

import hashlib
import json
import threading
from collections import Counter, defaultdict
from datetime import datetime, timezone
from pathlib import Path

from ..corpus import (
    AnnotationRecord,
    aggregate_annotations,
    cohens_kappa,
    normalize_term,
)
from ..errors import ConflictError, NotFoundError, ValidationError
from ..metrics import CLINICAL_AXES

OPEN_STATUSES = ("open", "in_progress")
AGGREGATED_STATUSES = ("final", "adjudication")


def _dispute_dict(item) -> dict:
    return {
        "drug": item.drug,
        "ade_text": item.ade_text,
        "severity_votes": item.severity_votes,
        "adversity_votes": item.adversity_votes,
        "reason": item.reason,
    }


class ServiceStore:
    def __init__(self, data_dir: str | Path, required_raters: int = 3):
        if required_raters < 2:
            raise ValidationError("need at least two raters per task")
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.data_dir / "events.jsonl"
        self.required_raters = required_raters
        self._lock = threading.Lock()
        self.tasks: dict[str, dict] = {}
        self.ratings: dict[str, dict] = {}
        self._rating_index: dict[tuple[str, str], str] = {}
        self._replay()

    # -- event plumbing ------------------------------------------------

    def _replay(self) -> None:
        if not self.log_path.exists():
            return
        with open(self.log_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    self._apply(json.loads(line))

    def _append(self, event: dict) -> None:
        # caller holds the lock
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
        self._apply(event)

    def _apply(self, event: dict) -> None:
        entity = event["entity"]
        if entity == "task":
            self._apply_task(event)
        elif entity == "rating":
            payload = event["payload"]
            rid = event["id"]
            self.ratings[rid] = payload
            self._rating_index[(payload["summary_id"], payload["rater"])] = rid

    def _apply_task(self, event: dict) -> None:
        kind = event["type"]
        tid = event["id"]
        if kind == "created":
            self.tasks[tid] = {
                "task_id": tid,
                "post_id": event["payload"]["post_id"],
                "status": "open",
                "version": event["version"],
                "assigned": [],
                "submissions": [],
                "consensus": None,
                "unresolved": [],
            }
            return
        task = self.tasks[tid]
        task["version"] = event["version"]
        payload = event.get("payload", {})
        if kind == "assigned":
            if payload["rater"] not in task["assigned"]:
                task["assigned"].append(payload["rater"])
            task["status"] = "in_progress"
        elif kind == "labels":
            task["submissions"].append(payload)
            if len(task["submissions"]) >= self.required_raters:
                task["status"] = "submitted"
            else:
                task["status"] = "in_progress"
        elif kind == "aggregated":
            task["status"] = payload["status"]
            task["consensus"] = payload["consensus"]
            task["unresolved"] = payload["unresolved"]
        elif kind == "adjudicated":
            task["status"] = "final"
            task["consensus"] = payload["record"]
            task["unresolved"] = []

    # -- tasks ----------------------------------------------------------

    def ensure_tasks(self, post_ids) -> None:
        with self._lock:
            for post_id in post_ids:
                tid = f"task-{post_id}"
                if tid not in self.tasks:
                    self._append(
                        {
                            "entity": "task",
                            "type": "created",
                            "id": tid,
                            "version": 1,
                            "payload": {"post_id": post_id},
                        }
                    )

    def get_task(self, task_id: str) -> dict:
        task = self.tasks.get(task_id)
        if task is None:
            raise NotFoundError(f"no task {task_id!r}")
        return task

    def _raters_done(self, task: dict) -> set:
        return {s["rater"] for s in task["submissions"]}

    def next_task(self, rater: str) -> dict | None:
        """Least-annotated open task this rater has not labelled yet."""
        with self._lock:
            open_tasks = [
                t for t in self.tasks.values() if t["status"] in OPEN_STATUSES
            ]
            # a pending assignment is simply handed back
            for task in sorted(open_tasks, key=lambda t: t["task_id"]):
                if rater in task["assigned"] and rater not in self._raters_done(task):
                    return task
            candidates = [
                t
                for t in open_tasks
                if rater not in self._raters_done(t) and rater not in t["assigned"]
            ]
            if not candidates:
                return None
            task = min(candidates, key=lambda t: (len(t["submissions"]), t["task_id"]))
            self._append(
                {
                    "entity": "task",
                    "type": "assigned",
                    "id": task["task_id"],
                    "version": task["version"] + 1,
                    "payload": {"rater": rater},
                }
            )
            return task

    def submit_labels(
        self, task_id: str, rater: str, record: AnnotationRecord, expected_version: int
    ) -> dict:
        with self._lock:
            task = self.get_task(task_id)
            if task["status"] not in OPEN_STATUSES:
                raise ConflictError(
                    f"task {task_id} is {task['status']} and no longer accepts labels",
                    code="task_closed",
                )
            if expected_version != task["version"]:
                raise ConflictError(
                    f"stale version {expected_version}, task is at {task['version']}",
                    code="version_conflict",
                )
            if rater in self._raters_done(task):
                raise ConflictError(
                    f"rater {rater!r} already submitted labels for {task_id}",
                    code="duplicate_submission",
                )
            if record.post_id != task["post_id"]:
                raise ValidationError(
                    f"record post {record.post_id!r} does not match task post "
                    f"{task['post_id']!r}"
                )
            self._append(
                {
                    "entity": "task",
                    "type": "labels",
                    "id": task_id,
                    "version": task["version"] + 1,
                    "payload": {"rater": rater, "record": record.to_dict()},
                }
            )
            if len(task["submissions"]) >= self.required_raters:
                records = [
                    AnnotationRecord.from_dict(s["record"])
                    for s in task["submissions"]
                ]
                final, unresolved = aggregate_annotations(records)
                status = "final" if not unresolved else "adjudication"
                self._append(
                    {
                        "entity": "task",
                        "type": "aggregated",
                        "id": task_id,
                        "version": task["version"] + 1,
                        "payload": {
                            "status": status,
                            "consensus": final.to_dict(),
                            "unresolved": [_dispute_dict(u) for u in unresolved],
                        },
                    }
                )
            return task

    def adjudicate(
        self, task_id: str, adjudicator: str, record: AnnotationRecord,
        expected_version: int,
    ) -> dict:
        with self._lock:
            task = self.get_task(task_id)
            if task["status"] != "adjudication":
                raise ConflictError(
                    f"task {task_id} is {task['status']}, not awaiting adjudication",
                    code="task_closed",
                )
            if expected_version != task["version"]:
                raise ConflictError(
                    f"stale version {expected_version}, task is at {task['version']}",
                    code="version_conflict",
                )
            if record.post_id != task["post_id"]:
                raise ValidationError(
                    f"record post {record.post_id!r} does not match task post "
                    f"{task['post_id']!r}"
                )
            self._append(
                {
                    "entity": "task",
                    "type": "adjudicated",
                    "id": task_id,
                    "version": task["version"] + 1,
                    "payload": {"adjudicator": adjudicator, "record": record.to_dict()},
                }
            )
            return task

    def adjudication_queue(self) -> list[dict]:
        return sorted(
            (t for t in self.tasks.values() if t["status"] == "adjudication"),
            key=lambda t: t["task_id"],
        )

    # -- ratings ---------------------------------------------------------

    def submit_rating(self, summary_id: str, rater: str, scores: dict) -> str:
        if set(scores) != set(CLINICAL_AXES):
            raise ValidationError(
                f"scores must cover exactly the axes {sorted(CLINICAL_AXES)}"
            )
        for axis, value in scores.items():
            if not isinstance(value, int) or isinstance(value, bool) \
                    or not 1 <= value <= 5:
                raise ValidationError(
                    f"axis {axis!r} score must be an integer in 1..5, got {value!r}"
                )
        with self._lock:
            key = (summary_id, rater)
            if key in self._rating_index:
                raise ConflictError(
                    f"rating already exists: {self._rating_index[key]}",
                    code="duplicate_rating",
                )
            rid = "rating-" + hashlib.sha256(
                f"{summary_id}|{rater}".encode("utf-8")
            ).hexdigest()[:12]
            self._append(
                {
                    "entity": "rating",
                    "type": "added",
                    "id": rid,
                    "payload": {
                        "summary_id": summary_id,
                        "rater": rater,
                        "scores": dict(scores),
                        "submitted_at": datetime.now(timezone.utc).isoformat(),
                    },
                }
            )
            return rid

    def rating_rows(self) -> list[dict]:
        rows = []
        for rid in sorted(self.ratings):
            record = self.ratings[rid]
            for axis in CLINICAL_AXES:
                rows.append(
                    {
                        "rater_id": record["rater"],
                        "axis": axis,
                        "score": record["scores"][axis],
                    }
                )
        return rows

    # -- agreement --------------------------------------------------------

    def rater_severity_labels(self) -> dict[str, dict]:
        """Per rater: (post, drug, ade) -> severity, over aggregated tasks."""
        out: dict[str, dict] = defaultdict(dict)
        for task in self.tasks.values():
            if task["status"] not in AGGREGATED_STATUSES:
                continue
            for sub in task["submissions"]:
                record = sub["record"]
                for drug in record["drugs"]:
                    for ade in drug["ades"]:
                        key = (
                            task["post_id"],
                            drug["name"],
                            normalize_term(ade["text"]),
                        )
                        out[sub["rater"]].setdefault(key, ade["severity"])
        return out

    def agreement_stats(self) -> dict | None:
        """Pairwise kappa over overlapping items; None when not computable."""
        labels = self.rater_severity_labels()
        raters = sorted(labels)
        pairwise = {}
        confusion: dict[str, Counter] = defaultdict(Counter)
        for i, a in enumerate(raters):
            for b in raters[i + 1 :]:
                shared = sorted(set(labels[a]) & set(labels[b]))
                if not shared:
                    continue
                seq_a = [labels[a][k] for k in shared]
                seq_b = [labels[b][k] for k in shared]
                pairwise[f"{a}|{b}"] = cohens_kappa(seq_a, seq_b)
                for x, y in zip(seq_a, seq_b):
                    confusion[x][y] += 1
        if not pairwise:
            return None
        return {
            "pairwise": pairwise,
            "mean_kappa": sum(pairwise.values()) / len(pairwise),
            "confusion": {k: dict(v) for k, v in sorted(confusion.items())},
            "raters": raters,
            "pair_count": len(pairwise),
        }
