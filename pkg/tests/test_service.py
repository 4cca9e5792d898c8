"""HTTP service: runs, annotation lifecycle, ratings, agreement stats.

Every test drives the app through fastapi.testclient; the store is
additionally restarted mid-suite to prove the event log replays to the
same state.
"""

import json

import pytest
from conftest import make_posts
from fastapi.testclient import TestClient

from adesum.corpus import Corpus, Post, cohens_kappa
from adesum.errors import ConflictError, ValidationError
from adesum.metrics import CLINICAL_AXES
from adesum.service.app import ServiceSettings, create_app
from adesum.service.store import ServiceStore


def _fixed_posts(n=4):
    return [
        Post(id=f"p{i}", text="Tamoxifen gave me hot flashes most nights.")
        for i in range(1, n + 1)
    ]


def _make_service(tmp_path, posts, required_raters=3, name="svc"):
    root = tmp_path / name
    root.mkdir(parents=True, exist_ok=True)
    corpus_path = root / "corpus.jsonl"
    Corpus(posts).write_jsonl(corpus_path)
    settings = ServiceSettings(
        corpus_path=corpus_path,
        workdir=root / "work",
        required_raters=required_raters,
        data_dir=root / "state",
    )
    return settings, TestClient(create_app(settings))


def _label_body(rater, version, severity, drug="tamoxifen", ade="hot flashes",
                adversity=False, evidence=()):
    return {
        "rater": rater,
        "expected_version": version,
        "drugs": [
            {
                "name": drug,
                "ades": [
                    {
                        "text": ade,
                        "severity": severity,
                        "adversity": adversity,
                        "evidence_terms": list(evidence),
                    }
                ],
            }
        ],
    }


def _submit(client, task_id, rater, severity, **kw):
    task = client.get(f"/annotation/{task_id}").json()
    response = client.post(
        f"/annotation/{task_id}/labels",
        json=_label_body(rater, task["version"], severity, **kw),
    )
    assert response.status_code == 200, response.text
    return response.json()


def _scores(value):
    return {axis: value for axis in CLINICAL_AXES}


@pytest.fixture
def svc(tmp_path):
    posts = _fixed_posts(4) + make_posts(8, seed=5)
    settings, client = _make_service(tmp_path, posts)
    return settings, client


# ---------------------------------------------------------------------------
# health and runs
# ---------------------------------------------------------------------------


def test_health_reports_counts(svc):
    _, client = svc
    body = client.get("/health").json()
    assert body == {"status": "ok", "posts": 12, "tasks": 12}


def test_create_and_fetch_run(svc):
    _, client = svc
    created = client.post("/runs", json={})
    assert created.status_code == 201
    body = created.json()
    assert body["status"] == "complete"
    assert len(body["run_id"]) == 16
    assert body["post_count"] == 12
    assert body["drug_count"] >= 1
    assert body["summary_count"] == body["drug_count"]
    assert body["error"] is None

    manifest = client.get(f"/runs/{body['run_id']}").json()
    assert manifest["run_id"] == body["run_id"]
    assert manifest["status"] == "complete"


def test_run_with_config_override(svc):
    _, client = svc
    a = client.post("/runs", json={}).json()
    b = client.post("/runs", json={"config": {"threshold": 0.2}}).json()
    assert a["run_id"] != b["run_id"]


def test_repeat_run_returns_same_id(svc):
    _, client = svc
    a = client.post("/runs", json={}).json()
    b = client.post("/runs", json={}).json()
    assert a == b


def test_unknown_run_is_404_with_error_shape(svc):
    _, client = svc
    response = client.get("/runs/deadbeef00000000")
    assert response.status_code == 404
    body = response.json()
    assert set(body) == {"code", "message"}
    assert body["code"] == "not_found"


def test_drugs_and_summary_endpoints(svc):
    _, client = svc
    run_id = client.post("/runs", json={}).json()["run_id"]

    listed = client.get("/drugs", params={"run_id": run_id}).json()
    assert listed["run_id"] == run_id
    assert listed["drugs"] == sorted(listed["drugs"])
    assert "tamoxifen" in listed["drugs"]

    # omitting run_id falls back to the latest completed run
    assert client.get("/drugs").json() == listed

    summary = client.get("/drugs/tamoxifen/summary").json()
    assert summary["drug"] == "tamoxifen"
    assert summary["text"].startswith("DRUG: tamoxifen.")
    assert summary["order_violations"] == []
    assert summary["backend_id"] == "template"

    missing = client.get("/drugs/aspirin/summary")
    assert missing.status_code == 404


def test_drugs_before_any_run_is_404(svc):
    _, client = svc
    response = client.get("/drugs")
    assert response.status_code == 404
    assert "POST /runs" in response.json()["message"]


# ---------------------------------------------------------------------------
# annotation lifecycle
# ---------------------------------------------------------------------------


def test_next_task_assigns_and_is_stable_until_labelled(svc):
    _, client = svc
    first = client.get("/annotation/next", params={"rater": "r1"}).json()
    assert first["task_id"] == "task-p1"
    assert first["status"] == "in_progress"
    assert first["submissions"] == 0
    # asking again hands the same pending assignment back, same version
    again = client.get("/annotation/next", params={"rater": "r1"}).json()
    assert again == first


def test_next_task_prefers_least_annotated(svc):
    _, client = svc
    task = client.get("/annotation/next", params={"rater": "r1"}).json()
    _submit(client, task["task_id"], "r1", "high")
    other = client.get("/annotation/next", params={"rater": "r2"}).json()
    # task-p1 already has one submission, so a fresh rater gets task-p2
    assert other["task_id"] == "task-p2"


def test_no_open_tasks_for_rater_is_404(tmp_path):
    _, client = _make_service(tmp_path, _fixed_posts(1), name="tiny")
    _submit(client, "task-p1", "r1", "high")
    response = client.get("/annotation/next", params={"rater": "r1"})
    assert response.status_code == 404


def test_three_agreeing_raters_finalize_a_task(svc):
    _, client = svc
    kw = {"adversity": True, "evidence": ["awful"]}
    _submit(client, "task-p1", "r1", "high", **kw)
    mid = client.get("/annotation/task-p1").json()
    assert mid["status"] == "in_progress"
    assert mid["submissions"] == 1
    _submit(client, "task-p1", "r2", "high", **kw)
    out = _submit(client, "task-p1", "r3", "high", **kw)
    assert out["status"] == "final"

    task = client.get("/annotation/task-p1").json()
    assert task["status"] == "final"
    assert task["unresolved"] == []
    consensus = task["consensus"]
    assert consensus["post_id"] == "p1"
    (drug,) = consensus["drugs"]
    assert drug["name"] == "tamoxifen"
    (ade,) = drug["ades"]
    assert ade["severity"] == "high"
    assert ade["adversity"] is True
    assert ade["evidence_terms"] == ["awful"]


def test_majority_wins_two_to_one(svc):
    _, client = svc
    _submit(client, "task-p1", "r1", "high")
    _submit(client, "task-p1", "r2", "moderate")
    out = _submit(client, "task-p1", "r3", "high")
    assert out["status"] == "final"
    consensus = client.get("/annotation/task-p1").json()["consensus"]
    assert consensus["drugs"][0]["ades"][0]["severity"] == "high"


def test_stale_version_conflicts_without_mutating(svc):
    _, client = svc
    task = client.get("/annotation/task-p1").json()
    response = client.post(
        "/annotation/task-p1/labels",
        json=_label_body("r1", task["version"] - 1, "high"),
    )
    assert response.status_code == 409
    body = response.json()
    assert body["code"] == "version_conflict"
    assert "stale" in body["message"]
    after = client.get("/annotation/task-p1").json()
    assert after["version"] == task["version"]
    assert after["submissions"] == task["submissions"]


def test_duplicate_submission_is_409(svc):
    _, client = svc
    _submit(client, "task-p1", "r1", "high")
    task = client.get("/annotation/task-p1").json()
    response = client.post(
        "/annotation/task-p1/labels",
        json=_label_body("r1", task["version"], "mild"),
    )
    assert response.status_code == 409
    assert response.json()["code"] == "duplicate_submission"


def test_finalized_task_rejects_further_labels(svc):
    _, client = svc
    for rater in ("r1", "r2", "r3"):
        _submit(client, "task-p1", rater, "high")
    task = client.get("/annotation/task-p1").json()
    response = client.post(
        "/annotation/task-p1/labels",
        json=_label_body("r4", task["version"], "mild"),
    )
    assert response.status_code == 409
    assert response.json()["code"] == "task_closed"


def test_unknown_task_is_404(svc):
    _, client = svc
    assert client.get("/annotation/task-nope").status_code == 404
    response = client.post(
        "/annotation/task-nope/labels", json=_label_body("r1", 1, "high")
    )
    assert response.status_code == 404
    assert set(response.json()) == {"code", "message"}


def test_bad_severity_is_400_validation_error(svc):
    _, client = svc
    task = client.get("/annotation/task-p1").json()
    response = client.post(
        "/annotation/task-p1/labels",
        json=_label_body("r1", task["version"], "catastrophic"),
    )
    assert response.status_code == 400
    assert response.json()["code"] == "validation_error"


def test_missing_body_fields_are_422(svc):
    _, client = svc
    response = client.post("/annotation/task-p1/labels", json={"rater": "r1"})
    assert response.status_code == 422
    assert response.json()["code"] == "validation_error"


# ---------------------------------------------------------------------------
# adjudication
# ---------------------------------------------------------------------------


def _three_way_split(client, task_id):
    _submit(client, task_id, "r1", "high")
    _submit(client, task_id, "r2", "moderate")
    return _submit(client, task_id, "r3", "mild")


def test_three_way_split_lands_in_adjudication(svc):
    _, client = svc
    out = _three_way_split(client, "task-p1")
    assert out["status"] == "adjudication"

    queue = client.get("/annotation/adjudication").json()["tasks"]
    assert [t["task_id"] for t in queue] == ["task-p1"]
    (item,) = queue[0]["unresolved"]
    assert item["drug"] == "tamoxifen"
    assert item["severity_votes"] == {"high": 1, "moderate": 1, "mild": 1}
    assert sum(item["adversity_votes"].values()) == 3
    assert "severity" in item["reason"]


def test_adjudication_resolves_to_final(svc):
    _, client = svc
    _three_way_split(client, "task-p1")
    version = client.get("/annotation/task-p1").json()["version"]
    response = client.post(
        "/annotation/task-p1/adjudicate",
        json=_label_body("lead", version, "moderate"),
    )
    assert response.status_code == 200
    assert response.json()["status"] == "final"

    task = client.get("/annotation/task-p1").json()
    assert task["status"] == "final"
    assert task["unresolved"] == []
    assert task["consensus"]["annotator_id"] == "lead"
    assert task["consensus"]["drugs"][0]["ades"][0]["severity"] == "moderate"
    assert client.get("/annotation/adjudication").json()["tasks"] == []


def test_adjudicating_an_open_task_conflicts(svc):
    _, client = svc
    task = client.get("/annotation/task-p1").json()
    response = client.post(
        "/annotation/task-p1/adjudicate",
        json=_label_body("lead", task["version"], "high"),
    )
    assert response.status_code == 409
    assert response.json()["code"] == "task_closed"


def test_adjudication_checks_version(svc):
    _, client = svc
    _three_way_split(client, "task-p1")
    version = client.get("/annotation/task-p1").json()["version"]
    response = client.post(
        "/annotation/task-p1/adjudicate",
        json=_label_body("lead", version + 5, "high"),
    )
    assert response.status_code == 409
    assert response.json()["code"] == "version_conflict"


# ---------------------------------------------------------------------------
# ratings and clinical stats
# ---------------------------------------------------------------------------


def test_rating_round_trip_and_duplicate(svc):
    _, client = svc
    created = client.post(
        "/ratings",
        json={"summary_id": "run:tamoxifen", "rater": "r1", "scores": _scores(4)},
    )
    assert created.status_code == 201
    assert created.json()["rating_id"].startswith("rating-")

    dup = client.post(
        "/ratings",
        json={"summary_id": "run:tamoxifen", "rater": "r1", "scores": _scores(2)},
    )
    assert dup.status_code == 409
    assert dup.json()["code"] == "duplicate_rating"


@pytest.mark.parametrize(
    "scores",
    [
        {axis: 3 for axis in CLINICAL_AXES[:-1]},            # missing axis
        dict(_scores(3), extra=3),                            # unknown axis
        dict(_scores(3), relevance=6),                        # out of range
        dict(_scores(3), relevance=0),
    ],
)
def test_bad_rating_scores_are_400(svc, scores):
    _, client = svc
    response = client.post(
        "/ratings", json={"summary_id": "s", "rater": "r", "scores": scores}
    )
    assert response.status_code == 400
    assert response.json()["code"] == "validation_error"


def test_store_rejects_bool_and_float_scores(tmp_path):
    store = ServiceStore(tmp_path / "state")
    with pytest.raises(ValidationError):
        store.submit_rating("s", "r", dict(_scores(3), relevance=True))
    with pytest.raises(ValidationError):
        store.submit_rating("s", "r", dict(_scores(3), relevance=3.5))


def test_clinical_stats_aggregate_ratings(svc):
    _, client = svc
    client.post("/ratings", json={"summary_id": "s1", "rater": "r1",
                                  "scores": _scores(4)})
    client.post("/ratings", json={"summary_id": "s1", "rater": "r2",
                                  "scores": _scores(2)})
    stats = client.get("/stats/clinical").json()
    assert stats["overall"] == {"mean": 3.0, "count": 10}
    for axis in CLINICAL_AXES:
        assert stats["per_axis"][axis] == {"mean": 3.0, "count": 2}


def test_clinical_stats_empty(svc):
    _, client = svc
    stats = client.get("/stats/clinical").json()
    assert stats["overall"] == {"mean": None, "count": 0}
    assert all(v["count"] == 0 for v in stats["per_axis"].values())


def test_rating_sample_is_deterministic(svc):
    _, client = svc
    run_id = client.post("/runs", json={}).json()["run_id"]
    a = client.get("/ratings/sample", params={"fraction": 0.5, "seed": 3}).json()
    b = client.get("/ratings/sample", params={"fraction": 0.5, "seed": 3}).json()
    assert a == b
    assert a["run_id"] == run_id

    drugs = client.get("/drugs").json()["drugs"]
    expected_k = max(1, round(0.5 * len(drugs)))
    assert len(a["summary_ids"]) == expected_k
    for sid in a["summary_ids"]:
        prefix, _, drug = sid.partition(":")
        assert prefix == run_id
        assert drug in drugs


def test_rating_sample_fraction_validation(svc):
    _, client = svc
    client.post("/runs", json={})
    assert client.get("/ratings/sample", params={"fraction": 0}).status_code == 400
    assert client.get("/ratings/sample", params={"fraction": 1.5}).status_code == 400


# ---------------------------------------------------------------------------
# agreement statistics
# ---------------------------------------------------------------------------


def test_agreement_needs_finalized_overlap(svc):
    _, client = svc
    body = client.get("/stats/agreement").json()
    assert body["status"] == "insufficient_data"
    assert "reason" in body
    # one submission on an open task still is not enough
    _submit(client, "task-p1", "r1", "high")
    assert client.get("/stats/agreement").json()["status"] == "insufficient_data"


def test_perfect_agreement_means_kappa_one(svc):
    _, client = svc
    for task_id, severity in (("task-p1", "high"), ("task-p2", "mild")):
        for rater in ("r1", "r2", "r3"):
            _submit(client, task_id, rater, severity)
    stats = client.get("/stats/agreement").json()
    assert stats["status"] == "ok"
    assert stats["mean_kappa"] == 1.0
    assert stats["pair_count"] == 3
    assert stats["raters"] == ["r1", "r2", "r3"]
    assert all(v == 1.0 for v in stats["pairwise"].values())


def test_pairwise_kappa_matches_library_function(svc):
    # the endpoint must report exactly what the library computes over the
    # same label sequences; items are keyed by (post, drug, ade) in post
    # id order because every record shares one drug and one ADE text
    _, client = svc
    by_rater = {
        "r1": ["high", "high", "mild", "moderate"],
        "r2": ["high", "moderate", "mild", "moderate"],
        "r3": ["high", "high", "mild", "mild"],
    }
    for i, task_id in enumerate(("task-p1", "task-p2", "task-p3", "task-p4")):
        for rater in ("r1", "r2", "r3"):
            _submit(client, task_id, rater, by_rater[rater][i])

    stats = client.get("/stats/agreement").json()
    assert stats["status"] == "ok"
    expected = {
        "r1|r2": cohens_kappa(by_rater["r1"], by_rater["r2"]),
        "r1|r3": cohens_kappa(by_rater["r1"], by_rater["r3"]),
        "r2|r3": cohens_kappa(by_rater["r2"], by_rater["r3"]),
    }
    assert set(stats["pairwise"]) == set(expected)
    for pair, value in expected.items():
        assert abs(stats["pairwise"][pair] - value) < 1e-9
    assert abs(
        stats["mean_kappa"] - sum(expected.values()) / len(expected)
    ) < 1e-9
    # pinned by hand: agree=3, n=4, chance term 5 -> (12-5)/(16-5)
    assert stats["pairwise"]["r1|r2"] == pytest.approx(7 / 11, abs=1e-12)
    assert stats["pairwise"]["r1|r3"] == pytest.approx(3 / 5, abs=1e-12)
    assert stats["pairwise"]["r2|r3"] == pytest.approx(1 / 3, abs=1e-12)

    confusion = stats["confusion"]
    # high-high agreements across pairs: p1 contributes 3, p2 one (r1,r3)
    assert confusion["high"]["high"] == 4


def test_adjudicated_tasks_count_toward_agreement(svc):
    _, client = svc
    _three_way_split(client, "task-p1")
    stats = client.get("/stats/agreement").json()
    assert stats["status"] == "ok"
    assert stats["pair_count"] == 3


# ---------------------------------------------------------------------------
# durability
# ---------------------------------------------------------------------------


def test_restart_replays_event_log(svc):
    settings, client = svc
    _submit(client, "task-p1", "r1", "high")
    _submit(client, "task-p1", "r2", "high")
    _submit(client, "task-p1", "r3", "high")
    _three_way_split(client, "task-p2")
    client.post("/ratings", json={"summary_id": "s1", "rater": "r1",
                                  "scores": _scores(5)})

    before = {
        "p1": client.get("/annotation/task-p1").json(),
        "p2": client.get("/annotation/task-p2").json(),
        "agreement": client.get("/stats/agreement").json(),
        "clinical": client.get("/stats/clinical").json(),
        "queue": client.get("/annotation/adjudication").json(),
    }

    fresh = TestClient(create_app(settings))
    assert fresh.get("/annotation/task-p1").json() == before["p1"]
    assert fresh.get("/annotation/task-p2").json() == before["p2"]
    assert fresh.get("/stats/agreement").json() == before["agreement"]
    assert fresh.get("/stats/clinical").json() == before["clinical"]
    assert fresh.get("/annotation/adjudication").json() == before["queue"]
    assert fresh.get("/health").json() == client.get("/health").json()

    # replay restores the duplicate-rating guard too
    dup = fresh.post("/ratings", json={"summary_id": "s1", "rater": "r1",
                                       "scores": _scores(1)})
    assert dup.status_code == 409


def test_event_log_is_line_delimited_json(svc):
    settings, client = svc
    _submit(client, "task-p1", "r1", "high")
    log_path = settings.resolved_data_dir() / "events.jsonl"
    lines = log_path.read_text(encoding="utf-8").splitlines()
    assert len(lines) >= 13  # 12 created + 1 labels
    for line in lines:
        event = json.loads(line)
        assert "entity" in event and "type" in event


# ---------------------------------------------------------------------------
# store-level guards
# ---------------------------------------------------------------------------


def test_store_requires_two_raters(tmp_path):
    with pytest.raises(ValidationError):
        ServiceStore(tmp_path / "state", required_raters=1)


def test_store_rejects_record_for_wrong_post(tmp_path):
    from adesum.corpus import AnnotationRecord

    store = ServiceStore(tmp_path / "state")
    store.ensure_tasks(["p1"])
    record = AnnotationRecord(post_id="p2", annotator_id="r1", drugs=())
    with pytest.raises(ValidationError, match="does not match"):
        store.submit_labels("task-p1", "r1", record, expected_version=1)


def test_store_conflict_carries_machine_code(tmp_path):
    store = ServiceStore(tmp_path / "state")
    store.ensure_tasks(["p1"])
    from adesum.corpus import AnnotationRecord

    record = AnnotationRecord(post_id="p1", annotator_id="r1", drugs=())
    with pytest.raises(ConflictError) as exc_info:
        store.submit_labels("task-p1", "r1", record, expected_version=99)
    assert exc_info.value.code == "version_conflict"
