import json
import random
import re

import pytest

from adesum.corpus import (
    AdeLabel,
    AnnotationRecord,
    Corpus,
    DrugAnnotation,
    Forum,
    Post,
    SEVERITY_ORDER,
    SeverityLabel,
    SplitAssignment,
    aggregate_annotations,
    anonymize,
    cohens_kappa,
    ingest_posts,
    normalize_term,
    split_corpus,
)
from adesum.errors import IngestError, ValidationError

from conftest import make_corpus


# -- severity ---------------------------------------------------------------


def test_severity_total_order():
    assert SeverityLabel.HIGH > SeverityLabel.MODERATE > SeverityLabel.MILD
    assert SeverityLabel.MILD > SeverityLabel.NOT_APPLICABLE
    assert SEVERITY_ORDER == (
        SeverityLabel.HIGH,
        SeverityLabel.MODERATE,
        SeverityLabel.MILD,
        SeverityLabel.NOT_APPLICABLE,
    )


def test_severity_parse_aliases():
    assert SeverityLabel.parse("High") is SeverityLabel.HIGH
    assert SeverityLabel.parse(" moderate ") is SeverityLabel.MODERATE
    assert SeverityLabel.parse("low") is SeverityLabel.MILD
    for alias in ("na", "n/a", "none", "not applicable", "NA"):
        assert SeverityLabel.parse(alias) is SeverityLabel.NOT_APPLICABLE
    with pytest.raises(ValidationError):
        SeverityLabel.parse("catastrophic")


def test_severity_wire_values():
    assert [s.value for s in SEVERITY_ORDER] == ["high", "moderate", "mild", "na"]


def test_normalize_term():
    assert normalize_term("  Hot   Flashes!! ") == "hot flashes"
    assert normalize_term("nausea.") == "nausea"
    assert normalize_term("JOINT\tPAIN ;") == "joint pain"


# -- posts and corpus ---------------------------------------------------------


def test_post_requires_id_and_text():
    with pytest.raises(ValidationError):
        Post(id="", text="hello")
    with pytest.raises(ValidationError):
        Post(id="p1", text="   ")


def test_post_round_trip():
    post = Post(id="p1", forum=Forum.CSN, thread_title="t", cancer_type="breast",
                timestamp="2021-03-04", text="body")
    assert Post.from_dict(post.to_dict()) == post


def test_corpus_rejects_duplicate_ids():
    corpus = Corpus([Post(id="a", text="x")])
    with pytest.raises(IngestError):
        corpus.add(Post(id="a", text="y"))


def test_corpus_preserves_insertion_order(tmp_path):
    posts = [Post(id=f"p{i}", text=f"t{i}") for i in (3, 1, 2)]
    corpus = Corpus(posts)
    assert corpus.ids == ["p3", "p1", "p2"]
    path = tmp_path / "c.jsonl"
    corpus.write_jsonl(path)
    assert Corpus.read_jsonl(path).ids == ["p3", "p1", "p2"]


def test_ingest_jsonl_reports_line_numbers(tmp_path):
    path = tmp_path / "posts.jsonl"
    path.write_text(
        '{"id": "a", "text": "fine"}\n{"id": "b"}\n', encoding="utf-8"
    )
    with pytest.raises(IngestError) as err:
        ingest_posts(path)
    assert "line 2" in str(err.value)


def test_ingest_jsonl_rejects_bad_json(tmp_path):
    path = tmp_path / "posts.jsonl"
    path.write_text('{"id": "a", "text": "fine"}\nnot json\n', encoding="utf-8")
    with pytest.raises(IngestError) as err:
        ingest_posts(path)
    assert "line 2" in str(err.value)


def test_ingest_csv(tmp_path):
    path = tmp_path / "posts.csv"
    path.write_text(
        "id,forum,thread_title,cancer_type,timestamp,text\n"
        'a,CSN,thread,breast,2020-01-01,"hello, world"\n',
        encoding="utf-8",
    )
    corpus = ingest_posts(path, format="csv")
    assert corpus.get("a").text == "hello, world"
    assert corpus.get("a").forum is Forum.CSN


def test_ingest_csv_missing_text_names_line(tmp_path):
    path = tmp_path / "posts.csv"
    path.write_text("id,text\na,ok\nb,\n", encoding="utf-8")
    with pytest.raises(IngestError) as err:
        ingest_posts(path, format="csv")
    assert "line 3" in str(err.value)


def test_ingest_unknown_format(tmp_path):
    path = tmp_path / "posts.xml"
    path.write_text("<posts/>", encoding="utf-8")
    with pytest.raises(ValidationError):
        ingest_posts(path, format="xml")


# -- anonymization -------------------------------------------------------------


def test_anonymize_matches_re_sub_oracle():
    patterns = [r"@\w+", r"\buser\d+\b"]
    post = Post(
        id="p",
        thread_title="user123 asked",
        text="Thanks @mary_b and user42! See user9's post. email me",
    )
    scrubbed = anonymize(post, patterns)
    expected_text = post.text
    expected_title = post.thread_title
    for pat in patterns:
        expected_text = re.sub(pat, "[USER]", expected_text)
        expected_title = re.sub(pat, "[USER]", expected_title)
    assert scrubbed.text == expected_text
    assert scrubbed.thread_title == expected_title
    assert "[USER]" in scrubbed.text
    assert scrubbed.id == post.id


def test_anonymize_invalid_pattern():
    post = Post(id="p", text="body")
    with pytest.raises(ValidationError):
        anonymize(post, ["(unclosed"])


def test_anonymize_no_match_is_identity():
    post = Post(id="p", text="nothing to scrub here")
    assert anonymize(post, [r"@\w+"]).text == post.text


# -- splitting -----------------------------------------------------------------


def test_split_80_5_15_on_100_posts():
    corpus = make_corpus(100)
    a = split_corpus(corpus, (0.80, 0.05, 0.15), seed=42)
    assert (len(a.train), len(a.validation), len(a.test)) == (80, 5, 15)
    b = split_corpus(corpus, (0.80, 0.05, 0.15), seed=42)
    assert a == b  # identical membership, not just sizes


def test_split_partitions_without_loss():
    corpus = make_corpus(53, seed=3)
    a = split_corpus(corpus, (0.6, 0.2, 0.2), seed=0)
    ids = set(a.train) | set(a.validation) | set(a.test)
    assert ids == set(corpus.ids)
    assert len(a.train) + len(a.validation) + len(a.test) == 53


def test_split_largest_remainder_against_enumeration():
    # oracle: sizes must sum to n and each differ from the exact quota
    # by less than 1
    rng = random.Random(5)
    for _ in range(200):
        n = rng.randint(3, 400)
        cuts = sorted(rng.random() for _ in range(2))
        ratios = (cuts[0], cuts[1] - cuts[0], 1.0 - cuts[1])
        if any(r <= 0 for r in ratios):
            continue
        corpus = Corpus([Post(id=f"p{i}", text="t") for i in range(n)])
        a = split_corpus(corpus, ratios, seed=1)
        sizes = (len(a.train), len(a.validation), len(a.test))
        assert sum(sizes) == n
        for size, ratio in zip(sizes, ratios):
            assert abs(size - n * ratio) < 1.0


def test_split_seed_changes_membership():
    corpus = make_corpus(40)
    a = split_corpus(corpus, (0.5, 0.25, 0.25), seed=1)
    b = split_corpus(corpus, (0.5, 0.25, 0.25), seed=2)
    assert a != b


def test_split_allows_zero_ratio():
    corpus = Corpus([Post(id="a", text="x"), Post(id="b", text="y")])
    a = split_corpus(corpus, (1.0, 0.0, 0.0), seed=0)
    assert len(a.train) == 2 and not a.validation and not a.test


def test_split_rejects_tiny_corpus_with_three_positive_ratios():
    corpus = Corpus([Post(id="a", text="x"), Post(id="b", text="y")])
    with pytest.raises(ValidationError):
        split_corpus(corpus, (0.5, 0.25, 0.25), seed=0)


def test_split_validates_ratios():
    corpus = make_corpus(10)
    with pytest.raises(ValidationError):
        split_corpus(corpus, (0.5, 0.5), seed=0)
    with pytest.raises(ValidationError):
        split_corpus(corpus, (0.5, 0.6, -0.1), seed=0)
    with pytest.raises(ValidationError):
        split_corpus(corpus, (0.5, 0.3, 0.3), seed=0)


def test_split_round_trip():
    corpus = make_corpus(10)
    a = split_corpus(corpus, (0.4, 0.3, 0.3), seed=9)
    assert SplitAssignment.from_dict(a.to_dict()) == a


# -- annotation aggregation -----------------------------------------------------


def _record(annotator, post="p1", drug="tamoxifen", ade="nausea",
            severity=SeverityLabel.MILD, adversity=False, evidence=()):
    return AnnotationRecord(
        post_id=post,
        annotator_id=annotator,
        drugs=(
            DrugAnnotation(
                name=drug,
                ades=(
                    AdeLabel(
                        text=ade,
                        severity=severity,
                        adversity=adversity,
                        evidence_terms=tuple(evidence),
                    ),
                ),
            ),
        ),
    )


def test_adversity_requires_evidence():
    with pytest.raises(ValidationError):
        AdeLabel(text="nausea", severity=SeverityLabel.MILD, adversity=True)


def test_aggregate_unanimous():
    records = [_record(a) for a in ("r1", "r2", "r3")]
    final, unresolved = aggregate_annotations(records)
    assert not unresolved
    assert final.annotator_id == "consensus"
    assert final.drugs[0].ades[0].severity is SeverityLabel.MILD


def test_aggregate_majority_two_of_three():
    records = [
        _record("r1", severity=SeverityLabel.HIGH),
        _record("r2", severity=SeverityLabel.HIGH),
        _record("r3", severity=SeverityLabel.MILD),
    ]
    final, unresolved = aggregate_annotations(records)
    assert not unresolved
    assert final.drugs[0].ades[0].severity is SeverityLabel.HIGH


def test_aggregate_three_way_split_goes_to_adjudication():
    records = [
        _record("r1", severity=SeverityLabel.HIGH),
        _record("r2", severity=SeverityLabel.MODERATE),
        _record("r3", severity=SeverityLabel.MILD),
    ]
    final, unresolved = aggregate_annotations(records)
    assert not final.drugs
    assert len(unresolved) == 1
    assert "severity" in unresolved[0].reason


def test_aggregate_severity_and_adversity_vote_independently():
    # severity agrees 3-0 but adversity splits 1-1-... with n=3 a 2/3
    # majority exists; craft a 2-2 split with 4 annotators instead
    records = [
        _record("r1", adversity=True, evidence=["awful"]),
        _record("r2", adversity=True, evidence=["bad"]),
        _record("r3", adversity=False),
        _record("r4", adversity=False),
    ]
    final, unresolved = aggregate_annotations(records)
    assert not final.drugs
    assert len(unresolved) == 1
    assert "adversity" in unresolved[0].reason
    assert unresolved[0].severity_votes == {"mild": 4}


def test_aggregate_requires_majority_of_all_annotators():
    # 2 of 5 label the item at all: even unanimous among labelers it
    # cannot reach the strict majority of 3
    records = [
        _record("r1", severity=SeverityLabel.HIGH),
        _record("r2", severity=SeverityLabel.HIGH),
        _record("r3", drug="letrozole"),
        _record("r4", drug="letrozole"),
        _record("r5", drug="letrozole"),
    ]
    final, unresolved = aggregate_annotations(records)
    drugs = {d.name for d in final.drugs}
    assert "letrozole" in drugs
    assert all(u.drug == "tamoxifen" for u in unresolved)


def test_aggregate_first_mention_per_annotator_wins():
    dup = AnnotationRecord(
        post_id="p1",
        annotator_id="r1",
        drugs=(
            DrugAnnotation(
                name="tamoxifen",
                ades=(
                    AdeLabel(text="nausea", severity=SeverityLabel.HIGH,
                             adversity=False),
                    AdeLabel(text="Nausea", severity=SeverityLabel.MILD,
                             adversity=False),
                ),
            ),
        ),
    )
    records = [dup, _record("r2", severity=SeverityLabel.HIGH),
               _record("r3", severity=SeverityLabel.HIGH)]
    final, unresolved = aggregate_annotations(records)
    assert not unresolved
    assert final.drugs[0].ades[0].severity is SeverityLabel.HIGH


def test_aggregate_is_order_invariant():
    records = [
        _record("r1", severity=SeverityLabel.HIGH, adversity=True, evidence=["bad"]),
        _record("r2", severity=SeverityLabel.HIGH, adversity=True, evidence=["worse"]),
        _record("r3", severity=SeverityLabel.MILD),
    ]
    base = aggregate_annotations(records)
    for perm in ([1, 0, 2], [2, 1, 0], [2, 0, 1]):
        shuffled = [records[i] for i in perm]
        assert aggregate_annotations(shuffled) == base


def test_aggregate_unions_evidence_from_agreeing_records():
    records = [
        _record("r1", adversity=True, evidence=["bad", "awful"]),
        _record("r2", adversity=True, evidence=["worse"]),
        _record("r3", adversity=False),
    ]
    final, _ = aggregate_annotations(records)
    assert final.drugs[0].ades[0].evidence_terms == ("awful", "bad", "worse")


def test_aggregate_rejects_mixed_posts_and_single_annotator():
    with pytest.raises(ValidationError):
        aggregate_annotations([_record("r1"), _record("r2", post="p2")])
    with pytest.raises(ValidationError):
        aggregate_annotations([_record("r1")])
    with pytest.raises(ValidationError):
        aggregate_annotations([])


def test_annotation_record_round_trip():
    rec = _record("r1", adversity=True, evidence=["bad"])
    assert AnnotationRecord.from_dict(rec.to_dict()) == rec


# -- kappa ----------------------------------------------------------------------


def test_kappa_hand_computed_2x2():
    # 20 agreements on each label, 5 disagreements each way:
    # p_o = 0.8, p_e = 0.5, kappa = 0.6 exactly
    a = ["x"] * 20 + ["x"] * 5 + ["y"] * 5 + ["y"] * 20
    b = ["x"] * 20 + ["y"] * 5 + ["x"] * 5 + ["y"] * 20
    assert cohens_kappa(a, b) == 0.6


def test_kappa_perfect_agreement():
    labels = ["h", "m", "l", "h", "h"]
    assert cohens_kappa(labels, labels) == 1.0


def test_kappa_constant_raters():
    assert cohens_kappa(["x"] * 10, ["x"] * 10) == 1.0


def test_kappa_validates_input():
    with pytest.raises(ValidationError):
        cohens_kappa(["a"], ["a", "b"])
    with pytest.raises(ValidationError):
        cohens_kappa([], [])


def test_kappa_matches_sklearn_on_random_sequences():
    from sklearn.metrics import cohen_kappa_score

    rng = random.Random(17)
    for _ in range(50):
        n = rng.randint(5, 60)
        a = [rng.choice("hml") for _ in range(n)]
        b = [rng.choice("hml") for _ in range(n)]
        if len(set(a)) == 1 and a == b:
            continue  # sklearn returns nan for degenerate constant case
        expected = cohen_kappa_score(a, b)
        assert cohens_kappa(a, b) == pytest.approx(expected, abs=1e-12)


def test_kappa_frozen_agreement_fixture():
    # 40-item two-rater fixture with kappa 721/961, inside 0.75 +/- 0.02
    a = list("lhhhhhlllllllmhhlhmmlhllhhmhhlhhhlmllhll")
    b = list("lmhhhhllhllllhhhlhmllhllmlmhhlhhhlmllhll")
    k = cohens_kappa(a, b)
    assert k == pytest.approx(721 / 961, abs=1e-12)
    assert abs(k - 0.75) <= 0.02
