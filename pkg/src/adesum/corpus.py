"""Corpus data model: posts, annotations, splitting, and agreement stats.

Posts come from pre-scraped forum exports (JSONL or CSV).  Annotation
records hold per-annotator (drug, ADE, severity, adversity) labels;
`aggregate_annotations` resolves them by strict majority voting and
`cohens_kappa` measures inter-annotator agreement.
"""

from __future__ import annotations

import csv
import hashlib
import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from .errors import IngestError, ValidationError

ANON_TOKEN = "[USER]"

_TRAILING_PUNCT = re.compile(r"[\s\.,;:!\?]+$")
_WS_RUN = re.compile(r"\s+")


class Forum(str, Enum):
    CRU = "CRU"
    CSN = "CSN"
    OTHER = "Other"

    @classmethod
    def parse(cls, value: str | None) -> "Forum":
        if value is None:
            return cls.OTHER
        v = value.strip().lower()
        if v == "cru":
            return cls.CRU
        if v == "csn":
            return cls.CSN
        return cls.OTHER


class SeverityLabel(Enum):
    """ADE severity. Total order: High > Moderate > Mild > NotApplicable."""

    HIGH = "high"
    MODERATE = "moderate"
    MILD = "mild"
    NOT_APPLICABLE = "na"

    @property
    def rank(self) -> int:
        return _SEVERITY_RANK[self]

    def __lt__(self, other: "SeverityLabel") -> bool:
        return self.rank < other.rank

    def __le__(self, other: "SeverityLabel") -> bool:
        return self.rank <= other.rank

    def __gt__(self, other: "SeverityLabel") -> bool:
        return self.rank > other.rank

    def __ge__(self, other: "SeverityLabel") -> bool:
        return self.rank >= other.rank

    @classmethod
    def parse(cls, value: str) -> "SeverityLabel":
        v = value.strip().lower()
        aliases = {
            "high": cls.HIGH,
            "moderate": cls.MODERATE,
            "mild": cls.MILD,
            "low": cls.MILD,
            "na": cls.NOT_APPLICABLE,
            "not applicable": cls.NOT_APPLICABLE,
            "notapplicable": cls.NOT_APPLICABLE,
            "n/a": cls.NOT_APPLICABLE,
            "none": cls.NOT_APPLICABLE,
        }
        if v not in aliases:
            raise ValidationError(f"unknown severity label: {value!r}")
        return aliases[v]


_SEVERITY_RANK = {
    SeverityLabel.HIGH: 3,
    SeverityLabel.MODERATE: 2,
    SeverityLabel.MILD: 1,
    SeverityLabel.NOT_APPLICABLE: 0,
}

# Fixed external ordering: High -> Moderate -> Mild -> NA.
SEVERITY_ORDER = (
    SeverityLabel.HIGH,
    SeverityLabel.MODERATE,
    SeverityLabel.MILD,
    SeverityLabel.NOT_APPLICABLE,
)


def normalize_term(text: str) -> str:
    """Canonical form for drug names and ADE strings.

    Lowercase, trim, collapse internal whitespace, strip trailing
    punctuation.
    """
    out = _WS_RUN.sub(" ", text.strip().lower())
    return _TRAILING_PUNCT.sub("", out)


@dataclass(frozen=True)
class Post:
    id: str
    forum: Forum = Forum.OTHER
    thread_title: str = ""
    cancer_type: str | None = None
    timestamp: str = ""
    text: str = ""

    def __post_init__(self):
        if not self.id:
            raise ValidationError("post id must be non-empty")
        if not self.text.strip():
            raise ValidationError(f"post {self.id!r}: text empty after trim")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "forum": self.forum.value,
            "thread_title": self.thread_title,
            "cancer_type": self.cancer_type,
            "timestamp": self.timestamp,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Post":
        missing = [k for k in ("id", "text") if not str(d.get(k) or "").strip()]
        if missing:
            raise ValidationError(f"missing required field(s): {', '.join(missing)}")
        return cls(
            id=str(d["id"]),
            forum=Forum.parse(d.get("forum")),
            thread_title=str(d.get("thread_title") or ""),
            cancer_type=(str(d["cancer_type"]) if d.get("cancer_type") else None),
            timestamp=str(d.get("timestamp") or ""),
            text=str(d["text"]),
        )


class Corpus:
    """Ordered collection of posts with unique ids.

    Iteration order is insertion order; construction is single-writer,
    reads are safe to share.
    """

    def __init__(self, posts: list[Post] | None = None, provenance: str = ""):
        self._posts: dict[str, Post] = {}
        self.provenance = provenance
        for p in posts or []:
            self.add(p)

    def add(self, post: Post) -> None:
        if post.id in self._posts:
            raise IngestError(f"duplicate post id {post.id!r}")
        self._posts[post.id] = post

    def __len__(self) -> int:
        return len(self._posts)

    def __iter__(self):
        return iter(self._posts.values())

    def __contains__(self, post_id: str) -> bool:
        return post_id in self._posts

    def get(self, post_id: str) -> Post:
        return self._posts[post_id]

    @property
    def ids(self) -> list[str]:
        return list(self._posts.keys())

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for post in self:
                fh.write(json.dumps(post.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "Corpus":
        return ingest_posts(path, "jsonl")


def ingest_posts(path: str | Path, format: str = "jsonl") -> Corpus:
    """Load a pre-scraped post file into a Corpus.

    Rejects duplicate ids and malformed records; errors carry the
    offending line number.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"input file not found: {path}")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    corpus = Corpus(provenance=digest)

    if format == "jsonl":
        rows = _iter_jsonl(path)
    elif format == "csv":
        rows = _iter_csv(path)
    else:
        raise ValidationError(f"unknown ingest format: {format!r}")

    for line_no, record in rows:
        try:
            post = Post.from_dict(record)
        except ValidationError as exc:
            raise IngestError(str(exc), line=line_no) from exc
        if post.id in corpus:
            raise IngestError(f"duplicate post id {post.id!r}", line=line_no)
        corpus.add(post)
    return corpus


def _iter_jsonl(path: Path):
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"invalid JSON: {exc.msg}", line=line_no) from exc
            if not isinstance(record, dict):
                raise IngestError("record is not a JSON object", line=line_no)
            yield line_no, record


def _iter_csv(path: Path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        # header is line 1
        for line_no, record in enumerate(reader, start=2):
            yield line_no, {k: v for k, v in record.items() if k is not None}


def anonymize(post: Post, username_patterns: list[str]) -> Post:
    """Replace every username-pattern match in text fields with [USER].

    Idempotent as long as no pattern matches the replacement token
    itself.
    """
    compiled = []
    for pat in username_patterns:
        try:
            compiled.append(re.compile(pat))
        except re.error as exc:
            raise ValidationError(f"invalid pattern {pat!r}: {exc}") from exc

    def scrub(text: str) -> str:
        for rx in compiled:
            text = rx.sub(ANON_TOKEN, text)
        return text

    return replace(
        post,
        thread_title=scrub(post.thread_title),
        text=scrub(post.text),
        cancer_type=scrub(post.cancer_type) if post.cancer_type else post.cancer_type,
    )


@dataclass(frozen=True)
class SplitAssignment:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    seed: int

    def to_dict(self) -> dict:
        return {
            "train": list(self.train),
            "validation": list(self.validation),
            "test": list(self.test),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitAssignment":
        return cls(
            train=tuple(d["train"]),
            validation=tuple(d["validation"]),
            test=tuple(d["test"]),
            seed=int(d["seed"]),
        )


def _largest_remainder_sizes(n: int, ratios: tuple[float, float, float]) -> list[int]:
    quotas = [n * r for r in ratios]
    sizes = [int(q) for q in quotas]
    leftover = n - sum(sizes)
    # distribute by largest fractional remainder, ties to the earlier bucket
    order = sorted(range(3), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def split_corpus(
    corpus: Corpus, ratios: tuple[float, float, float], seed: int
) -> SplitAssignment:
    """Deterministic train/validation/test partition of post ids.

    Sizes follow the largest-remainder rule over the requested ratios;
    membership is a seeded shuffle of corpus order.
    """
    if len(ratios) != 3:
        raise ValidationError("exactly three split ratios required")
    if any(r < 0 for r in ratios):
        raise ValidationError("split ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"split ratios must sum to 1, got {sum(ratios)}")
    n = len(corpus)
    if n < 3 and all(r > 0 for r in ratios):
        raise ValidationError("corpus smaller than 3 posts cannot fill three splits")

    ids = corpus.ids
    rng = random.Random(seed)
    rng.shuffle(ids)
    n_train, n_val, n_test = _largest_remainder_sizes(n, tuple(ratios))
    assignment = SplitAssignment(
        train=tuple(ids[:n_train]),
        validation=tuple(ids[n_train : n_train + n_val]),
        test=tuple(ids[n_train + n_val :]),
        seed=seed,
    )
    _check_partition(assignment, corpus)
    return assignment


def _check_partition(assignment: SplitAssignment, corpus: Corpus) -> None:
    parts = [set(assignment.train), set(assignment.validation), set(assignment.test)]
    union = parts[0] | parts[1] | parts[2]
    total = len(parts[0]) + len(parts[1]) + len(parts[2])
    if union != set(corpus.ids) or total != len(corpus):
        raise ValidationError("split does not partition the corpus")


@dataclass(frozen=True)
class AdeLabel:
    text: str
    severity: SeverityLabel
    adversity: bool
    evidence_terms: tuple[str, ...] = ()

    def __post_init__(self):
        if self.adversity and not self.evidence_terms:
            raise ValidationError(
                f"ADE {self.text!r}: adversity=true requires evidence terms"
            )

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "severity": self.severity.value,
            "adversity": self.adversity,
            "evidence_terms": list(self.evidence_terms),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdeLabel":
        return cls(
            text=str(d["text"]),
            severity=SeverityLabel.parse(d["severity"]),
            adversity=bool(d["adversity"]),
            evidence_terms=tuple(d.get("evidence_terms") or ()),
        )


@dataclass(frozen=True)
class DrugAnnotation:
    name: str
    ades: tuple[AdeLabel, ...]

    def __post_init__(self):
        object.__setattr__(self, "name", normalize_term(self.name))

    def to_dict(self) -> dict:
        return {"name": self.name, "ades": [a.to_dict() for a in self.ades]}

    @classmethod
    def from_dict(cls, d: dict) -> "DrugAnnotation":
        return cls(
            name=str(d["name"]),
            ades=tuple(AdeLabel.from_dict(a) for a in d.get("ades") or ()),
        )


@dataclass(frozen=True)
class AnnotationRecord:
    post_id: str
    annotator_id: str
    drugs: tuple[DrugAnnotation, ...]

    def to_dict(self) -> dict:
        return {
            "post_id": self.post_id,
            "annotator_id": self.annotator_id,
            "drugs": [d.to_dict() for d in self.drugs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        return cls(
            post_id=str(d["post_id"]),
            annotator_id=str(d["annotator_id"]),
            drugs=tuple(DrugAnnotation.from_dict(x) for x in d.get("drugs") or ()),
        )


@dataclass(frozen=True)
class DisputedItem:
    drug: str
    ade_text: str
    severity_votes: dict
    adversity_votes: dict
    reason: str


def aggregate_annotations(
    records: list[AnnotationRecord],
) -> tuple[AnnotationRecord, list[DisputedItem]]:
    """Majority-vote aggregation of one post's annotation records.

    An item (drug, ADE) is final only when a strict majority of all
    annotators agrees on its severity and on its adversity; everything
    else lands in the unresolved list for adjudication.  Output is
    independent of annotator order.
    """
    if not records:
        raise ValidationError("no annotation records to aggregate")
    post_ids = {r.post_id for r in records}
    if len(post_ids) != 1:
        raise ValidationError(f"records span multiple posts: {sorted(post_ids)}")
    if len(records) < 2:
        raise ValidationError("aggregation requires at least two annotators")

    n = len(records)
    majority = n // 2 + 1

    # one vote per annotator per (drug, ade) key; first mention wins
    votes: dict[tuple[str, str], dict[str, AdeLabel]] = {}
    for rec in records:
        for drug in rec.drugs:
            for ade in drug.ades:
                key = (drug.name, normalize_term(ade.text))
                votes.setdefault(key, {}).setdefault(rec.annotator_id, ade)

    final_by_drug: dict[str, list[AdeLabel]] = {}
    unresolved: list[DisputedItem] = []
    for (drug, ade_text), by_annotator in sorted(votes.items()):
        sev_counts = Counter(label.severity for label in by_annotator.values())
        adv_counts = Counter(label.adversity for label in by_annotator.values())
        sev_winner = next(
            (s for s, c in sev_counts.items() if c >= majority), None
        )
        adv_winner = next(
            (a for a, c in adv_counts.items() if c >= majority), None
        )
        if sev_winner is None or adv_winner is None:
            reasons = []
            if sev_winner is None:
                reasons.append("severity")
            if adv_winner is None:
                reasons.append("adversity")
            unresolved.append(
                DisputedItem(
                    drug=drug,
                    ade_text=ade_text,
                    severity_votes={s.value: c for s, c in sorted(sev_counts.items(), key=lambda kv: kv[0].value)},
                    adversity_votes={str(a).lower(): c for a, c in sorted(adv_counts.items())},
                    reason="no strict majority on " + " and ".join(reasons),
                )
            )
            continue
        terms = sorted(
            {
                t
                for label in by_annotator.values()
                if label.adversity == adv_winner
                for t in label.evidence_terms
            }
        )
        final_by_drug.setdefault(drug, []).append(
            AdeLabel(
                text=ade_text,
                severity=sev_winner,
                adversity=adv_winner,
                evidence_terms=tuple(terms),
            )
        )

    final = AnnotationRecord(
        post_id=records[0].post_id,
        annotator_id="consensus",
        drugs=tuple(
            DrugAnnotation(name=drug, ades=tuple(sorted(ades, key=lambda a: a.text)))
            for drug, ades in sorted(final_by_drug.items())
        ),
    )
    return final, unresolved


def cohens_kappa(labels_a: list, labels_b: list) -> float:
    """Chance-corrected agreement between two label sequences.

    kappa = (p_o - p_e) / (1 - p_e), with p_e from the product of the
    raters' marginal label distributions.
    """
    if len(labels_a) != len(labels_b):
        raise ValidationError(
            f"label sequences differ in length: {len(labels_a)} vs {len(labels_b)}"
        )
    if not labels_a:
        raise ValidationError("cannot compute kappa on empty sequences")
    n = len(labels_a)
    agree = sum(1 for a, b in zip(labels_a, labels_b) if a == b)
    counts_a = Counter(labels_a)
    counts_b = Counter(labels_b)
    # keep everything integer until one final division so that exact
    # rationals (e.g. 750/1250) come out exactly
    expected = sum(
        counts_a[label] * counts_b[label]
        for label in counts_a.keys() & counts_b.keys()
    )
    if expected >= n * n:
        # both raters constant on the same label forces p_o == 1
        return 1.0
    return (agree * n - expected) / (n * n - expected)


def read_annotations_jsonl(path: str | Path) -> list[AnnotationRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(AnnotationRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValidationError) as exc:
                raise IngestError(f"bad annotation record: {exc}", line=line_no) from exc
    return records
