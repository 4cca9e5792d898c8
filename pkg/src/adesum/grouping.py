"""Drug grouping: embed ADE mentions and cluster them per (drug, severity).

Clustering is agglomerative on cosine distance with a configurable
linkage and stopping threshold.  Ties merge the pair with the smallest
(min-index, max-index) so partitions do not depend on input order.
The result is a per-drug grid of ADE clusters keyed by severity.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import SEVERITY_ORDER, SeverityLabel
from .errors import ValidationError

LINKAGES = ("single", "average", "complete")

DEFAULT_LINKAGE = "average"
DEFAULT_THRESHOLD = 0.4

_HASH_KEY = b"ade-trigram-hash-v1"


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    provider_id: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 1:
            raise ValidationError("embedding must be a 1-D vector")
        if not np.all(np.isfinite(values)):
            raise ValidationError("embedding contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def _trigrams(text: str) -> list[str]:
    t = text.lower()
    if len(t) < 3:
        return [t]
    return [t[i : i + 3] for i in range(len(t) - 2)]


def hashing_embed(text: str, dim: int) -> EmbeddingVector:
    """Deterministic offline embedding: hashed character-trigram counts.

    Buckets come from a keyed blake2b hash, so vectors are a pure
    function of (text, dim) across processes and platforms.  Non-empty
    text yields a unit-norm vector.
    """
    if dim < 8:
        raise ValidationError("hashing embedding dim must be >= 8")
    counts = np.zeros(dim, dtype=float)
    for gram in _trigrams(text):
        h = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=_HASH_KEY)
        bucket = int.from_bytes(h.digest(), "big") % dim
        counts[bucket] += 1.0
    norm = np.linalg.norm(counts)
    if norm > 0:
        counts /= norm
    return EmbeddingVector(values=counts, provider_id=f"hashing-{dim}")


class HashingProvider:
    """Embedding provider backed by hashing_embed. No I/O, no state."""

    def __init__(self, dim: int = 64):
        if dim < 8:
            raise ValidationError("hashing embedding dim must be >= 8")
        self.dim = dim
        self.provider_id = f"hashing-{dim}"

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        return [hashing_embed(t, self.dim).values for t in texts]


def embed_texts(texts: list[str], provider) -> list[EmbeddingVector]:
    """Embed a batch, one vector per text in order.

    Duplicate strings are embedded once and share the same vector, so
    identity holds even for providers with nondeterministic transports.
    """
    if any(not t for t in texts):
        raise ValidationError("texts must be non-empty strings")
    if not texts:
        return []
    unique = list(dict.fromkeys(texts))
    raw = provider.embed(unique)
    if len(raw) != len(unique):
        raise ValidationError(
            f"provider returned {len(raw)} vectors for {len(unique)} texts"
        )
    by_text = {}
    dim = None
    for text, values in zip(unique, raw):
        vec = EmbeddingVector(values=values, provider_id=provider.provider_id)
        if dim is None:
            dim = vec.dim
        elif vec.dim != dim:
            raise ValidationError(
                f"inconsistent embedding dims in batch: {dim} vs {vec.dim}"
            )
        by_text[text] = vec
    return [by_text[t] for t in texts]


def _as_matrix(vectors) -> np.ndarray:
    rows = [
        v.values if isinstance(v, EmbeddingVector) else np.asarray(v, dtype=float)
        for v in vectors
    ]
    dims = {r.shape for r in rows}
    if len(dims) > 1:
        raise ValidationError(f"inconsistent vector dims: {sorted(dims)}")
    return np.vstack(rows)


def cosine_distance_matrix(vectors) -> np.ndarray:
    m = _as_matrix(vectors)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = m / norms
    sims = unit @ unit.T
    dist = 1.0 - sims
    if np.isnan(dist).any():
        raise ValidationError("NaN distance (zero-norm or invalid vector)")
    return np.clip(dist, 0.0, 2.0)


def hierarchical_cluster(
    vectors, linkage: str = DEFAULT_LINKAGE, distance_threshold: float = DEFAULT_THRESHOLD
) -> list[frozenset[int]]:
    """Agglomerative clustering on cosine distance.

    Merges greedily while the minimum inter-cluster linkage distance is
    within the threshold; stops as soon as it exceeds it.  Returns the
    partition as index sets ordered by smallest member.
    """
    if linkage not in LINKAGES:
        raise ValidationError(f"linkage must be one of {LINKAGES}, got {linkage!r}")
    if not 0.0 <= distance_threshold <= 2.0:
        raise ValidationError("distance_threshold must lie in [0, 2]")
    n = len(vectors)
    if n == 0:
        raise ValidationError("need at least one vector")
    if n == 1:
        return [frozenset({0})]

    D = cosine_distance_matrix(vectors)
    np.fill_diagonal(D, np.inf)

    active = np.ones(n, dtype=bool)
    sizes = np.ones(n, dtype=float)
    members: list[set[int]] = [{i} for i in range(n)]
    reps = np.arange(n)  # smallest original index per cluster slot

    while active.sum() > 1:
        sub = D[np.ix_(active, active)]
        current = np.flatnonzero(active)
        min_dist = sub.min()
        if min_dist > distance_threshold:
            break
        # deterministic tie-break: smallest (min rep, max rep) pair
        rows, cols = np.nonzero(sub == min_dist)
        best = None
        for r, c in zip(rows, cols):
            if r >= c:
                continue
            i, j = current[r], current[c]
            key = (min(reps[i], reps[j]), max(reps[i], reps[j]))
            if best is None or key < best[0]:
                best = (key, i, j)
        _, i, j = best

        # Lance-Williams update of row/col i; slot j retired
        others = active.copy()
        others[i] = others[j] = False
        di, dj = D[i, others], D[j, others]
        if linkage == "single":
            merged = np.minimum(di, dj)
        elif linkage == "complete":
            merged = np.maximum(di, dj)
        else:
            merged = (sizes[i] * di + sizes[j] * dj) / (sizes[i] + sizes[j])
        D[i, others] = merged
        D[others, i] = merged
        sizes[i] += sizes[j]
        members[i] |= members[j]
        reps[i] = min(reps[i], reps[j])
        active[j] = False
        D[j, :] = np.inf
        D[:, j] = np.inf
        D[i, i] = np.inf

    partition = [frozenset(members[i]) for i in np.flatnonzero(active)]
    partition.sort(key=min)
    return partition


@dataclass(frozen=True)
class ClusterMember:
    ade_text: str
    post_id: str

    def to_dict(self) -> dict:
        return {"ade_text": self.ade_text, "post_id": self.post_id}


@dataclass(frozen=True)
class AdeCluster:
    representative: str
    members: tuple[ClusterMember, ...]

    def to_dict(self) -> dict:
        return {
            "representative": self.representative,
            "members": [m.to_dict() for m in self.members],
        }


class DrugGroupGrid:
    """Per-drug, per-severity clusters of ADE mentions.

    Every input mention lands in exactly one cluster; mentions of
    different severity never share one.
    """

    def __init__(self, linkage: str, threshold: float, provider_id: str):
        self.linkage = linkage
        self.threshold = threshold
        self.provider_id = provider_id
        self.entries: dict[str, dict[SeverityLabel, list[AdeCluster]]] = {}

    def drugs(self) -> list[str]:
        return sorted(self.entries.keys())

    def entry(self, drug: str) -> dict[SeverityLabel, list[AdeCluster]]:
        return self.entries[drug]

    def all_members(self) -> list[tuple[str, SeverityLabel, str, str]]:
        out = []
        for drug, by_sev in self.entries.items():
            for severity, clusters in by_sev.items():
                for cluster in clusters:
                    for m in cluster.members:
                        out.append((drug, severity, m.ade_text, m.post_id))
        return out

    def to_dict(self) -> dict:
        # key order is part of the wire format: drugs sorted, severities
        # High -> Moderate -> Mild -> NA
        entries = {}
        for drug in self.drugs():
            by_sev = self.entries[drug]
            entries[drug] = {
                sev.value: [c.to_dict() for c in by_sev[sev]]
                for sev in SEVERITY_ORDER
                if sev in by_sev and by_sev[sev]
            }
        return {
            "linkage": self.linkage,
            "threshold": self.threshold,
            "provider_id": self.provider_id,
            "entries": entries,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "DrugGroupGrid":
        grid = cls(
            linkage=d.get("linkage", DEFAULT_LINKAGE),
            threshold=float(d.get("threshold", DEFAULT_THRESHOLD)),
            provider_id=d.get("provider_id", ""),
        )
        for drug, by_sev in d.get("entries", {}).items():
            grid.entries[drug] = {}
            for sev_key, clusters in by_sev.items():
                severity = SeverityLabel.parse(sev_key)
                grid.entries[drug][severity] = [
                    AdeCluster(
                        representative=c["representative"],
                        members=tuple(
                            ClusterMember(m["ade_text"], m["post_id"])
                            for m in c["members"]
                        ),
                    )
                    for c in clusters
                ]
        return grid

    @classmethod
    def read_json(cls, path: str | Path) -> "DrugGroupGrid":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_grid(
    records,
    provider,
    linkage: str = DEFAULT_LINKAGE,
    threshold: float = DEFAULT_THRESHOLD,
) -> DrugGroupGrid:
    """Assemble the drug grouping grid from extraction records.

    Items bucket by drug then severity; ADE texts inside a bucket are
    clustered on their embeddings.  The cluster representative is the
    lexicographically smallest member text.
    """
    buckets: dict[tuple[str, SeverityLabel], list[ClusterMember]] = {}
    for record in records:
        for item in record.items:
            buckets.setdefault((item.drug, item.severity), []).append(
                ClusterMember(ade_text=item.ade_text, post_id=record.post_id)
            )

    grid = DrugGroupGrid(
        linkage=linkage, threshold=threshold, provider_id=provider.provider_id
    )
    for (drug, severity), mentions in sorted(
        buckets.items(), key=lambda kv: (kv[0][0], -kv[0][1].rank)
    ):
        # cluster unique texts; identical texts always co-cluster anyway
        texts = sorted({m.ade_text for m in mentions})
        vectors = embed_texts(texts, provider)
        partition = hierarchical_cluster(vectors, linkage, threshold)
        clusters = []
        for index_set in partition:
            cluster_texts = {texts[i] for i in index_set}
            cluster_members = sorted(
                (m for m in mentions if m.ade_text in cluster_texts),
                key=lambda m: (m.ade_text, m.post_id),
            )
            clusters.append(
                AdeCluster(
                    representative=min(cluster_texts),
                    members=tuple(cluster_members),
                )
            )
        clusters.sort(key=lambda c: c.representative)
        grid.entries.setdefault(drug, {})[severity] = clusters
    return grid


def verify_grid_coverage(grid: DrugGroupGrid, records) -> None:
    """Check cluster coverage and disjointness against the source items.

    The multiset of grid members must equal the multiset of record
    items; raises on any gap, duplicate, or severity mix-up.
    """
    from collections import Counter

    want = Counter(
        (item.drug, item.severity, item.ade_text, record.post_id)
        for record in records
        for item in record.items
    )
    got = Counter(grid.all_members())
    if want != got:
        missing = want - got
        extra = got - want
        raise ValidationError(
            f"grid coverage mismatch: missing={dict(missing)} extra={dict(extra)}"
        )
