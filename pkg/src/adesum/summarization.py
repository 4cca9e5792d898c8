"""Severity-ordered drug summaries plus reference attention numerics.

Production summaries come from a backend (deterministic template by
default, HTTP model backend optional).  The encoder/decoder attention
math is implemented as small, testable matrix operations so the
sequence-model contract can be verified numerically without hosting
any weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import SEVERITY_ORDER, SeverityLabel
from .errors import ValidationError

SEVERITY_PHRASE = {
    SeverityLabel.HIGH: "High",
    SeverityLabel.MODERATE: "Moderate",
    SeverityLabel.MILD: "Mild",
    SeverityLabel.NOT_APPLICABLE: "Unclassified",
}


# ---------------------------------------------------------------------------
# attention reference numerics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionWeights:
    """Per-head query/key/value projection matrices (d_model x d_k)."""

    W_Q: tuple[np.ndarray, ...]
    W_K: tuple[np.ndarray, ...]
    W_V: tuple[np.ndarray, ...]

    def __post_init__(self):
        wq = tuple(np.asarray(w, dtype=float) for w in self.W_Q)
        wk = tuple(np.asarray(w, dtype=float) for w in self.W_K)
        wv = tuple(np.asarray(w, dtype=float) for w in self.W_V)
        object.__setattr__(self, "W_Q", wq)
        object.__setattr__(self, "W_K", wk)
        object.__setattr__(self, "W_V", wv)
        if not (len(wq) == len(wk) == len(wv)) or not wq:
            raise ValidationError("need the same non-zero number of matrices per role")
        shapes = {w.shape for w in wq + wk + wv}
        if len(shapes) != 1:
            raise ValidationError(f"head matrices disagree in shape: {sorted(shapes)}")

    @property
    def head_count(self) -> int:
        return len(self.W_Q)

    @property
    def d_model(self) -> int:
        return self.W_Q[0].shape[0]


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    # subtract the row max before exponentiation for stability
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-1, keepdims=True)


def scaled_dot_attention(Q, K, V) -> np.ndarray:
    """softmax(Q K^T / sqrt(d_k)) V with row-wise softmax."""
    Q = np.asarray(Q, dtype=float)
    K = np.asarray(K, dtype=float)
    V = np.asarray(V, dtype=float)
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValidationError("Q, K, V must be 2-D matrices")
    if Q.shape[1] != K.shape[1]:
        raise ValidationError(
            f"Q and K must share the key dimension: {Q.shape} vs {K.shape}"
        )
    if K.shape[0] != V.shape[0]:
        raise ValidationError(
            f"K and V must share the row count: {K.shape} vs {V.shape}"
        )
    d_k = Q.shape[1]
    weights = _row_softmax(Q @ K.T / np.sqrt(d_k))
    return weights @ V


def encode(X, weights: AttentionWeights, positional) -> np.ndarray:
    """Sum of per-head self-attention on X plus the positional term."""
    X = np.asarray(X, dtype=float)
    positional = np.asarray(positional, dtype=float)
    if X.shape != positional.shape:
        raise ValidationError(
            f"positional shape {positional.shape} must equal input shape {X.shape}"
        )
    if X.shape[1] != weights.d_model:
        raise ValidationError(
            f"input dim {X.shape[1]} does not match weights d_model {weights.d_model}"
        )
    out = np.zeros_like(X)
    for wq, wk, wv in zip(weights.W_Q, weights.W_K, weights.W_V):
        head = scaled_dot_attention(X @ wq, X @ wk, X @ wv)
        if head.shape != X.shape:
            raise ValidationError(
                f"head output shape {head.shape} cannot be added to positional "
                f"{positional.shape}; use square projections"
            )
        out += head
    return out + positional


def decode_step(Z, prefix, weights: AttentionWeights, vocab_projection) -> np.ndarray:
    """One decoding step: cross-attend the prefix to Z, project, softmax.

    Queries come from the generated prefix, keys and values from the
    encoder output; the final prefix position's attention output is
    projected to the vocabulary and normalized.
    """
    Z = np.asarray(Z, dtype=float)
    prefix = np.asarray(prefix, dtype=float)
    vocab_projection = np.asarray(vocab_projection, dtype=float)
    if prefix.ndim != 2 or prefix.shape[0] == 0:
        raise ValidationError("prefix must be a non-empty 2-D matrix")
    if Z.shape[1] != weights.d_model or prefix.shape[1] != weights.d_model:
        raise ValidationError("Z and prefix must match the weights' d_model")
    d_k = weights.W_Q[0].shape[1]
    if vocab_projection.shape[0] != d_k:
        raise ValidationError(
            f"vocab projection rows {vocab_projection.shape[0]} must equal d_k {d_k}"
        )
    summed = np.zeros((prefix.shape[0], d_k))
    for wq, wk, wv in zip(weights.W_Q, weights.W_K, weights.W_V):
        summed += scaled_dot_attention(prefix @ wq, Z @ wk, Z @ wv)
    logits = summed[-1] @ vocab_projection
    return _row_softmax(logits[None, :])[0]


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DrugSummary:
    drug: str
    text: str
    severity_order_trace: tuple[tuple[SeverityLabel, str], ...]
    backend_id: str
    order_violations: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "drug": self.drug,
            "text": self.text,
            "severity_order_trace": [
                [sev.value, rep] for sev, rep in self.severity_order_trace
            ],
            "backend_id": self.backend_id,
            "order_violations": list(self.order_violations),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DrugSummary":
        return cls(
            drug=str(d["drug"]),
            text=str(d["text"]),
            severity_order_trace=tuple(
                (SeverityLabel.parse(sev), rep)
                for sev, rep in d.get("severity_order_trace") or ()
            ),
            backend_id=str(d.get("backend_id", "")),
            order_violations=tuple(d.get("order_violations") or ()),
        )


def audit_severity_order(trace) -> list[str]:
    """Violations of the gold ordering protocol in an emitted trace.

    Severity must be non-increasing; within one severity the
    representatives must be alphabetical.
    """
    violations = []
    for pos in range(1, len(trace)):
        prev_sev, prev_rep = trace[pos - 1]
        sev, rep = trace[pos]
        if sev.rank > prev_sev.rank:
            violations.append(
                f"position {pos}: severity rises from {prev_sev.value} to {sev.value}"
            )
        elif sev.rank == prev_sev.rank and rep < prev_rep:
            violations.append(
                f"position {pos}: {rep!r} breaks alphabetical order after {prev_rep!r}"
            )
    return violations


def _entry_representatives(entry) -> dict[SeverityLabel, list[str]]:
    return {
        sev: sorted(c.representative for c in clusters)
        for sev, clusters in entry.items()
        if clusters
    }


def template_summarize(drug: str, entry) -> DrugSummary:
    """Deterministic summary straight off the grid entry.

    One sentence per severity present, most severe first,
    representatives alphabetical inside each sentence.
    """
    if not entry or not any(entry.values()):
        raise ValidationError(f"empty grid entry for drug {drug!r}")
    reps = _entry_representatives(entry)
    sentences = [f"DRUG: {drug}."]
    trace = []
    for sev in SEVERITY_ORDER:
        if sev not in reps:
            continue
        listed = reps[sev]
        sentences.append(f"{SEVERITY_PHRASE[sev]} severity: {', '.join(listed)}.")
        trace.extend((sev, rep) for rep in listed)
    return DrugSummary(
        drug=drug,
        text=" ".join(sentences),
        severity_order_trace=tuple(trace),
        backend_id="template",
    )


class TemplateSummarizer:
    backend_id = "template"

    def summarize(self, drug: str, entry) -> DrugSummary:
        return template_summarize(drug, entry)


def recover_trace(text: str, entry) -> tuple[tuple[SeverityLabel, str], ...]:
    """Scan generated text for known representatives, in emitted order."""
    lowered = text.lower()
    hits = []
    for sev, listed in _entry_representatives(entry).items():
        for rep in listed:
            pos = lowered.find(rep.lower())
            if pos >= 0:
                hits.append((pos, sev, rep))
    hits.sort(key=lambda h: (h[0], h[2]))
    return tuple((sev, rep) for _, sev, rep in hits)


def model_summarize(drug: str, entry, backend) -> DrugSummary:
    """Summarize through a model backend and audit the emitted ordering.

    Ordering violations are recorded on the summary, never rewritten:
    evaluation has to see the backend's real behavior.
    """
    text = backend.generate(drug, serialize_entry(entry))
    if not text or not text.strip():
        raise ValidationError(f"summarizer backend returned empty text for {drug!r}")
    trace = recover_trace(text, entry)
    return DrugSummary(
        drug=drug,
        text=text,
        severity_order_trace=trace,
        backend_id=backend.backend_id,
        order_violations=tuple(audit_severity_order(trace)),
    )


def serialize_entry(entry) -> dict:
    """Grid entry as the wire payload sent to summarizer backends."""
    return {
        sev.value: [c.to_dict() for c in entry[sev]]
        for sev in SEVERITY_ORDER
        if sev in entry and entry[sev]
    }


def write_summaries_jsonl(summaries, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in summaries:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def read_summaries_jsonl(path: str | Path) -> list[DrugSummary]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(DrugSummary.from_dict(json.loads(line)))
    return out
