"""Text-overlap metrics, severity classification scores, and fact checks.

Every metric is implemented natively so scores are reproducible from
this package alone.  Conventions that the literature leaves open
(tokenization, padding, smoothing) are fixed here and recorded in each
report's parameters block.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import SeverityLabel, normalize_term
from .errors import ValidationError

_TOKEN = re.compile(r"[a-z0-9]+")

CLINICAL_AXES = ("relevance", "consistency", "fluency", "coherence", "hallucination")


def tokenize(text: str) -> list[str]:
    """Lowercase tokens split on non-alphanumeric runs."""
    return _TOKEN.findall(text.lower())


# ---------------------------------------------------------------------------
# string similarity
# ---------------------------------------------------------------------------


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def hamming_distance(a: str, b: str) -> int:
    """Positional mismatches, shorter string padded with a sentinel."""
    dist = 0
    for x, y in zip(a, b):
        if x != y:
            dist += 1
    return dist + abs(len(a) - len(b))


def _longest_match(a, alo, ahi, b, blo, bhi):
    # longest common block; ties resolved to the earliest position in a,
    # then in b, matching the conventional gestalt matcher
    best_i, best_j, best_size = alo, blo, 0
    j2len = {}
    for i in range(alo, ahi):
        newj2len = {}
        for j in range(blo, bhi):
            if a[i] == b[j]:
                k = j2len.get(j - 1, 0) + 1
                newj2len[j] = k
                if k > best_size:
                    best_i, best_j, best_size = i - k + 1, j - k + 1, k
        j2len = newj2len
    return best_i, best_j, best_size


def _matched_chars(a, alo, ahi, b, blo, bhi) -> int:
    i, j, size = _longest_match(a, alo, ahi, b, blo, bhi)
    if size == 0:
        return 0
    return (
        size
        + _matched_chars(a, alo, i, b, blo, j)
        + _matched_chars(a, i + size, ahi, b, j + size, bhi)
    )


def ratcliff_obershelp(a: str, b: str) -> float:
    """2M / (|a| + |b|) with M from recursive longest-common-substring.

    The earliest-position tie rule makes M order sensitive when several
    longest matches coexist, so the pair is put in a canonical order
    first; that keeps the score symmetric.
    """
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    if (len(a), a) > (len(b), b):
        a, b = b, a
    m = _matched_chars(a, 0, len(a), b, 0, len(b))
    return 2.0 * m / (len(a) + len(b))


# ---------------------------------------------------------------------------
# n-gram overlap
# ---------------------------------------------------------------------------


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _prf(overlap: float, cand_total: float, ref_total: float) -> dict[str, float]:
    p = overlap / cand_total if cand_total else 0.0
    r = overlap / ref_total if ref_total else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": r, "f1": f1}


def rouge_n(candidate, reference, n: int) -> dict[str, float]:
    if n < 1:
        raise ValidationError(f"n-gram order must be >= 1, got {n}")
    cand = _ngrams(list(candidate), n)
    ref = _ngrams(list(reference), n)
    overlap = sum((cand & ref).values())
    return _prf(overlap, sum(cand.values()), sum(ref.values()))


def _lcs_length(a, b) -> int:
    # single-row dynamic programme
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        curr = [0]
        for j, y in enumerate(b, start=1):
            curr.append(prev[j - 1] + 1 if x == y else max(prev[j], curr[j - 1]))
        prev = curr
    return prev[-1]


def rouge_l(candidate, reference) -> dict[str, float]:
    cand, ref = list(candidate), list(reference)
    lcs = _lcs_length(cand, ref)
    return _prf(lcs, len(cand), len(ref))


def bleu(candidate, references, max_n: int = 4, smoothing: bool = False) -> dict[int, float]:
    """BLEU-1..max_n with clipped precision and brevity penalty.

    Smoothing (add-one on n-gram counts) is off unless asked for; a
    zero precision at any order then zeroes that BLEU score.
    """
    if max_n < 1:
        raise ValidationError(f"max_n must be >= 1, got {max_n}")
    cand = list(candidate)
    refs = [list(r) for r in references]
    if not refs:
        raise ValidationError("need at least one reference")
    scores = {}
    c = len(cand)
    if c == 0:
        return {k: 0.0 for k in range(1, max_n + 1)}
    # reference length closest to the candidate, ties to the shorter
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    log_precisions = []
    for n in range(1, max_n + 1):
        cand_counts = _ngrams(cand, n)
        total = sum(cand_counts.values())
        clipped = 0
        for gram, count in cand_counts.items():
            best = max(_ngrams(ref, n).get(gram, 0) for ref in refs)
            clipped += min(count, best)
        if smoothing:
            p = (clipped + 1) / (total + 1) if total else 0.0
        else:
            p = clipped / total if total else 0.0
        if p == 0.0:
            log_precisions.append(None)
        else:
            log_precisions.append(math.log(p))
        usable = log_precisions[:n]
        if any(lp is None for lp in usable):
            scores[n] = 0.0
        else:
            scores[n] = bp * math.exp(sum(usable) / n)
    return scores


def meteor(candidate, reference) -> float:
    """Exact-match unigram variant with the original fragmentation penalty."""
    cand, ref = list(candidate), list(reference)
    if not cand or not ref:
        return 0.0
    taken = [False] * len(ref)
    pairs = []
    for ci, token in enumerate(cand):
        for rj, rtok in enumerate(ref):
            if not taken[rj] and rtok == token:
                taken[rj] = True
                pairs.append((ci, rj))
                break
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(cand)
    r = m / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    chunks = 0
    prev = None
    for ci, rj in pairs:
        if prev is None or ci != prev[0] + 1 or rj != prev[1] + 1:
            chunks += 1
        prev = (ci, rj)
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1.0 - penalty)


# ---------------------------------------------------------------------------
# severity classification
# ---------------------------------------------------------------------------


def classification_report(pred, gold) -> dict:
    """Accuracy plus macro P/R/F1 over the labels present in gold."""
    pred, gold = list(pred), list(gold)
    if len(pred) != len(gold):
        raise ValidationError(
            f"length mismatch: {len(pred)} predictions vs {len(gold)} gold labels"
        )
    if not gold:
        raise ValidationError("need at least one labelled example")
    correct = sum(1 for p, g in zip(pred, gold) if p == g)
    labels = sorted({g for g in gold}, key=lambda s: s.rank, reverse=True)
    per_class = {}
    macro_p = macro_r = macro_f = 0.0
    for label in labels:
        tp = sum(1 for p, g in zip(pred, gold) if p == label and g == label)
        fp = sum(1 for p, g in zip(pred, gold) if p == label and g != label)
        fn = sum(1 for p, g in zip(pred, gold) if p != label and g == label)
        p_ = tp / (tp + fp) if tp + fp else 0.0
        r_ = tp / (tp + fn) if tp + fn else 0.0
        f_ = 2 * p_ * r_ / (p_ + r_) if p_ + r_ else 0.0
        per_class[label.value] = {
            "precision": p_,
            "recall": r_,
            "f1": f_,
            "support": tp + fn,
        }
        macro_p += p_
        macro_r += r_
        macro_f += f_
    k = len(labels)
    return {
        "accuracy": correct / len(gold),
        "precision": macro_p / k,
        "recall": macro_r / k,
        "f1": macro_f / k,
        "per_class": per_class,
    }


# ---------------------------------------------------------------------------
# fact presence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FactSet:
    facts: frozenset

    def __len__(self) -> int:
        return len(self.facts)


def extract_fact_set(summary) -> FactSet:
    """Normalized ADE representatives taken off the summary's trace."""
    trace = summary.severity_order_trace
    if not trace:
        raise ValidationError(f"summary for {summary.drug!r} has an empty trace")
    return FactSet(frozenset(normalize_term(rep) for _, rep in trace))


def fact_presence(generated: str, gold_facts: FactSet) -> dict[str, float]:
    """Fractions of gold facts fully, partially, or not at all present.

    Full presence = normalized substring; partial = at least half the
    fact's tokens appear; absent = no token appears.  The bands do not
    partition: a fact with one of three tokens present lands between
    partial and absent and counts toward nothing.
    """
    if not gold_facts.facts:
        raise ValidationError("empty fact set")
    normalized = normalize_term(generated)
    gen_tokens = set(tokenize(generated))
    full = partial = absent = 0
    for fact in gold_facts.facts:
        if fact in normalized:
            full += 1
            continue
        fact_tokens = tokenize(fact)
        present = sum(1 for t in fact_tokens if t in gen_tokens)
        if present == 0:
            absent += 1
        elif fact_tokens and present / len(fact_tokens) >= 0.5:
            partial += 1
    n = len(gold_facts.facts)
    return {"full": full / n, "partial": partial / n, "absent": absent / n}


def factual_recall(generated: str, gold_facts: FactSet) -> float:
    return fact_presence(generated, gold_facts)["full"]


def omission_rate(generated: str, gold_facts: FactSet) -> float:
    return fact_presence(generated, gold_facts)["absent"]


# ---------------------------------------------------------------------------
# embedding-based token matching
# ---------------------------------------------------------------------------


def embedding_match_score(candidate, reference, provider) -> dict[str, float]:
    """Greedy max-cosine token matching in both directions, then F1."""
    from .grouping import embed_texts

    cand, ref = list(candidate), list(reference)
    if not cand or not ref:
        return {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    unique = list(dict.fromkeys(cand + ref))
    vectors = embed_texts(unique, provider)
    lookup = {tok: v.values for tok, v in zip(unique, vectors)}
    mat_c = np.stack([lookup[t] for t in cand])
    mat_r = np.stack([lookup[t] for t in ref])

    def _unit(m):
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return m / norms

    sims = np.clip(_unit(mat_c) @ _unit(mat_r).T, 0.0, None)
    p = float(sims.max(axis=1).mean())
    r = float(sims.max(axis=0).mean())
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": r, "f1": f1}


# ---------------------------------------------------------------------------
# clinical ratings
# ---------------------------------------------------------------------------


def clinical_eval_aggregate(ratings) -> dict:
    """Per-axis and overall means of 1..5 integer ratings."""
    sums = {axis: 0 for axis in CLINICAL_AXES}
    counts = {axis: 0 for axis in CLINICAL_AXES}
    for record in ratings:
        axis = record["axis"]
        score = record["score"]
        if axis not in sums:
            raise ValidationError(f"unknown rating axis {axis!r}")
        if not isinstance(score, int) or isinstance(score, bool) or not 1 <= score <= 5:
            raise ValidationError(f"score must be an integer in 1..5, got {score!r}")
        sums[axis] += score
        counts[axis] += 1
    per_axis = {
        axis: {
            "mean": sums[axis] / counts[axis] if counts[axis] else None,
            "count": counts[axis],
        }
        for axis in CLINICAL_AXES
    }
    total = sum(sums.values())
    n = sum(counts.values())
    return {
        "per_axis": per_axis,
        "overall": {"mean": total / n if n else None, "count": n},
    }


# ---------------------------------------------------------------------------
# corpus-level evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    scores: dict
    per_example: list = field(default_factory=list)
    parameters: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scores": self.scores,
            "per_example": self.per_example,
            "parameters": self.parameters,
        }

    def to_table(self) -> str:
        width = max((len(k) for k in self.scores), default=6)
        lines = [f"{'metric'.ljust(width)}  value"]
        for key in sorted(self.scores):
            lines.append(f"{key.ljust(width)}  {self.scores[key]:.4f}")
        return "\n".join(lines)


def evaluate_summaries(predictions, gold, provider=None, max_n: int = 4,
                       smoothing: bool = False) -> MetricReport:
    """Score generated summaries against gold, drug by drug.

    predictions: drug -> generated text.  gold: drug -> gold summary.
    Drugs missing a prediction score as empty text.  Per-metric corpus
    scores are plain means over the gold drugs in sorted order.
    """
    if not gold:
        raise ValidationError("no gold summaries to evaluate against")
    per_example = []
    sums = Counter()
    counts = Counter()
    for drug in sorted(gold):
        gold_summary = gold[drug]
        generated = predictions.get(drug, "")
        cand = tokenize(generated)
        ref = tokenize(gold_summary.text)
        row = {
            "drug": drug,
            "missing": drug not in predictions,
            "jaccard": jaccard(cand, ref),
            "hamming": float(hamming_distance(generated, gold_summary.text)),
            "ros": ratcliff_obershelp(generated, gold_summary.text),
            "rouge1_f1": rouge_n(cand, ref, 1)["f1"],
            "rouge2_f1": rouge_n(cand, ref, 2)["f1"],
            "rougeL_f1": rouge_l(cand, ref)["f1"],
            "meteor": meteor(cand, ref),
        }
        for order, score in bleu(cand, [ref], max_n=max_n, smoothing=smoothing).items():
            row[f"bleu{order}"] = score
        if gold_summary.severity_order_trace:
            presence = fact_presence(generated, extract_fact_set(gold_summary))
            row["factual_recall"] = presence["full"]
            row["omission_rate"] = presence["absent"]
            row["partial_presence"] = presence["partial"]
        if provider is not None:
            row["embedding_f1"] = embedding_match_score(cand, ref, provider)["f1"]
        per_example.append(row)
        for key, value in row.items():
            if key not in ("drug", "missing"):
                sums[key] += value
                counts[key] += 1
    scores = {key: sums[key] / counts[key] for key in sums}
    return MetricReport(
        scores=scores,
        per_example=per_example,
        parameters={
            "tokenization": "lowercase, non-alphanumeric split",
            "bleu_max_n": max_n,
            "bleu_smoothing": smoothing,
            "hamming_padding": "sentinel",
            "meteor_variant": "exact-match unigrams, penalty 0.5*(chunks/matches)^3",
            "fact_partial_threshold": 0.5,
            "embedding_provider": getattr(provider, "provider_id", None),
        },
    )
