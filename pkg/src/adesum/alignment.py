"""Preference-pair construction and the exact preference loss.

The loss and its gradients are computed analytically from supplied
sequence log-probabilities, so the objective can be verified to
floating-point precision without serving any model.  Rejected
completions come either from an external generator backend or from a
deterministic local degrader.
"""

from __future__ import annotations

import enum
import json
import random
import re
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .summarization import serialize_entry

_SENTENCE = re.compile(r"(?<=\.)\s+")


class PairSource(enum.Enum):
    GENERATED = "gold_vs_generated"
    DEGRADED = "gold_vs_degraded"


@dataclass(frozen=True)
class PreferencePair:
    prompt: str
    chosen: str
    rejected: str
    source: PairSource = PairSource.DEGRADED

    def __post_init__(self):
        if not self.prompt:
            raise ValidationError("preference pair needs a non-empty prompt")
        if not self.chosen or not self.rejected:
            raise ValidationError("preference pair needs both completions")
        if self.chosen == self.rejected:
            raise ValidationError("chosen and rejected completions are identical")

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "chosen": self.chosen,
            "rejected": self.rejected,
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreferencePair":
        return cls(
            prompt=str(d["prompt"]),
            chosen=str(d["chosen"]),
            rejected=str(d["rejected"]),
            source=PairSource(d.get("source", PairSource.GENERATED.value)),
        )


# ---------------------------------------------------------------------------
# rejected-completion providers
# ---------------------------------------------------------------------------

MUTATIONS = ("severity_shuffle", "fact_drop", "repetition_inject")
_DEGRADE_SEED = 13


def _split_sections(text: str) -> list[str]:
    return [s for s in _SENTENCE.split(text.strip()) if s]


def degrade_summary(gold: str, mutations=MUTATIONS) -> str:
    """Deterministically corrupt a gold summary; never returns the input.

    Mutations apply in the fixed order severity_shuffle, fact_drop,
    repetition_inject regardless of how the subset is passed.  If every
    selected mutation is a no-op the final sentence is duplicated so
    the output still differs.
    """
    chosen = [m for m in MUTATIONS if m in set(mutations)]
    if not chosen:
        raise ValidationError("select at least one mutation")
    unknown = set(mutations) - set(MUTATIONS)
    if unknown:
        raise ValidationError(f"unknown mutations: {sorted(unknown)}")
    text = gold.strip()
    for mutation in chosen:
        if mutation == "severity_shuffle":
            sections = _split_sections(text)
            if len(sections) > 2:
                head, body = sections[0], sections[1:]
                order = list(range(len(body)))
                random.Random(_DEGRADE_SEED).shuffle(order)
                if order == sorted(order):
                    order = order[1:] + order[:1]
                text = " ".join([head] + [body[i] for i in order])
            elif len(sections) == 2:
                # a lone section follows the header: swap the two sentences
                text = " ".join([sections[1], sections[0]])
        elif mutation == "fact_drop":
            sections = _split_sections(text)
            # never drop the leading header sentence
            for idx in range(len(sections) - 1, 0, -1):
                prefix, sep, listing = sections[idx].partition(": ")
                if not sep:
                    continue
                items = [i for i in listing.rstrip(".").split(", ") if i]
                if len(items) > 1:
                    sections[idx] = f"{prefix}: {', '.join(items[:-1])}."
                else:
                    del sections[idx]
                text = " ".join(sections)
                break
        elif mutation == "repetition_inject":
            sections = _split_sections(text)
            if sections:
                text = " ".join(sections + [sections[-1]])
    if text == gold.strip():
        sections = _split_sections(text)
        text = " ".join(sections + sections[-1:]) if sections else gold + " " + gold
    return text


class DegradingProvider:
    """Local substitute for an external non-preferred generator."""

    source = PairSource.DEGRADED

    def __init__(self, mutations=MUTATIONS):
        self.mutations = tuple(mutations)

    def rejected_for(self, drug: str, entry, gold_text: str) -> str:
        return degrade_summary(gold_text, self.mutations)


class GeneratorProvider:
    """Wraps a summarizer backend as the rejected-completion source."""

    source = PairSource.GENERATED

    def __init__(self, backend):
        self.backend = backend

    def rejected_for(self, drug: str, entry, gold_text: str) -> str:
        return self.backend.generate(drug, serialize_entry(entry))


def build_preference_pairs(gold, provider, grid) -> list[PreferencePair]:
    """One preference pair per drug: gold summary vs provider output.

    Pairs whose rejected text equals the gold text are dropped with a
    warning; if everything drops, that is an error.
    """
    if not gold:
        return []
    pairs = []
    for drug in sorted(gold):
        entry = grid.entries.get(drug)
        if entry is None:
            raise ValidationError(f"no grid entry for drug {drug!r}")
        summary = gold[drug]
        chosen = summary.text if hasattr(summary, "text") else str(summary)
        prompt = json.dumps({"drug": drug, "groups": serialize_entry(entry)})
        rejected = provider.rejected_for(drug, entry, chosen)
        if rejected == chosen:
            warnings.warn(f"dropping pair for {drug!r}: rejected equals chosen")
            continue
        pairs.append(
            PreferencePair(
                prompt=prompt, chosen=chosen, rejected=rejected, source=provider.source
            )
        )
    if not pairs:
        raise ValidationError("every candidate pair collapsed to its gold summary")
    return pairs


def export_preference_dataset(pairs, path: str | Path) -> None:
    if not pairs:
        raise ValidationError("nothing to export")
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_dict(), sort_keys=True) + "\n")


def import_preference_dataset(path: str | Path) -> list[PreferencePair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(PreferencePair.from_dict(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# the preference objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DpoBatch:
    """Per-pair policy and reference log-probs plus the sharpness scale."""

    policy_chosen: np.ndarray
    policy_rejected: np.ndarray
    ref_chosen: np.ndarray
    ref_rejected: np.ndarray
    beta: float = 0.1

    def __post_init__(self):
        arrays = {}
        for name in ("policy_chosen", "policy_rejected", "ref_chosen", "ref_rejected"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 1 or arr.size == 0:
                raise ValidationError(f"{name} must be a non-empty 1-D array")
            if np.any(arr > 0):
                raise ValidationError(f"{name} contains a positive log-probability")
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        sizes = {a.size for a in arrays.values()}
        if len(sizes) != 1:
            raise ValidationError("log-prob arrays differ in length")
        if not self.beta > 0:
            raise ValidationError(f"beta must be positive, got {self.beta}")

    def __len__(self) -> int:
        return self.policy_chosen.size

    def margins(self) -> np.ndarray:
        """Scaled margin z per pair."""
        return self.beta * (
            (self.policy_chosen - self.ref_chosen)
            - (self.policy_rejected - self.ref_rejected)
        )

    @classmethod
    def from_dict(cls, d: dict) -> "DpoBatch":
        pairs = d.get("pairs")
        if not pairs:
            raise ValidationError("batch needs at least one pair")
        return cls(
            policy_chosen=[p["policy_chosen"] for p in pairs],
            policy_rejected=[p["policy_rejected"] for p in pairs],
            ref_chosen=[p["ref_chosen"] for p in pairs],
            ref_rejected=[p["ref_rejected"] for p in pairs],
            beta=float(d.get("beta", 0.1)),
        )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # two-branch form keeps exp() in the safe range for |z| up to ~700
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    expz = np.exp(z[~pos])
    out[~pos] = expz / (1.0 + expz)
    return out


def dpo_loss(batch: DpoBatch) -> float:
    """Mean of -log sigmoid(z) over the batch, z the scaled margin."""
    z = batch.margins()
    # -log sigmoid(z) == softplus(-z) == log(1 + e^{-z}), stable both tails
    return float(np.mean(np.logaddexp(0.0, -z)))


def dpo_loss_gradients(batch: DpoBatch) -> dict[str, np.ndarray]:
    """Analytic partials of the mean loss w.r.t. each log-prob array.

    The reference policy is a fixed constant in the objective, so its
    partials are identically zero.
    """
    z = batch.margins()
    coeff = batch.beta * (1.0 - _sigmoid(z)) / len(batch)
    return {
        "policy_chosen": -coeff,
        "policy_rejected": coeff,
        "ref_chosen": np.zeros_like(coeff),
        "ref_rejected": np.zeros_like(coeff),
    }


def dpo_report(batch: DpoBatch) -> dict:
    grads = dpo_loss_gradients(batch)
    return {
        "loss": dpo_loss(batch),
        "beta": batch.beta,
        "per_pair_z": batch.margins().tolist(),
        "gradients": {k: v.tolist() for k, v in grads.items()},
    }


def score_pairs(pairs, policy_scorer, reference_scorer, beta: float = 0.1) -> DpoBatch:
    """Build a batch by scoring each completion under both models."""
    if not pairs:
        raise ValidationError("no pairs to score")
    pc, pr, rc, rr = [], [], [], []
    for pair in pairs:
        pc.append(policy_scorer.logprob(pair.prompt, pair.chosen))
        pr.append(policy_scorer.logprob(pair.prompt, pair.rejected))
        rc.append(reference_scorer.logprob(pair.prompt, pair.chosen))
        rr.append(reference_scorer.logprob(pair.prompt, pair.rejected))
    return DpoBatch(
        policy_chosen=pc, policy_rejected=pr, ref_chosen=rc, ref_rejected=rr, beta=beta
    )
