"""Triplet extraction: (ADE text, drug name, severity) per post.

Backends are interchangeable: a deterministic lexicon baseline for
offline runs and tests, and an HTTP client for a served fine-tuned
model (see backends.py).  The low-rank adapter delta used by
parameter-efficient fine-tuning is exposed as a verifiable matrix op.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .corpus import Post, SeverityLabel, normalize_term
from .errors import ModelOutputError, ValidationError

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")

POST_PLACEHOLDER = "{post}"
SCHEMA_PLACEHOLDER = "{schema}"

SCHEMA_TEXTS = {
    "v1": (
        "Return a JSON array, one object per adverse drug event, with keys: "
        '"drug" (string), "ade" (string), "severity" '
        '("high"|"moderate"|"mild"|"na"), "adversity" (boolean). '
        "Return [] when the post reports no adverse drug event."
    ),
}

DEFAULT_TEMPLATE_TEXT = (
    "Extract every adverse drug event from the patient post below.\n"
    "{schema}\n\nPost:\n{post}"
)


@dataclass(frozen=True)
class ExtractionItem:
    drug: str
    ade_text: str
    severity: SeverityLabel
    adversity: bool

    def __post_init__(self):
        object.__setattr__(self, "drug", normalize_term(self.drug))
        if not self.drug:
            raise ValidationError("extraction item needs a drug name")
        if not self.ade_text.strip():
            raise ValidationError("extraction item needs ADE text")

    def to_dict(self) -> dict:
        return {
            "drug": self.drug,
            "ade_text": self.ade_text,
            "severity": self.severity.value,
            "adversity": self.adversity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractionItem":
        return cls(
            drug=str(d["drug"]),
            ade_text=str(d.get("ade_text", d.get("ade", ""))),
            severity=SeverityLabel.parse(d.get("severity", "na")),
            adversity=bool(d.get("adversity", False)),
        )


@dataclass(frozen=True)
class ExtractionRecord:
    post_id: str
    items: tuple[ExtractionItem, ...]
    backend_id: str
    raw_model_output: str | None = None
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "post_id": self.post_id,
            "items": [i.to_dict() for i in self.items],
            "backend_id": self.backend_id,
            "raw_model_output": self.raw_model_output,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractionRecord":
        return cls(
            post_id=str(d["post_id"]),
            items=tuple(ExtractionItem.from_dict(i) for i in d.get("items") or ()),
            backend_id=str(d.get("backend_id", "")),
            raw_model_output=d.get("raw_model_output"),
            warnings=tuple(d.get("warnings") or ()),
        )


@dataclass(frozen=True)
class PromptTemplate:
    template_text: str = DEFAULT_TEMPLATE_TEXT
    output_schema_version: str = "v1"

    def __post_init__(self):
        for placeholder in (POST_PLACEHOLDER, SCHEMA_PLACEHOLDER):
            count = self.template_text.count(placeholder)
            if count != 1:
                raise ValidationError(
                    f"template must contain {placeholder} exactly once, found {count}"
                )
        if self.output_schema_version not in SCHEMA_TEXTS:
            raise ValidationError(
                f"unknown schema version {self.output_schema_version!r}"
            )


def render_prompt(post: Post, template: PromptTemplate) -> str:
    """Substitute the post body and output schema into the template.

    Single pass: placeholder-looking text inside the post body is left
    untouched.
    """
    schema_text = SCHEMA_TEXTS[template.output_schema_version]
    parts = re.split(r"(\{post\}|\{schema\})", template.template_text)
    return "".join(
        post.text if p == POST_PLACEHOLDER
        else schema_text if p == SCHEMA_PLACEHOLDER
        else p
        for p in parts
    )


def split_sentences(text: str) -> list[str]:
    """Sentence scope used for severity/adversity cue co-occurrence."""
    return [s for s in _SENTENCE_SPLIT.split(text) if s.strip()]


def _lexicon_pattern(entries) -> re.Pattern:
    ordered = sorted(entries, key=len, reverse=True)
    joined = "|".join(re.escape(e) for e in ordered)
    return re.compile(rf"\b(?:{joined})\b", re.IGNORECASE)


class LexiconBackend:
    """Deterministic rule backend over drug/ADE lexicons and cue terms.

    A drug only yields items when an ADE term occurs in the same
    sentence; severity is the highest-ranked cue in that sentence,
    adversity is true when any adversity cue co-occurs.
    """

    backend_id = "lexicon"

    def __init__(
        self,
        drug_lexicon: set[str],
        ade_lexicon: set[str],
        severity_cues: dict[str, SeverityLabel],
        adversity_cues: set[str],
    ):
        if not drug_lexicon or not ade_lexicon:
            raise ValidationError("drug and ADE lexicons must be non-empty")
        self._drug_rx = _lexicon_pattern(drug_lexicon)
        self._ade_rx = _lexicon_pattern(ade_lexicon)
        self._severity_cues = {
            normalize_term(cue): label for cue, label in severity_cues.items()
        }
        self._severity_rx = (
            _lexicon_pattern(self._severity_cues) if severity_cues else None
        )
        self._adversity_rx = (
            _lexicon_pattern(adversity_cues) if adversity_cues else None
        )

    @classmethod
    def from_config(cls, config: dict) -> "LexiconBackend":
        cues = {
            cue: SeverityLabel.parse(label)
            for label, cue_list in config.get("severity_cues", {}).items()
            for cue in cue_list
        }
        return cls(
            drug_lexicon=set(config["drugs"]),
            ade_lexicon=set(config["ades"]),
            severity_cues=cues,
            adversity_cues=set(config.get("adversity_cues", [])),
        )

    def run(self, post: Post) -> ExtractionRecord:
        found: dict[tuple[str, str], ExtractionItem] = {}
        for sentence in split_sentences(post.text):
            drugs = [m.group(0) for m in self._drug_rx.finditer(sentence)]
            if not drugs:
                continue
            ades = [m.group(0) for m in self._ade_rx.finditer(sentence)]
            if not ades:
                continue
            severity = self._sentence_severity(sentence)
            adversity = bool(
                self._adversity_rx and self._adversity_rx.search(sentence)
            )
            for drug in drugs:
                for ade in ades:
                    key = (normalize_term(drug), normalize_term(ade))
                    prev = found.get(key)
                    if prev is None:
                        found[key] = ExtractionItem(drug, ade, severity, adversity)
                    else:
                        # same pair seen again: keep the worst severity seen
                        found[key] = ExtractionItem(
                            prev.drug,
                            prev.ade_text,
                            max(prev.severity, severity, key=lambda s: s.rank),
                            prev.adversity or adversity,
                        )
        return ExtractionRecord(
            post_id=post.id, items=tuple(found.values()), backend_id=self.backend_id
        )

    def _sentence_severity(self, sentence: str) -> SeverityLabel:
        if self._severity_rx is None:
            return SeverityLabel.NOT_APPLICABLE
        hits = [
            self._severity_cues[normalize_term(m.group(0))]
            for m in self._severity_rx.finditer(sentence)
        ]
        if not hits:
            return SeverityLabel.NOT_APPLICABLE
        return max(hits, key=lambda s: s.rank)


def load_lexicon(path: str | None = None) -> dict:
    """Lexicon config from a JSON file, or the packaged default."""
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    else:
        resource = resources.files("adesum.data").joinpath("lexicon.json")
        data = json.loads(resource.read_text(encoding="utf-8"))
    for key in ("drugs", "ades"):
        if not data.get(key):
            raise ValidationError(f"lexicon is missing non-empty {key!r}")
    return data


def default_lexicon_backend(path: str | None = None) -> LexiconBackend:
    return LexiconBackend.from_config(load_lexicon(path))


def lexicon_extract(
    post: Post,
    drug_lexicon: set[str],
    ade_lexicon: set[str],
    severity_cues: dict[str, SeverityLabel],
    adversity_cues: set[str],
) -> ExtractionRecord:
    backend = LexiconBackend(drug_lexicon, ade_lexicon, severity_cues, adversity_cues)
    return backend.run(post)


def parse_model_output(raw: str, schema_version: str = "v1") -> tuple[list[ExtractionItem], list[str]]:
    """Decode extraction items from raw model text.

    Tolerates surrounding prose: the first well-formed JSON array wins.
    Unknown severity strings degrade to NotApplicable with a warning
    rather than failing the post.
    """
    array = _first_json_array(raw)
    if array is None:
        raise ModelOutputError("no JSON array found in model output", raw_output=raw)
    items: list[ExtractionItem] = []
    warnings: list[str] = []
    for idx, element in enumerate(array):
        if not isinstance(element, dict):
            warnings.append(f"item {idx}: not an object, skipped")
            continue
        drug = str(element.get("drug") or "").strip()
        ade = str(element.get("ade") or element.get("ade_text") or "").strip()
        if not drug or not ade:
            warnings.append(f"item {idx}: missing drug or ade, skipped")
            continue
        raw_severity = str(element.get("severity", "na"))
        try:
            severity = SeverityLabel.parse(raw_severity)
        except ValidationError:
            severity = SeverityLabel.NOT_APPLICABLE
            warnings.append(
                f"item {idx}: unknown severity {raw_severity!r}, using na"
            )
        items.append(
            ExtractionItem(
                drug=drug,
                ade_text=ade,
                severity=severity,
                adversity=bool(element.get("adversity", False)),
            )
        )
    return items, warnings


def serialize_items(items: list[ExtractionItem]) -> str:
    """Inverse of parse_model_output for well-formed records."""
    return json.dumps(
        [
            {
                "drug": i.drug,
                "ade": i.ade_text,
                "severity": i.severity.value,
                "adversity": i.adversity,
            }
            for i in items
        ]
    )


def _first_json_array(raw: str):
    decoder = json.JSONDecoder()
    for match in re.finditer(r"\[", raw):
        try:
            value, _ = decoder.raw_decode(raw, match.start())
        except json.JSONDecodeError:
            continue
        if isinstance(value, list):
            return value
    return None


def extract(post: Post, backend) -> ExtractionRecord:
    """Run one post through a backend and validate the record shape."""
    record = backend.run(post)
    if record.post_id != post.id:
        raise ValidationError(
            f"backend returned record for {record.post_id!r}, expected {post.id!r}"
        )
    return record


@dataclass(frozen=True)
class LowRankAdapter:
    """Low-rank weight delta, factored as (d_out x r) @ (r x d_in)."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if A.ndim != 2 or B.ndim != 2:
            raise ValidationError("adapter factors must be 2-D matrices")
        if A.shape[1] != B.shape[0]:
            raise ValidationError(
                f"inner dimensions disagree: A is {A.shape}, B is {B.shape}"
            )
        if self.rank > min(A.shape[0], B.shape[1]):
            raise ValidationError(
                f"rank {self.rank} exceeds min(d_out, d_in) "
                f"= {min(A.shape[0], B.shape[1])}"
            )

    @property
    def rank(self) -> int:
        return self.A.shape[1]


def low_rank_delta(adapter: LowRankAdapter) -> np.ndarray:
    """Materialize the weight delta A @ B; rank is at most adapter.rank."""
    return adapter.A @ adapter.B
