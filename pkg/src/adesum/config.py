"""Run configuration: one validated object drives every pipeline stage.

A redacted, canonically serialized copy of the config is stored with
each run and hashed into the run id, so identical settings always map
to the same run.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ValidationError
from .grouping import LINKAGES

EXTRACTION_BACKENDS = ("lexicon", "model")
SUMMARIZER_BACKENDS = ("template", "model")
EMBEDDING_PROVIDERS = ("hashing", "model")

KNOWN_METRICS = ("jaccard", "hamming", "ros", "rouge", "bleu", "meteor", "facts",
                 "embedding")

_ENV_ENDPOINTS = {
    "ADESUM_LLM_URL": "llm",
    "ADESUM_EMBEDDINGS_URL": "embeddings",
    "ADESUM_SUMMARIZER_URL": "summarizer",
    "ADESUM_SCORING_URL": "scoring_policy",
    "ADESUM_REFERENCE_SCORING_URL": "scoring_reference",
}


@dataclass
class RunConfig:
    extraction_backend: str = "lexicon"
    summarizer_backend: str = "template"
    embedding_provider: str = "hashing"
    embedding_dim: int = 64
    linkage: str = "average"
    threshold: float = 0.4
    beta: float = 0.1
    split_ratios: tuple = (0.80, 0.05, 0.15)
    split_seed: int = 42
    metrics: tuple = ("jaccard", "hamming", "ros", "rouge", "bleu", "meteor", "facts")
    endpoints: dict = field(default_factory=dict)
    lexicon_path: str | None = None
    auth_token: str | None = None
    timeout: float = 10.0
    max_retries: int = 2

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        self.metrics = tuple(self.metrics)
        self.validate()

    def validate(self) -> None:
        if self.extraction_backend not in EXTRACTION_BACKENDS:
            raise ValidationError(
                f"extraction_backend must be one of {EXTRACTION_BACKENDS}"
            )
        if self.summarizer_backend not in SUMMARIZER_BACKENDS:
            raise ValidationError(
                f"summarizer_backend must be one of {SUMMARIZER_BACKENDS}"
            )
        if self.embedding_provider not in EMBEDDING_PROVIDERS:
            raise ValidationError(
                f"embedding_provider must be one of {EMBEDDING_PROVIDERS}"
            )
        if self.linkage not in LINKAGES:
            raise ValidationError(f"linkage must be one of {LINKAGES}")
        if not 0.0 <= self.threshold <= 2.0:
            raise ValidationError(f"threshold must lie in [0, 2], got {self.threshold}")
        if not self.beta > 0:
            raise ValidationError(f"beta must be positive, got {self.beta}")
        if self.embedding_dim < 8:
            raise ValidationError(f"embedding_dim must be >= 8, got {self.embedding_dim}")
        if len(self.split_ratios) != 3 or any(r < 0 for r in self.split_ratios):
            raise ValidationError("split_ratios must be three non-negative numbers")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValidationError(
                f"split_ratios must sum to 1, got {sum(self.split_ratios)}"
            )
        unknown = set(self.metrics) - set(KNOWN_METRICS)
        if unknown:
            raise ValidationError(f"unknown metrics: {sorted(unknown)}")
        # model-backed stages need their endpoint configured up front
        if self.extraction_backend == "model" and not self.endpoints.get("llm"):
            raise ValidationError("extraction_backend 'model' needs endpoints.llm")
        if self.summarizer_backend == "model" and not self.endpoints.get("summarizer"):
            raise ValidationError(
                "summarizer_backend 'model' needs endpoints.summarizer"
            )
        if self.embedding_provider == "model" and not self.endpoints.get("embeddings"):
            raise ValidationError(
                "embedding_provider 'model' needs endpoints.embeddings"
            )

    def to_dict(self, redact: bool = True) -> dict:
        d = {
            "extraction_backend": self.extraction_backend,
            "summarizer_backend": self.summarizer_backend,
            "embedding_provider": self.embedding_provider,
            "embedding_dim": self.embedding_dim,
            "linkage": self.linkage,
            "threshold": self.threshold,
            "beta": self.beta,
            "split_ratios": list(self.split_ratios),
            "split_seed": self.split_seed,
            "metrics": list(self.metrics),
            "endpoints": dict(self.endpoints),
            "lexicon_path": self.lexicon_path,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
        }
        if not redact:
            d["auth_token"] = self.auth_token
        return d

    def canonical_json(self) -> str:
        """Stable serialization used for hashing; never includes secrets."""
        return json.dumps(self.to_dict(redact=True), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config {path} is not valid JSON: {exc}")
        if not isinstance(data, dict):
            raise ValidationError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(redact=True), fh, indent=2, sort_keys=True)
            fh.write("\n")


def apply_env_overrides(config: RunConfig, env=None) -> RunConfig:
    """Fold ADESUM_* endpoint/token variables into a copy of the config."""
    env = os.environ if env is None else env
    endpoints = dict(config.endpoints)
    for var, key in _ENV_ENDPOINTS.items():
        if env.get(var):
            endpoints[key] = env[var]
    token = env.get("ADESUM_AUTH_TOKEN", config.auth_token)
    return replace(config, endpoints=endpoints, auth_token=token)
