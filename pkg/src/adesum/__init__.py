"""Grouped adverse-drug-event summarization pipeline.

Extracts (drug, ADE, severity) triplets from patient forum posts, groups
mentions per drug and severity via embedding clustering, emits
severity-ordered summaries, builds preference data for alignment, and
scores outputs with a battery of native text metrics.  A FastAPI service
exposes pipeline runs, annotation task distribution, and rating
collection; the CLI is a thin wrapper over the same library.
"""

__version__ = "0.1.0"

from .corpus import Corpus, Post, SeverityLabel  # noqa: F401
