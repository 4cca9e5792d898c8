import random

import pytest

from adesum.corpus import Corpus, Post
from adesum.extraction import load_lexicon

# sentence shapes chosen so drug and ADE share a sentence (the linkage
# rule) with occasional noise sentences that must not produce items
_TEMPLATES = [
    "Started {drug} three weeks ago and the {ade} hit fast.",
    "My onc put me on {drug}. The {ade} was {adversity} at first.",
    "Anyone else on {drug} with {ade}? Mine has been {mild_cue}.",
    "On {drug} I developed {ade} and was {high_cue}.",
    "{drug} works but the {ade} meant I {moderate_cue}.",
    "Dealing with {ade} since starting {drug}, feeling {adversity} most days.",
]
_NOISE = [
    "Sending hugs to everyone in this thread.",
    "My scan is next Tuesday, fingers crossed.",
    "The weather has been lovely which helps a little.",
]


def make_posts(n: int, seed: int = 7) -> list[Post]:
    lex = load_lexicon()
    rng = random.Random(seed)
    posts = []
    for i in range(n):
        sentences = []
        for _ in range(rng.randint(1, 3)):
            template = rng.choice(_TEMPLATES)
            sentences.append(
                template.format(
                    drug=rng.choice(lex["drugs"]),
                    ade=rng.choice(lex["ades"]),
                    adversity=rng.choice(lex["adversity_cues"]),
                    mild_cue=rng.choice(lex["severity_cues"]["mild"]),
                    moderate_cue=rng.choice(lex["severity_cues"]["moderate"]),
                    high_cue=rng.choice(lex["severity_cues"]["high"]),
                )
            )
        if rng.random() < 0.5:
            sentences.append(rng.choice(_NOISE))
        posts.append(
            Post(
                id=f"post-{i:04d}",
                thread_title=f"thread {i % 17}",
                cancer_type=rng.choice(["breast", "lung", "colon", None]),
                text=" ".join(sentences),
            )
        )
    return posts


def make_corpus(n: int, seed: int = 7) -> Corpus:
    return Corpus(make_posts(n, seed=seed))


@pytest.fixture
def small_corpus() -> Corpus:
    return make_corpus(20, seed=11)


@pytest.fixture
def lexicon() -> dict:
    return load_lexicon()
