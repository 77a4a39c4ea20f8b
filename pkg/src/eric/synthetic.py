"""Synthetic narratives whose entities carry known latent states.

Each entity walks a Markov chain over latent states; every time it acts, the
narrative emits one sentence drawn from the templates of its current state.
The per-sentence gold state is recorded so learned codebook assignments can
be checked against ground truth.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import make_rng
from .text import AnonymizedExample, Vocabulary, preprocess_corpus, vocabulary_texts

SLOT = "{e}"

NAMES = [
    "Alice", "Bruno", "Clara", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Irene", "Jonas",
    "Kira", "Leon", "Mara", "Nils", "Olga", "Pavel", "Quinn", "Rosa", "Stefan", "Tara",
    "Ulrich", "Vera", "Walter", "Xenia", "Yuri", "Zora",
]

FOUR_STATE_TEMPLATES = [
    [  # content
        "{e} smiled at the morning sky.",
        "{e} sang a quiet song.",
        "{e} walked slowly through the garden.",
        "The children laughed with {e}.",
        "{e} thanked the old baker.",
    ],
    [  # hungry
        "{e} looked everywhere for bread.",
        "{e} begged the baker for food.",
        "The empty kitchen disappointed {e}.",
        "{e} dreamed of a warm meal.",
        "{e} counted the last coins for soup.",
    ],
    [  # angry
        "{e} shouted at the guards.",
        "{e} broke a wooden chair.",
        "The guards feared {e}.",
        "{e} slammed the heavy door.",
        "{e} threw a stone at the wall.",
    ],
    [  # exhausted
        "{e} fell asleep by the fire.",
        "{e} rested in a dark room.",
        "A long fever kept {e} in bed.",
        "{e} could barely lift a cup.",
        "{e} lay down near the river.",
    ],
]

FOUR_STATE_FILLERS = [
    "The wind blew over the hills.",
    "Rain fell on the quiet town.",
    "Night came slowly.",
]

ALIVE_DEAD_TEMPLATES = [
    [  # alive
        "{e} went to the market.",
        "{e} fixed the old fence.",
        "{e} talked with the neighbours.",
        "The farmer paid {e}.",
    ],
    [  # dead
        "{e} was buried on the hill.",
        "The village mourned {e}.",
        "Flowers covered the grave of {e}.",
        "Nobody could forget {e}.",
    ],
]


@dataclass
class SyntheticWorldConfig:
    n_latent_states: int
    n_entities_range: tuple[int, int]
    n_sentences_range: tuple[int, int]
    name_pool: list[str]
    templates: list[list[str]]
    transition_matrix: list[list[float]]
    seed: int = 0
    initial_probs: list[float] | None = None
    filler_templates: list[str] = field(default_factory=list)
    filler_prob: float = 0.0

    def __post_init__(self):
        self.n_entities_range = tuple(self.n_entities_range)
        self.n_sentences_range = tuple(self.n_sentences_range)
        self.validate()

    def validate(self) -> None:
        k = self.n_latent_states
        tm = np.asarray(self.transition_matrix, dtype=float)
        if tm.shape != (k, k) or np.any(tm < 0):
            raise ValueError(f"transition matrix must be a non-negative {k}x{k} matrix")
        if not np.allclose(tm.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition matrix rows must sum to 1")
        if len(self.templates) != k or any(not t for t in self.templates):
            raise ValueError("need a non-empty template set per latent state")
        for t in (x for group in self.templates for x in group):
            if t.count(SLOT) != 1:
                raise ValueError(f"state template must have exactly one entity slot: {t!r}")
        for t in self.filler_templates:
            if SLOT in t:
                raise ValueError(f"filler template must not mention an entity: {t!r}")
        if self.filler_prob > 0 and not self.filler_templates:
            raise ValueError("filler_prob > 0 needs filler templates")
        lo, hi = self.n_entities_range
        if not 1 <= lo <= hi <= len(self.name_pool):
            raise ValueError("n_entities_range must fit inside the name pool")
        lo, hi = self.n_sentences_range
        if not 1 <= lo <= hi:
            raise ValueError("bad n_sentences_range")
        if self.initial_probs is not None:
            p = np.asarray(self.initial_probs, dtype=float)
            if p.shape != (k,) or not np.isclose(p.sum(), 1.0):
                raise ValueError("initial_probs must be a distribution over latent states")

    def to_json(self) -> dict:
        return asdict(self)


def four_state_world(seed: int = 0, **overrides) -> SyntheticWorldConfig:
    stay, step, other = 0.6, 0.3, 0.05
    tm = [[stay if j == i else step if j == (i + 1) % 4 else other for j in range(4)]
          for i in range(4)]
    kw = dict(
        n_latent_states=4,
        n_entities_range=(3, 6),
        n_sentences_range=(8, 12),
        name_pool=list(NAMES),
        templates=[list(t) for t in FOUR_STATE_TEMPLATES],
        transition_matrix=tm,
        seed=seed,
        filler_templates=list(FOUR_STATE_FILLERS),
        filler_prob=0.12,
    )
    kw.update(overrides)
    return SyntheticWorldConfig(**kw)


def alive_dead_world(seed: int = 0, **overrides) -> SyntheticWorldConfig:
    kw = dict(
        n_latent_states=2,
        n_entities_range=(3, 5),
        n_sentences_range=(8, 12),
        name_pool=list(NAMES),
        templates=[list(t) for t in ALIVE_DEAD_TEMPLATES],
        transition_matrix=[[0.75, 0.25], [0.0, 1.0]],
        initial_probs=[1.0, 0.0],
        seed=seed,
    )
    kw.update(overrides)
    return SyntheticWorldConfig(**kw)


WORLDS = {"four_state": four_state_world, "alive_dead": alive_dead_world}


def _story_intro(names: list[str]) -> str:
    if len(names) == 1:
        return f"This is a story about {names[0]}."
    return f"This is a story about {', '.join(names[:-1])} and {names[-1]}."


def generate_narrative(config: SyntheticWorldConfig, rng: np.random.Generator) -> dict:
    """One corpus record with entity spans and per-sentence gold states."""
    k = config.n_latent_states
    tm = np.asarray(config.transition_matrix, dtype=float)
    init = (np.full(k, 1.0 / k) if config.initial_probs is None
            else np.asarray(config.initial_probs, dtype=float))
    n_ent = int(rng.integers(config.n_entities_range[0], config.n_entities_range[1] + 1))
    n_sent = int(rng.integers(config.n_sentences_range[0], config.n_sentences_range[1] + 1))
    pool_idx = rng.choice(len(config.name_pool), size=n_ent, replace=False)
    names = [config.name_pool[i] for i in pool_idx]
    states: list[int | None] = [None] * n_ent

    sentences: list[str] = []
    entities: list[dict] = []
    gold: list[int | None] = []
    appearance: list[str] = []
    offset = 0
    for _ in range(n_sent):
        if config.filler_prob > 0 and rng.random() < config.filler_prob:
            sent = config.filler_templates[int(rng.integers(len(config.filler_templates)))]
            gold.append(None)
        else:
            who = int(rng.integers(n_ent))
            if states[who] is None:
                states[who] = int(rng.choice(k, p=init))
            else:
                states[who] = int(rng.choice(k, p=tm[states[who]]))
            group = config.templates[states[who]]
            template = group[int(rng.integers(len(group)))]
            at = template.index(SLOT)
            sent = template.replace(SLOT, names[who])
            start = offset + at
            entities.append({"surface": names[who], "start": start, "end": start + len(names[who])})
            if names[who] not in appearance:
                appearance.append(names[who])
            gold.append(states[who])
        sentences.append(sent)
        offset += len(sent) + 1
    intro = _story_intro(appearance) if appearance else "This is a story."
    return {"input": intro, "output": " ".join(sentences), "entities": entities,
            "gold_states": gold}


def generate_synthetic_records(config: SyntheticWorldConfig, n_examples: int) -> list[dict]:
    rng = make_rng(config.seed, "synthetic")
    return [generate_narrative(config, rng) for _ in range(n_examples)]


def generate_synthetic_corpus(config: SyntheticWorldConfig, n_examples: int,
                              vocab: Vocabulary | None = None,
                              ) -> tuple[list[AnonymizedExample], Vocabulary]:
    """Anonymized examples carrying gold states, plus the vocabulary used."""
    records = generate_synthetic_records(config, n_examples)
    if vocab is None:
        vocab = Vocabulary.build(vocabulary_texts(records))
    examples, _ = preprocess_corpus(records, vocab, config.seed)
    return examples, vocab
