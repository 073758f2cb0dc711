"""Triplet batches with the m-repeat guarantee."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kg_store import ConceptDictionary, RelationStore, RelationTriplet
from .tokenizer import TokenCache, TokenSequence


@dataclass
class TrainingBatch:
    triplets: list[RelationTriplet]
    head_terms: list[TokenSequence]
    tail_terms: list[TokenSequence]
    head_surfaces: list[str]
    tail_surfaces: list[str]
    concept_ids: list[str]
    relation_ids: np.ndarray
    repeat: int

    @property
    def k(self) -> int:
        return len(self.triplets)

    @property
    def sequences(self) -> list[TokenSequence]:
        return self.head_terms + self.tail_terms


def check_batch_shape(k: int, m: int):
    if k <= 0 or m <= 0:
        raise ValueError("k and m must be positive")
    if k % m:
        raise ValueError(f"k={k} is not divisible by m={m}")
    if not 2 <= m <= math.isqrt(k):
        raise ValueError(f"m={m} outside [2, floor(sqrt(k))={math.isqrt(k)}]")


class BatchSampler:
    """Draws k/m distinct triplets per batch and repeats each m times.

    Every head/tail slot gets its own synonym draw, so repeats of a triplet
    usually carry different surface forms.
    """

    def __init__(self, dictionary: ConceptDictionary, store: RelationStore, tokens: TokenCache,
                 k: int, m: int, rng: np.random.Generator):
        check_batch_shape(k, m)
        if len(store) == 0:
            raise ValueError("relation store is empty")
        self.dictionary = dictionary
        self.store = store
        self.tokens = tokens
        self.k, self.m = k, m
        self.rng = rng

    def draw_indices(self) -> np.ndarray:
        n_distinct = self.k // self.m
        n = len(self.store)
        if n >= n_distinct:
            picks = self.rng.choice(n, size=n_distinct, replace=False)
        else:
            picks = self.rng.integers(n, size=n_distinct)
        return np.repeat(picks, self.m)

    def sample(self) -> TrainingBatch:
        idx = self.draw_indices()
        triplets = [self.store[int(i)] for i in idx]
        heads = [self.dictionary.sample_term(t.head, self.rng).surface for t in triplets]
        tails = [self.dictionary.sample_term(t.tail, self.rng).surface for t in triplets]
        return TrainingBatch(
            triplets=triplets,
            head_terms=[self.tokens(s) for s in heads],
            tail_terms=[self.tokens(s) for s in tails],
            head_surfaces=heads,
            tail_surfaces=tails,
            concept_ids=[t.head for t in triplets] + [t.tail for t in triplets],
            relation_ids=np.array([self.store.label_index[t.relation] for t in triplets], dtype=np.int64),
            repeat=self.m,
        )

    def __iter__(self):
        while True:
            yield self.sample()


def sample_batch(dictionary, store, tokens, k, m, rng) -> TrainingBatch:
    return BatchSampler(dictionary, store, tokens, k, m, rng).sample()
