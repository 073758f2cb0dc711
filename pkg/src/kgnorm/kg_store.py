"""Concept dictionary and relation triplet storage.

Both files are tab-separated, UTF-8, with ``#`` comment lines:

    concepts:   CUI <TAB> LANG <TAB> SEMTYPE <TAB> TERM
    relations:  HEAD_CUI <TAB> REL_LABEL <TAB> TAIL_CUI
"""

from __future__ import annotations

import logging
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class KGFormatError(ValueError):
    """Raised for malformed or empty input files."""


@dataclass(frozen=True)
class Term:
    surface: str
    language: str = "und"

    def __post_init__(self):
        if not self.surface.strip():
            raise ValueError("term surface is empty")


@dataclass
class Concept:
    id: str
    semantic_types: set[str]
    terms: list[Term]
    preferred_index: int = 0

    def __post_init__(self):
        if not self.terms:
            raise ValueError(f"concept {self.id} has no terms")
        if not 0 <= self.preferred_index < len(self.terms):
            raise ValueError(f"concept {self.id}: preferred_index out of range")

    @property
    def preferred(self) -> Term:
        return self.terms[self.preferred_index]


@dataclass(frozen=True)
class RelationTriplet:
    head: str
    relation: str
    tail: str


def clean_surface(text: str) -> str:
    return unicodedata.normalize("NFC", text).strip()


class ConceptDictionary:
    """Concepts keyed by id, iterated in sorted id order."""

    def __init__(self, concepts):
        self.concepts: dict[str, Concept] = {}
        for c in sorted(concepts, key=lambda c: c.id):
            if c.id in self.concepts:
                raise ValueError(f"duplicate concept id {c.id}")
            self.concepts[c.id] = c
        self.ids = list(self.concepts)
        self._surface_index: dict[str, list[str]] = {}
        for c in self.concepts.values():
            for t in c.terms:
                owners = self._surface_index.setdefault(t.surface, [])
                if c.id not in owners:
                    owners.append(c.id)

    def __len__(self):
        return len(self.concepts)

    def __contains__(self, cid):
        return cid in self.concepts

    def __getitem__(self, cid) -> Concept:
        return self.concepts[cid]

    def __iter__(self):
        return iter(self.concepts.values())

    def __eq__(self, other):
        if not isinstance(other, ConceptDictionary):
            return NotImplemented
        return self.concepts == other.concepts

    def concepts_for_surface(self, surface: str) -> list[str]:
        return list(self._surface_index.get(clean_surface(surface), []))

    def n_terms(self) -> int:
        return sum(len(c.terms) for c in self)

    def sample_term(self, concept_id: str, rng: np.random.Generator) -> Term:
        """Uniform draw over the concept's synonyms."""
        try:
            terms = self.concepts[concept_id].terms
        except KeyError:
            raise KeyError(f"unknown concept id {concept_id!r}") from None
        return terms[int(rng.integers(len(terms)))]


class RelationStore:
    def __init__(self, triplets, labels=None, dropped=0):
        self.triplets: list[RelationTriplet] = list(triplets)
        if labels is None:
            labels = list(dict.fromkeys(t.relation for t in self.triplets))
        self.labels: list[str] = list(labels)
        self.label_index = {lab: i for i, lab in enumerate(self.labels)}
        self.dropped = dropped

    def __len__(self):
        return len(self.triplets)

    def __getitem__(self, i) -> RelationTriplet:
        return self.triplets[i]

    def __eq__(self, other):
        if not isinstance(other, RelationStore):
            return NotImplemented
        return self.triplets == other.triplets and self.labels == other.labels


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def load_concepts(path) -> ConceptDictionary:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    types: dict[str, set[str]] = {}
    terms: dict[str, list[Term]] = {}
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 4:
            raise KGFormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        cui, lang, semtype, surface = (p.strip() for p in parts)
        surface = clean_surface(surface)
        if not cui or not surface:
            raise KGFormatError(f"{path}:{lineno}: empty concept id or term")
        types.setdefault(cui, set())
        if semtype:
            types[cui].add(semtype)
        term = Term(surface, lang or "und")
        bucket = terms.setdefault(cui, [])
        if term not in bucket:
            bucket.append(term)
    if not terms:
        raise KGFormatError(f"{path}: empty dictionary")
    return ConceptDictionary(Concept(cui, types[cui], ts) for cui, ts in terms.items())


def load_relations(path, dictionary: ConceptDictionary) -> RelationStore:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    kept, dropped = [], 0
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise KGFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        head, label, tail = (p.strip() for p in parts)
        if not head or not tail or not label:
            raise KGFormatError(f"{path}:{lineno}: empty field")
        if head not in dictionary or tail not in dictionary:
            dropped += 1
            continue
        kept.append(RelationTriplet(head, label, tail))
    if dropped:
        logger.warning("%s: dropped %d triplets with unknown endpoints", path, dropped)
    return RelationStore(kept, dropped=dropped)


def relation_label(rel_type: str, attribute: str = "") -> str:
    return f"{rel_type}|{attribute}"
