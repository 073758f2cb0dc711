"""Embedding index over a dictionary and zero-shot normalization by cosine kNN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .kg_store import ConceptDictionary
from .tokenizer import TokenCache, Vocab


class MissingConceptError(KeyError):
    pass


@dataclass(frozen=True)
class Hit:
    concept_id: str
    term: str
    score: float


class EmbeddingIndex:
    """Unit-normalized term embeddings grouped contiguously by concept id."""

    def __init__(self, vectors, concept_ids, terms, pooling="cls", normalized=False):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(concept_ids) != vectors.shape[0] or len(terms) != vectors.shape[0]:
            raise ValueError("vectors, concept_ids and terms must align")
        norms = np.linalg.norm(vectors, axis=1)
        bad = np.flatnonzero(~(norms > 0) | ~np.isfinite(norms))
        if bad.size:
            raise ValueError(f"zero-norm embedding for term {terms[bad[0]]!r} ({concept_ids[bad[0]]})")
        order = sorted(range(len(concept_ids)), key=lambda i: (concept_ids[i], i))
        # saved rows are already unit length; dividing again would move them by an ulp
        self.rows = vectors[order] if normalized else vectors[order] / norms[order, None]
        self.rows.setflags(write=False)
        self.concept_ids = [concept_ids[i] for i in order]
        self.terms = [terms[i] for i in order]
        self.pooling = pooling
        starts = [0] + [i for i in range(1, len(order)) if self.concept_ids[i] != self.concept_ids[i - 1]]
        self._starts = np.array(starts, dtype=np.int64)
        self.concepts = [self.concept_ids[s] for s in starts]
        self._concept_pos = {c: i for i, c in enumerate(self.concepts)}

    def __len__(self):
        return self.rows.shape[0]

    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    def __contains__(self, concept_id):
        return concept_id in self._concept_pos

    def _sims(self, query_vec):
        q = np.asarray(query_vec, dtype=np.float64)
        n = np.linalg.norm(q)
        if not n > 0:
            raise ValueError("query embedding has zero norm")
        return self.rows @ (q / n)

    def concept_scores(self, query_vec):
        """Best cosine per concept, in concept-id order."""
        return np.maximum.reduceat(self._sims(query_vec), self._starts)

    def rank_concepts(self, query_vec) -> np.ndarray:
        """Concept positions sorted by descending score, ties by concept id."""
        # concepts are stored in ascending id order, so a stable sort breaks ties by id
        return np.argsort(-self.concept_scores(query_vec), kind="stable")

    def top_k_vector(self, query_vec, k: int) -> list[Hit]:
        if k < 1:
            raise ValueError("k must be >= 1")
        sims = self._sims(query_vec)
        best = np.maximum.reduceat(sims, self._starts)
        hits = []
        for i in np.argsort(-best, kind="stable")[:k]:
            start = self._starts[i]
            end = self._starts[i + 1] if i + 1 < len(self._starts) else len(sims)
            row = start + int(np.argmax(sims[start:end]))
            hits.append(Hit(self.concepts[i], self.terms[row], float(best[i])))
        return hits

    def save(self, path):
        np.savez(path, rows=self.rows, concept_ids=np.array(self.concept_ids, dtype=str),
                 terms=np.array(self.terms, dtype=str), pooling=np.array(self.pooling))

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["rows"], [str(c) for c in z["concept_ids"]], [str(t) for t in z["terms"]],
                       str(z["pooling"]), normalized=True)


class Normalizer:
    """Pairs an index with the encoder that produced it, for text queries."""

    def __init__(self, index: EmbeddingIndex, params: enc.EncoderParams, vocab: Vocab):
        self.index = index
        self.params = params
        self.vocab = vocab
        self.tokens = TokenCache(vocab, params.dims.max_len)

    def embed(self, surfaces) -> np.ndarray:
        return embed_surfaces(self.params, self.vocab, surfaces, self.index.pooling, self.tokens)

    def top_k(self, query: str, k: int = 1) -> list[Hit]:
        if not query or not query.strip():
            raise ValueError("empty query")
        return self.index.top_k_vector(self.embed([query])[0], k)

    def rankings(self, queries) -> list[np.ndarray]:
        vecs = self.embed(queries)
        return [self.index.rank_concepts(v) for v in vecs]


def embed_surfaces(params, vocab, surfaces, pooling="cls", tokens=None) -> np.ndarray:
    tokens = tokens or TokenCache(vocab, params.dims.max_len)
    seqs = [tokens(s) for s in surfaces]
    return enc.encode(params, seqs, pooling).astype(np.float64)


def check_vocab(params: enc.EncoderParams, vocab: Vocab):
    if len(vocab) != params.dims.vocab_size:
        raise ValueError(f"checkpoint expects a vocabulary of {params.dims.vocab_size} tokens, "
                         f"vocab file has {len(vocab)}")


def build_index(dictionary: ConceptDictionary, params: enc.EncoderParams, vocab: Vocab,
                pooling="cls") -> EmbeddingIndex:
    check_vocab(params, vocab)
    cids, terms = [], []
    for concept in dictionary:
        for t in concept.terms:
            cids.append(concept.id)
            terms.append(t.surface)
    vecs = embed_surfaces(params, vocab, terms, pooling)
    return EmbeddingIndex(vecs, cids, terms, pooling)


def top_k(normalizer: Normalizer, query: str, k: int = 1) -> list[Hit]:
    return normalizer.top_k(query, k)


# -- evaluation ---------------------------------------------------------------

def read_gold(path) -> list[tuple[str, list[str]]]:
    """``QUERY <TAB> CUI[,CUI...]`` lines."""
    gold = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected QUERY<TAB>CUI[,CUI...]")
            cuis = [c.strip() for c in parts[1].split(",") if c.strip()]
            if not cuis:
                raise ValueError(f"{path}:{lineno}: no gold concept")
            gold.append((parts[0].strip(), cuis))
    return gold


def gold_ranks(index: EmbeddingIndex, rankings, gold_sets) -> np.ndarray:
    """1-based rank of the best-ranked gold concept for each query."""
    ranks = np.empty(len(gold_sets), dtype=np.int64)
    for q, (order, golds) in enumerate(zip(rankings, gold_sets)):
        where = np.empty(len(order), dtype=np.int64)
        where[order] = np.arange(1, len(order) + 1)
        ranks[q] = min(where[index._concept_pos[g]] for g in golds)
    return ranks


def _gold_sets(gold):
    return [([g] if isinstance(g, str) else list(g)) for _, g in gold]


def eval_acc_at_k(normalizer: Normalizer, gold, ks=(1, 3)) -> dict[int, float]:
    """Fraction of queries with a gold concept ranked within the top k."""
    if not gold:
        raise ValueError("no gold queries")
    sets = _gold_sets(gold)
    missing = sorted({g for gs in sets for g in gs if g not in normalizer.index})
    if missing:
        raise MissingConceptError("gold concepts not in dictionary: " + ", ".join(missing))
    rankings = normalizer.rankings([q for q, _ in gold])
    ranks = gold_ranks(normalizer.index, rankings, sets)
    return {int(k): float(np.mean(ranks <= k)) for k in ks}


@dataclass(frozen=True)
class F1Result:
    precision: float
    recall: float
    f1: float
    true_positives: int
    predictions: int
    gold_mentions: int


def prf(tp: int, n_pred: int, n_gold: int) -> F1Result:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return F1Result(p, r, f, tp, n_pred, n_gold)


def eval_f1_one_cui(normalizer: Normalizer, gold) -> F1Result:
    """Top-1 concept per query; correct if it is any of the query's gold concepts."""
    for q, g in gold:
        if not g:
            raise ValueError(f"empty gold set for query {q!r}")
    preds = [normalizer.top_k(q, 1)[0].concept_id for q, _ in gold]
    tp = sum(p in set(g) for p, g in zip(preds, _gold_sets(gold)))
    return prf(tp, len(preds), len(gold))
