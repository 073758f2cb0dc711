"""Semantic-neighbourhood score (MCSM) and the relation-classification probe."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .contrastive import cosine_matrix
from .kg_store import ConceptDictionary
from .normalizer import embed_surfaces
from .tokenizer import TokenCache, Vocab, batch_arrays
from .trainer import OptimizerState, adamw_step


# -- MCSM ---------------------------------------------------------------------

def mcsm_bound(k: int) -> float:
    return sum(1.0 / math.log2(i + 1) for i in range(1, k + 1))


def neighbour_lists(vectors, k: int) -> np.ndarray:
    """k nearest rows by cosine for every row, self excluded, ties by row index."""
    S = cosine_matrix(np.asarray(vectors, dtype=np.float64))
    np.fill_diagonal(S, -np.inf)
    return np.argsort(-S, axis=1, kind="stable")[:, :k]


def mcsm(vectors, type_sets, semantic_type: str, k: int, neighbours=None) -> float:
    """Average discounted count of same-type concepts among k nearest neighbours.

    ``vectors`` holds one row per concept, ordered by concept id so the
    row index doubles as the id tie-break.
    """
    n = len(type_sets)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of concepts ({n})")
    members = [i for i, ts in enumerate(type_sets) if semantic_type in ts]
    if not members:
        raise ValueError(f"no concepts of semantic type {semantic_type!r}")
    if neighbours is None:
        neighbours = neighbour_lists(vectors, k)
    discount = 1.0 / np.log2(np.arange(2, k + 2))
    hits = np.array([[semantic_type in type_sets[j] for j in neighbours[i, :k]] for i in members])
    return float((hits * discount).sum(axis=1).mean())


def mcsm_all(vectors, type_sets, k: int, types=None) -> dict[str, float]:
    types = sorted({t for ts in type_sets for t in ts}) if types is None else types
    nb = neighbour_lists(vectors, k)
    return {t: mcsm(vectors, type_sets, t, k, neighbours=nb) for t in types}


def random_mcsm(type_sets, k: int, dim: int, draws: int = 20, seed: int = 0, types=None) -> dict[str, float]:
    """MCSM of isotropic Gaussian embeddings, averaged over independent draws."""
    rng = np.random.default_rng(seed)
    totals: dict[str, float] = {}
    for _ in range(draws):
        for t, v in mcsm_all(rng.normal(size=(len(type_sets), dim)), type_sets, k, types).items():
            totals[t] = totals.get(t, 0.0) + v / draws
    return totals


def concept_embeddings(dictionary: ConceptDictionary, params, vocab: Vocab, pooling="cls",
                       how="preferred"):
    """One vector per concept: its preferred term's embedding or the synonym mean."""
    ids = dictionary.ids
    if how == "preferred":
        vecs = embed_surfaces(params, vocab, [dictionary[c].preferred.surface for c in ids], pooling)
    elif how == "mean":
        tokens = TokenCache(vocab, params.dims.max_len)
        vecs = np.stack([embed_surfaces(params, vocab, [t.surface for t in dictionary[c].terms],
                                        pooling, tokens).mean(axis=0) for c in ids])
    else:
        raise ValueError("how must be 'preferred' or 'mean'")
    return ids, vecs


# -- relation probe -----------------------------------------------------------

@dataclass
class ProbeModel:
    W: np.ndarray  # (C, 2l)
    b: np.ndarray  # (C,)
    classes: list[str]

    @classmethod
    def zeros(cls, classes, dim: int) -> "ProbeModel":
        return cls(np.zeros((len(classes), 2 * dim)), np.zeros(len(classes)), list(classes))

    def logits(self, e_h, e_t) -> np.ndarray:
        return np.concatenate([e_h, e_t], axis=1) @ self.W.T + self.b

    def predict_proba(self, e_h, e_t) -> np.ndarray:
        return softmax(self.logits(e_h, e_t))

    def predict(self, e_h, e_t) -> np.ndarray:
        # argmax returns the first maximum, i.e. the lowest class index on ties
        return np.argmax(self.logits(e_h, e_t), axis=1)


def softmax(z) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, y) -> float:
    return float(-np.mean(np.log(probs[np.arange(len(y)), y] + 1e-300)))


@dataclass
class ProbeConfig:
    epochs: int = 50
    lr: float = 1e-3
    encoder_lr: float = 2e-5
    batch_size: int | None = None  # 512 for feature, 96 for fine-tune
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class ProbeResult:
    model: ProbeModel
    params: enc.EncoderParams | None
    losses: list[float]


def split_pairs(n: int, seed: int = 0, train_fraction: float = 0.8):
    """Seeded 4:1 shuffle split of row indices."""
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(n * train_fraction))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def _probe_grads(model, e_h, e_t, y):
    X = np.concatenate([e_h, e_t], axis=1)
    P = softmax(X @ model.W.T + model.b)
    loss = cross_entropy(P, y)
    G = P.copy()
    G[np.arange(len(y)), y] -= 1.0
    G /= len(y)
    dX = G @ model.W
    l = e_h.shape[1]
    return loss, {"W": G.T @ X, "b": G.sum(axis=0)}, dX[:, :l], dX[:, l:]


def probe_train(e_h=None, e_t=None, y=None, classes=None, mode="feature", config=None, *,
                params: enc.EncoderParams | None = None, head_seqs=None, tail_seqs=None) -> ProbeResult:
    """Fit ``softmax(W [e_h, e_t] + b)`` with cross-entropy and AdamW.

    Feature mode takes fixed embedding arrays. Fine-tune mode takes token
    sequences plus encoder params, embeds them with [CLS] pooling each step
    and updates a copy of the encoder alongside the probe.
    """
    config = config or ProbeConfig()
    y = np.asarray(y, dtype=np.int64)
    if classes is None:
        classes = [str(c) for c in range(int(y.max()) + 1)]
    if len(np.unique(y)) < 2:
        raise ValueError("probe training needs at least two classes")
    rng = np.random.default_rng(config.seed)
    losses = []

    if mode == "feature":
        e_h = np.asarray(e_h, dtype=np.float64)
        e_t = np.asarray(e_t, dtype=np.float64)
        model = ProbeModel.zeros(classes, e_h.shape[1])
        state = OptimizerState.for_params({"W": model.W, "b": model.b}, weight_decay=config.weight_decay)
        bs = config.batch_size or 512
        for _ in range(config.epochs):
            perm = rng.permutation(len(y))
            for s in range(0, len(y), bs):
                idx = perm[s:s + bs]
                loss, g, _, _ = _probe_grads(model, e_h[idx], e_t[idx], y[idx])
                adamw_step({"W": model.W, "b": model.b}, g, state, config.lr)
                losses.append(loss)
        return ProbeResult(model, None, losses)

    if mode != "fine-tune":
        raise ValueError("mode must be 'feature' or 'fine-tune'")
    if params is None or head_seqs is None or tail_seqs is None:
        raise ValueError("fine-tune mode needs encoder params and head/tail token sequences")
    params = params.copy()
    model = ProbeModel.zeros(classes, params.dims.d_out)
    p_state = OptimizerState.for_params({"W": model.W, "b": model.b}, weight_decay=config.weight_decay)
    e_state = OptimizerState.for_params(params.tensors, weight_decay=config.weight_decay)
    encoder_names = [n for n in enc.FIELDS if n not in ("rel_mats", "rel_vecs")]
    bs = config.batch_size or 96
    n = len(y)
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, bs):
            idx = perm[s:s + bs]
            seqs = [head_seqs[i] for i in idx] + [tail_seqs[i] for i in idx]
            ids, mask = enc.trim_batch(*batch_arrays(seqs))
            H, cache = enc.forward_with_cache(params, ids, mask)
            E = enc.cls_pool(enc.HiddenStates(H, mask)).astype(np.float64)
            m = len(idx)
            loss, g, d_h, d_t = _probe_grads(model, E[:m], E[m:], y[idx])
            dE = np.concatenate([d_h, d_t]).astype(params.dtype)
            eg = enc.backward_from_cache(params, cache, enc.pool_backward(dE, mask, "cls", params.dtype))
            adamw_step({"W": model.W, "b": model.b}, g, p_state, config.lr)
            adamw_step(params.tensors, eg, e_state, config.encoder_lr, names=encoder_names)
            losses.append(loss)
    return ProbeResult(model, params, losses)


def probe_eval(model: ProbeModel, e_h, e_t, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty test set")
    return float(np.mean(model.predict(np.asarray(e_h, dtype=np.float64),
                                       np.asarray(e_t, dtype=np.float64)) == y))


def read_probe_pairs(path) -> list[tuple[str, str, str]]:
    """``HEAD_CUI <TAB> TAIL_CUI <TAB> CLASS_LABEL`` lines."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected HEAD<TAB>TAIL<TAB>CLASS")
            rows.append(tuple(p.strip() for p in parts))
    return rows


@dataclass
class RelationProbeReport:
    mode: str
    train_accuracy: float
    test_accuracy: float
    n_train: int
    n_test: int
    classes: list[str]


def relation_probe(dictionary: ConceptDictionary, pairs, params: enc.EncoderParams, vocab: Vocab,
                   mode="feature", config=None, pooling="cls") -> RelationProbeReport:
    """Split the pairs 4:1, fit the probe, and report train/test accuracy.

    Concepts are represented by their preferred term.
    """
    config = config or ProbeConfig()
    missing = sorted({c for h, t, _ in pairs for c in (h, t) if c not in dictionary})
    if missing:
        raise KeyError("probe concepts not in dictionary: " + ", ".join(missing))
    classes = sorted({c for _, _, c in pairs})
    y = np.array([classes.index(c) for _, _, c in pairs])
    heads = [dictionary[h].preferred.surface for h, _, _ in pairs]
    tails = [dictionary[t].preferred.surface for _, t, _ in pairs]
    tr, te = split_pairs(len(pairs), config.seed)
    if mode == "feature":
        E_h = embed_surfaces(params, vocab, heads, pooling)
        E_t = embed_surfaces(params, vocab, tails, pooling)
        res = probe_train(E_h[tr], E_t[tr], y[tr], classes, "feature", config)
        used = params
    else:
        tokens = TokenCache(vocab, params.dims.max_len)
        hs, ts = [tokens(s) for s in heads], [tokens(s) for s in tails]
        res = probe_train(None, None, y[tr], classes, "fine-tune", config, params=params,
                          head_seqs=[hs[i] for i in tr], tail_seqs=[ts[i] for i in tr])
        used, pooling = res.params, "cls"
        E_h = embed_surfaces(used, vocab, heads, pooling)
        E_t = embed_surfaces(used, vocab, tails, pooling)
    return RelationProbeReport(mode, probe_eval(res.model, E_h[tr], E_t[tr], y[tr]),
                               probe_eval(res.model, E_h[te], E_t[te], y[te]), len(tr), len(te), classes)
