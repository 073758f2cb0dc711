"""Pair similarities, hard-pair mining and multi-similarity losses.

A training batch holds ``2k`` term embeddings: rows ``0..k-1`` are head
terms, rows ``k..2k-1`` the matching tail terms. The term-term block is a
``2k x 2k`` cosine matrix over all of them; the term-relation-term block is
a ``k x k`` matrix scoring each (head term, relation) anchor against every
tail term in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODES = ("distmult-cos", "transe", "none")
EXP_CLAMP = 50.0


@dataclass(frozen=True)
class MsLossParams:
    alpha: float = 2.0
    beta: float = 50.0
    lam: float = 0.5
    epsilon: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")


TRANSE_REL_PARAMS = MsLossParams(alpha=0.2, beta=5.0, lam=28.0, epsilon=0.1)


def default_rel_params(mode: str) -> MsLossParams:
    return TRANSE_REL_PARAMS if mode == "transe" else MsLossParams()


def default_mu(mode: str) -> float:
    return {"distmult-cos": 1.0, "transe": 0.1, "none": 0.0}[mode]


# -- similarities -------------------------------------------------------------

def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))


def _unit_rows(A):
    norms = np.linalg.norm(A, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, A / safe, 0.0), norms


def cosine_matrix(A, B=None):
    """All-pairs cosine; rows with zero norm score 0 against everything."""
    Au, _ = _unit_rows(A)
    Bu = Au if B is None else _unit_rows(B)[0]
    return Au @ Bu.T


def _unit_backward(dU, U, norms):
    safe = np.where(norms > 0, norms, 1.0)
    g = (dU - U * (dU * U).sum(axis=-1, keepdims=True)) / safe
    return np.where(norms > 0, g, 0.0)


def cosine_matrix_backward(dS, A, B=None):
    """Gradients of ``sum(dS * cosine_matrix(A, B))`` w.r.t. A (and B)."""
    Au, na = _unit_rows(A)
    if B is None:
        dAu = (dS + dS.T) @ Au
        return _unit_backward(dAu, Au, na)
    Bu, nb = _unit_rows(B)
    return _unit_backward(dS @ Bu, Au, na), _unit_backward(dS.T @ Au, Bu, nb)


def rel_similarity(e_head, M_r, e_tail) -> float:
    return cosine(np.asarray(M_r, dtype=np.float64).T @ np.asarray(e_head, dtype=np.float64), e_tail)


def transe_rel_similarity(e_head, r_vec, e_tail) -> float:
    diff = np.asarray(e_head, dtype=np.float64) + np.asarray(r_vec, dtype=np.float64) - np.asarray(e_tail, dtype=np.float64)
    return -float(np.linalg.norm(diff))


# -- labels -------------------------------------------------------------------

def pair_labels(concept_ids) -> np.ndarray:
    ids = np.asarray(concept_ids)
    return (ids[:, None] == ids[None, :]).astype(np.int8)


def rel_pair_labels(tail_ids) -> np.ndarray:
    """Tail-equality proxy: anchor i and tail j pair up iff their tails match."""
    return pair_labels(tail_ids)


# -- mining -------------------------------------------------------------------

def mine_pairs(S_row, tau_row, epsilon, anchor_index=None):
    """Hard positives and negatives for one anchor row.

    Returns ``(P, N)`` as sorted index arrays. ``anchor_index`` (if given)
    is removed from the candidates. With no positives the negative threshold
    is +inf and N is empty; with no negatives P is empty.
    """
    S_row = np.asarray(S_row, dtype=np.float64)
    tau_row = np.asarray(tau_row).astype(bool)
    cand = np.ones(S_row.shape[0], dtype=bool)
    if anchor_index is not None:
        cand[anchor_index] = False
    pos = cand & tau_row
    neg = cand & ~tau_row
    min_pos = S_row[pos].min() if pos.any() else np.inf
    max_neg = S_row[neg].max() if neg.any() else -np.inf
    N = np.flatnonzero(neg & (S_row > min_pos - epsilon))
    P = np.flatnonzero(pos & (S_row < max_neg + epsilon))
    return P, N


def mine_all(S, tau, epsilon, exclude_self=True):
    """Vectorised ``mine_pairs`` over all rows; returns boolean masks (P, N)."""
    S = np.asarray(S, dtype=np.float64)
    tau = np.asarray(tau).astype(bool)
    cand = np.ones(S.shape, dtype=bool)
    if exclude_self:
        np.fill_diagonal(cand, False)
    pos = cand & tau
    neg = cand & ~tau
    min_pos = np.where(pos, S, np.inf).min(axis=1, keepdims=True)
    max_neg = np.where(neg, S, -np.inf).max(axis=1, keepdims=True)
    N = neg & (S > min_pos - epsilon)
    P = pos & (S < max_neg + epsilon)
    return P, N


# -- MS loss ------------------------------------------------------------------

def ms_loss_from_sets(S, P, N, params: MsLossParams):
    """MS loss and dLoss/dS for fixed mined masks, averaged over rows."""
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    a = -params.alpha * (S - params.lam)
    b = params.beta * (S - params.lam)
    ea = np.where(P, np.exp(np.minimum(a, EXP_CLAMP)), 0.0)
    eb = np.where(N, np.exp(np.minimum(b, EXP_CLAMP)), 0.0)
    sa = ea.sum(axis=1, keepdims=True)
    sb = eb.sum(axis=1, keepdims=True)
    loss = float((np.log1p(sa) / params.alpha + np.log1p(sb) / params.beta).sum() / n)
    # clamped exponents are constant in S
    grad = (-ea * (a <= EXP_CLAMP) / (1.0 + sa) + eb * (b <= EXP_CLAMP) / (1.0 + sb)) / n
    return loss, grad


def ms_loss(S, tau, params: MsLossParams, exclude_self=True, sets=None):
    """Multi-similarity loss with online mining.

    Mining sets are treated as constants for the gradient. Returns
    ``(loss, dLoss/dS, (P, N))``.
    """
    S = np.asarray(S, dtype=np.float64)
    if not np.all(np.isfinite(S)):
        raise ValueError("similarity matrix contains non-finite entries")
    if S.shape != np.shape(tau):
        raise ValueError("S and tau shapes differ")
    if sets is None:
        sets = mine_all(S, tau, params.epsilon, exclude_self=exclude_self)
    loss, grad = ms_loss_from_sets(S, *sets, params)
    return loss, grad, sets


# -- total loss ---------------------------------------------------------------

@dataclass
class LossResult:
    loss: float
    loss_term: float
    loss_rel: float
    grad_emb: np.ndarray
    grad_rel_mats: np.ndarray | None
    grad_rel_vecs: np.ndarray | None
    sets: dict


def rel_similarity_matrix(heads, tails, relation_ids, mode, rel_mats=None, rel_vecs=None):
    if mode == "distmult-cos":
        U = np.einsum("kab,ka->kb", rel_mats[relation_ids], heads)
        return cosine_matrix(U, tails)
    if mode == "transe":
        D = (heads + rel_vecs[relation_ids])[:, None, :] - tails[None, :, :]
        return -np.linalg.norm(D, axis=-1)
    raise ValueError(f"no relation similarity for mode {mode!r}")


def total_loss(embeddings, concept_ids, relation_ids, mode="distmult-cos", *,
               rel_mats=None, rel_vecs=None, mu=None,
               term_params: MsLossParams | None = None,
               rel_params: MsLossParams | None = None, sets=None) -> LossResult:
    """Term-term MS loss plus ``mu`` times the term-relation-term MS loss.

    ``embeddings`` is (2k, l), heads first. ``concept_ids`` has length 2k and
    ``relation_ids`` length k. Passing ``sets`` from a previous result reuses
    its mined pairs instead of mining again.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "distmult-cos" and rel_mats is None:
        raise ValueError("distmult-cos mode needs rel_mats")
    if mode == "transe" and rel_vecs is None:
        raise ValueError("transe mode needs rel_vecs")
    term_params = term_params or MsLossParams()
    rel_params = rel_params or default_rel_params(mode)
    mu = default_mu(mode) if mu is None else mu
    if mode == "none":
        mu = 0.0

    E = np.asarray(embeddings, dtype=np.float64)
    n2 = E.shape[0]
    if n2 % 2 or len(concept_ids) != n2:
        raise ValueError("need 2k embeddings with one concept id each")
    k = n2 // 2
    relation_ids = np.asarray(relation_ids, dtype=np.int64)
    if relation_ids.shape != (k,):
        raise ValueError("need one relation id per triplet")
    sets = dict(sets or {})

    S = cosine_matrix(E)
    tau = pair_labels(concept_ids)
    loss_term, dS, sets["term"] = ms_loss(S, tau, term_params, exclude_self=True, sets=sets.get("term"))
    grad_emb = cosine_matrix_backward(dS, E)

    g_mats = np.zeros_like(rel_mats, dtype=np.float64) if rel_mats is not None else None
    g_vecs = np.zeros_like(rel_vecs, dtype=np.float64) if rel_vecs is not None else None
    loss_rel = 0.0
    if mu != 0.0:
        heads, tails = E[:k], E[k:]
        tau_rel = rel_pair_labels(list(concept_ids[k:]))
        if mode == "distmult-cos":
            M = np.asarray(rel_mats, dtype=np.float64)
            Mi = M[relation_ids]
            U = np.einsum("kab,ka->kb", Mi, heads)
            S_rel = cosine_matrix(U, tails)
            loss_rel, dR, sets["rel"] = ms_loss(S_rel, tau_rel, rel_params, exclude_self=False,
                                                sets=sets.get("rel"))
            dU, dT = cosine_matrix_backward(mu * dR, U, tails)
            grad_emb[:k] += np.einsum("kab,kb->ka", Mi, dU)
            grad_emb[k:] += dT
            np.add.at(g_mats, relation_ids, heads[:, :, None] * dU[:, None, :])
        else:
            r = np.asarray(rel_vecs, dtype=np.float64)
            D = (heads + r[relation_ids])[:, None, :] - tails[None, :, :]
            norms = np.linalg.norm(D, axis=-1)
            S_rel = -norms
            loss_rel, dR, sets["rel"] = ms_loss(S_rel, tau_rel, rel_params, exclude_self=False,
                                                sets=sets.get("rel"))
            unit = np.where(norms[..., None] > 0, D / np.where(norms > 0, norms, 1.0)[..., None], 0.0)
            gD = -(mu * dR)[..., None] * unit
            dU = gD.sum(axis=1)
            grad_emb[:k] += dU
            grad_emb[k:] -= gD.sum(axis=0)
            np.add.at(g_vecs, relation_ids, dU)

    return LossResult(loss_term + mu * loss_rel, loss_term, loss_rel, grad_emb, g_mats, g_vecs, sets)
