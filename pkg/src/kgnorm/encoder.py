"""Single-block attention encoder with hand-written backward pass.

Layout of one forward pass over a (B, L) batch of token ids::

    X  = token_emb[ids] + pos_emb[:L]
    A  = softmax(X W_Q (X W_K)^T / sqrt(d), pad keys masked)
    Y  = X + (A X W_V) W_O
    Z  = Y + tanh(Y W_1 + b_1) W_2 + b_2
    H  = Z W_out + b_out

There is no dropout and no normalization layer, so the forward map is a
deterministic smooth function of the parameters and finite differences
agree with the analytic gradient to high precision in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tokenizer import TokenSequence, batch_arrays

FIELDS = (
    "token_emb", "pos_emb",
    "w_q", "w_k", "w_v", "w_o",
    "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
    "out_w", "out_b",
    "rel_mats", "rel_vecs",
)
MAGIC = b"KGE1"
_PRECISION = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}


@dataclass(frozen=True)
class EncoderDims:
    vocab_size: int
    d_model: int
    d_ff: int
    d_out: int
    max_len: int
    n_relations: int

    def shapes(self) -> dict[str, tuple[int, ...]]:
        V, d, f, l, L, R = (self.vocab_size, self.d_model, self.d_ff,
                            self.d_out, self.max_len, self.n_relations)
        return {
            "token_emb": (V, d), "pos_emb": (L, d),
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
            "ffn_w1": (d, f), "ffn_b1": (f,), "ffn_w2": (f, d), "ffn_b2": (d,),
            "out_w": (d, l), "out_b": (l,),
            "rel_mats": (R, l, l), "rel_vecs": (R, l),
        }


class EncoderParams:
    """All trainable tensors, in the fixed checkpoint field order."""

    def __init__(self, dims: EncoderDims, tensors: dict[str, np.ndarray], relation_labels=()):
        self.dims = dims
        self.relation_labels = list(relation_labels)
        if len(self.relation_labels) != dims.n_relations:
            raise ValueError("one relation label per relation matrix required")
        shapes = dims.shapes()
        dtypes = {t.dtype for t in tensors.values()}
        if len(dtypes) != 1 or next(iter(dtypes)) not in _PRECISION:
            raise ValueError("tensors must share one float32/float64 dtype")
        self.tensors: dict[str, np.ndarray] = {}
        for name in FIELDS:
            arr = tensors[name]
            if arr.shape != shapes[name]:
                raise ValueError(f"{name}: expected shape {shapes[name]}, got {arr.shape}")
            self.tensors[name] = arr

    @property
    def dtype(self):
        return self.tensors["token_emb"].dtype

    def __getitem__(self, name) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def items(self):
        return ((n, self.tensors[n]) for n in FIELDS)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.dims, {n: a.copy() for n, a in self.items()}, self.relation_labels)

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.dims, {n: a.astype(dtype) for n, a in self.items()}, self.relation_labels)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(a) for n, a in self.items()}

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.items())

    def equals(self, other: "EncoderParams") -> bool:
        """Bitwise equality of every tensor plus metadata."""
        return (self.dims == other.dims and self.relation_labels == other.relation_labels
                and self.dtype == other.dtype
                and all(np.array_equal(a, other[n]) and a.tobytes() == other[n].tobytes()
                        for n, a in self.items()))


def init_params(dims: EncoderDims, rng: np.random.Generator, relation_labels=None,
                dtype=np.float32, std=0.02, rel_noise=0.01) -> EncoderParams:
    if relation_labels is None:
        relation_labels = [f"rel{i}" for i in range(dims.n_relations)]
    shapes = dims.shapes()
    t = {}
    for name in FIELDS:
        shape = shapes[name]
        if name in ("ffn_b1", "ffn_b2", "out_b"):
            t[name] = np.zeros(shape)
        elif name == "rel_mats":
            t[name] = np.eye(dims.d_out)[None] + rng.normal(0.0, rel_noise, shape)
        else:
            t[name] = rng.normal(0.0, std, shape)
    return EncoderParams(dims, {n: a.astype(dtype) for n, a in t.items()}, relation_labels)


@dataclass
class HiddenStates:
    H: np.ndarray
    mask: np.ndarray


class ForwardCache:
    __slots__ = ("ids", "mask", "X", "Q", "K", "V", "A", "C", "Y", "G", "Z")


def _as_batch(tokens):
    if isinstance(tokens, TokenSequence):
        ids, mask = batch_arrays([tokens])
        return ids, mask, True
    if isinstance(tokens, (list, tuple)) and tokens and isinstance(tokens[0], TokenSequence):
        ids, mask = batch_arrays(tokens)
        return ids, mask, False
    ids, mask = tokens
    ids = np.asarray(ids)
    mask = np.asarray(mask, dtype=bool)
    if ids.ndim == 1:
        return ids[None], mask[None], True
    return ids, mask, False


def _forward(params: EncoderParams, ids: np.ndarray, mask: np.ndarray):
    p = params.tensors
    B, L = ids.shape
    if L > params.dims.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {params.dims.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= params.dims.vocab_size):
        raise ValueError(f"token id out of range for vocabulary of size {params.dims.vocab_size}")
    c = ForwardCache()
    c.ids, c.mask = ids, mask
    scale = 1.0 / np.sqrt(params.dims.d_model)
    X = p["token_emb"][ids] + p["pos_emb"][:L]
    Q, K, V = X @ p["w_q"], X @ p["w_k"], X @ p["w_v"]
    scores = (Q @ K.transpose(0, 2, 1)) * scale
    scores = np.where(mask[:, None, :], scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    A = np.exp(scores)
    A /= A.sum(axis=-1, keepdims=True)
    C = A @ V
    Y = X + C @ p["w_o"]
    G = np.tanh(Y @ p["ffn_w1"] + p["ffn_b1"])
    Z = Y + G @ p["ffn_w2"] + p["ffn_b2"]
    H = Z @ p["out_w"] + p["out_b"]
    c.X, c.Q, c.K, c.V, c.A, c.C, c.Y, c.G, c.Z = X, Q, K, V, A, C, Y, G, Z
    return H, c


def forward(params: EncoderParams, tokens) -> HiddenStates:
    """Per-token hidden states for one TokenSequence or a batch.

    ``tokens`` may be a TokenSequence, a list of them, or an ``(ids, mask)``
    pair of arrays.
    """
    ids, mask, single = _as_batch(tokens)
    H, _ = _forward(params, ids, mask)
    return HiddenStates(H[0] if single else H, mask[0] if single else mask)


def forward_with_cache(params: EncoderParams, ids: np.ndarray, mask: np.ndarray):
    return _forward(params, ids, mask)


def cls_pool(hidden: HiddenStates) -> np.ndarray:
    return hidden.H[..., 0, :].copy()


def avg_pool(hidden: HiddenStates) -> np.ndarray:
    m = hidden.mask.astype(hidden.H.dtype)
    return (hidden.H * m[..., None]).sum(axis=-2) / m.sum(axis=-1, keepdims=True)


def pool(hidden: HiddenStates, pooling: str) -> np.ndarray:
    if pooling == "cls":
        return cls_pool(hidden)
    if pooling == "avg":
        return avg_pool(hidden)
    raise ValueError(f"unknown pooling {pooling!r}")


def pool_backward(grad_e: np.ndarray, mask: np.ndarray, pooling: str, dtype) -> np.ndarray:
    """Scatter a gradient w.r.t. pooled embeddings back onto (B, L, l) hidden states."""
    B, L = mask.shape
    dH = np.zeros((B, L, grad_e.shape[-1]), dtype=dtype)
    if pooling == "cls":
        dH[:, 0, :] = grad_e
    elif pooling == "avg":
        m = mask.astype(dtype)
        dH[:] = (m / m.sum(axis=1, keepdims=True))[:, :, None] * grad_e[:, None, :]
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    return dH


def _backward(params: EncoderParams, c: ForwardCache, dH: np.ndarray) -> dict[str, np.ndarray]:
    p = params.tensors
    g = params.zeros_like()
    scale = 1.0 / np.sqrt(params.dims.d_model)

    def flat(a):
        return a.reshape(-1, a.shape[-1])

    g["out_w"] = flat(c.Z).T @ flat(dH)
    g["out_b"] = dH.sum(axis=(0, 1))
    dZ = dH @ p["out_w"].T

    g["ffn_w2"] = flat(c.G).T @ flat(dZ)
    g["ffn_b2"] = dZ.sum(axis=(0, 1))
    dpre = (dZ @ p["ffn_w2"].T) * (1.0 - c.G * c.G)
    g["ffn_w1"] = flat(c.Y).T @ flat(dpre)
    g["ffn_b1"] = dpre.sum(axis=(0, 1))
    dY = dZ + dpre @ p["ffn_w1"].T

    g["w_o"] = flat(c.C).T @ flat(dY)
    dC = dY @ p["w_o"].T
    dA = dC @ c.V.transpose(0, 2, 1)
    dV = c.A.transpose(0, 2, 1) @ dC
    dS = c.A * (dA - (dA * c.A).sum(axis=-1, keepdims=True)) * scale
    dQ = dS @ c.K
    dK = dS.transpose(0, 2, 1) @ c.Q

    Xf = flat(c.X)
    g["w_q"] = Xf.T @ flat(dQ)
    g["w_k"] = Xf.T @ flat(dK)
    g["w_v"] = Xf.T @ flat(dV)
    dX = dY + dQ @ p["w_q"].T + dK @ p["w_k"].T + dV @ p["w_v"].T

    L = c.ids.shape[1]
    g["pos_emb"][:L] = dX.sum(axis=0)
    np.add.at(g["token_emb"], c.ids.reshape(-1), flat(dX))
    return g


def backward(params: EncoderParams, tokens, upstream_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of ``sum(upstream_grad * H)`` w.r.t. every encoder tensor.

    ``rel_mats`` and ``rel_vecs`` are not touched by the encoder and come
    back as zeros.
    """
    ids, mask, single = _as_batch(tokens)
    dH = np.asarray(upstream_grad, dtype=params.dtype)
    if single and dH.ndim == 2:
        dH = dH[None]
    expected = ids.shape + (params.dims.d_out,)
    if dH.shape != expected:
        raise ValueError(f"upstream gradient shape {dH.shape} does not match hidden states {expected}")
    _, cache = _forward(params, ids, mask)
    return _backward(params, cache, dH)


def backward_from_cache(params: EncoderParams, cache: ForwardCache, dH: np.ndarray):
    return _backward(params, cache, dH)


def trim_batch(ids: np.ndarray, mask: np.ndarray):
    """Drop trailing columns that are padding for every row.

    Pad keys are masked out of attention and pad rows are never pooled, so
    pooled embeddings and their gradients are unchanged by trimming.
    """
    width = max(int(mask.sum(axis=1).max()), 1)
    return ids[:, :width], mask[:, :width]


def encode(params: EncoderParams, seqs, pooling="cls", batch_size=512) -> np.ndarray:
    """Pooled embeddings for a list of TokenSequences."""
    out = []
    for start in range(0, len(seqs), batch_size):
        ids, mask = trim_batch(*batch_arrays(seqs[start:start + batch_size]))
        H, _ = _forward(params, ids, mask)
        out.append(pool(HiddenStates(H, mask), pooling))
    if not out:
        return np.zeros((0, params.dims.d_out), dtype=params.dtype)
    return np.concatenate(out, axis=0)


# -- checkpoint I/O ---------------------------------------------------------

def save_checkpoint(params: EncoderParams, path) -> Path:
    path = Path(path)
    dims = params.dims
    header = struct.pack("<6IB", dims.vocab_size, dims.d_model, dims.d_ff, dims.d_out,
                         dims.max_len, dims.n_relations, _PRECISION[params.dtype])
    labels = b"".join(struct.pack("<I", len(b)) + b
                      for b in (lab.encode("utf-8") for lab in params.relation_labels))
    dt = np.dtype(params.dtype).newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(MAGIC + header + labels)
        for _, arr in params.items():
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes(order="C"))
    return path


def load_checkpoint(path) -> EncoderParams:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a KGE1 checkpoint")
    off = 4
    V, d, f, l, L, R, prec = struct.unpack_from("<6IB", data, off)
    off += struct.calcsize("<6IB")
    if prec not in (4, 8):
        raise ValueError(f"{path}: unknown precision tag {prec}")
    labels = []
    for _ in range(R):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        labels.append(data[off:off + n].decode("utf-8"))
        off += n
    dims = EncoderDims(V, d, f, l, L, R)
    dt = np.dtype("<f4" if prec == 4 else "<f8")
    tensors = {}
    for name, shape in dims.shapes().items():
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="))
        off += count * dt.itemsize
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return EncoderParams(dims, tensors, labels)
