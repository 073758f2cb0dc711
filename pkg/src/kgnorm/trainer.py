"""Training loop, AdamW with linear warmup/decay, and gradient checking."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .contrastive import MODES, MsLossParams, default_mu, default_rel_params, total_loss
from .kg_store import load_concepts, load_relations
from .sampler import BatchSampler, check_batch_shape
from .tokenizer import TokenCache, batch_arrays, load_vocab

logger = logging.getLogger(__name__)


# -- schedule and optimizer ----------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    lr_peak: float
    warmup_steps: int
    total_steps: int


def lr_at(t: int, schedule: Schedule) -> float:
    """Linear warmup to ``lr_peak`` then linear decay to zero at ``total_steps``."""
    peak, warm, total = schedule.lr_peak, schedule.warmup_steps, schedule.total_steps
    if t < 0:
        raise ValueError("step must be non-negative")
    if t > total:
        return 0.0
    if t <= warm:
        return peak * t / warm if warm > 0 else peak
    if total == warm:
        return 0.0
    return peak * (total - t) / (total - warm)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, tensors: dict, **kw) -> "OptimizerState":
        return cls({n: np.zeros_like(a) for n, a in tensors.items()},
                   {n: np.zeros_like(a) for n, a in tensors.items()}, **kw)


def adamw_step(tensors: dict, grads: dict, state: OptimizerState, lr: float, names=None):
    """One in-place AdamW update with decoupled weight decay.

    Decay is applied first as ``p -= lr * wd * p``; the moment update uses
    bias-corrected first and second moments.
    """
    names = list(tensors) if names is None else names
    for n in names:
        if not np.all(np.isfinite(grads[n])):
            raise FloatingPointError(f"non-finite gradient in tensor {n!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for n in names:
        p, g = tensors[n], grads[n]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {n!r}")
        m, v = state.m[n], state.v[n]
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return tensors, state


# -- configuration -------------------------------------------------------------

@dataclass
class TrainConfig:
    concepts: str = ""
    relations: str = ""
    vocab: str = ""
    out_dir: str = "run"
    seed: int = 0
    k: int = 32
    m: int = 4
    d_model: int = 64
    d_ff: int = 128
    d_out: int = 64
    max_len: int = 32
    steps: int = 2000
    warmup: int = 200
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_accum: int = 8
    mode: str = "distmult-cos"
    mu: float | None = None
    alpha: float = 2.0
    beta: float = 50.0
    lam: float = 0.5
    epsilon: float = 0.1
    rel_alpha: float | None = None
    rel_beta: float | None = None
    rel_lam: float | None = None
    rel_epsilon: float | None = None
    pooling: str = "cls"
    init_std: float = 0.02
    precision: str = "float32"
    log_every: int = 10
    save_every: int = 0

    def validate(self):
        check_batch_shape(self.k, self.m)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.pooling not in ("cls", "avg"):
            raise ValueError("pooling must be cls or avg")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        for name in ("steps", "warmup", "grad_accum", "max_len", "d_model", "d_ff", "d_out"):
            if getattr(self, name) < (0 if name in ("steps", "warmup") else 1):
                raise ValueError(f"{name} out of range")
        if self.max_len < 3:
            raise ValueError("max_len must be at least 3")
        if self.mu is not None and self.mu < 0:
            raise ValueError("mu must be non-negative")
        return self

    @property
    def effective_mu(self) -> float:
        return default_mu(self.mode) if self.mu is None else float(self.mu)

    def term_params(self) -> MsLossParams:
        return MsLossParams(self.alpha, self.beta, self.lam, self.epsilon)

    def rel_params(self) -> MsLossParams:
        d = default_rel_params(self.mode)
        if self.mode == "distmult-cos":
            d = self.term_params()
        pick = lambda v, dv: dv if v is None else v  # noqa: E731
        return MsLossParams(pick(self.rel_alpha, d.alpha), pick(self.rel_beta, d.beta),
                            pick(self.rel_lam, d.lam), pick(self.rel_epsilon, d.epsilon))

    def schedule(self) -> Schedule:
        return Schedule(self.lr, min(self.warmup, self.steps), self.steps)

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


def _coerce(f: dataclasses.Field, raw: str):
    text = raw.strip()
    kind = str(f.type)
    if "None" in kind and text.lower() in ("none", ""):
        return None
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return float(text)
    return text


def config_from_mapping(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    cfg = dataclasses.replace(base) if base else TrainConfig()
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for key, raw in values.items():
        name = key.strip().replace("-", "_")
        if name not in fields:
            raise ValueError(f"unknown config key {key!r}")
        setattr(cfg, name, _coerce(fields[name], str(raw)) if isinstance(raw, str) else raw)
    return cfg


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Read a flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return config_from_mapping(values, base)


def dump_config(cfg: TrainConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(cfg):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path
    params: enc.EncoderParams
    history: np.ndarray  # rows: step, lr, loss, loss_term, loss_rel
    seconds: float = 0.0
    log_path: Path | None = None


def batch_gradients(params: enc.EncoderParams, batch, cfg: TrainConfig, scale=1.0):
    """Loss and parameter gradients for one sampled batch."""
    ids, mask = enc.trim_batch(*batch_arrays(batch.sequences))
    H, cache = enc.forward_with_cache(params, ids, mask)
    E = enc.pool(enc.HiddenStates(H, mask), cfg.pooling)
    res = total_loss(E, batch.concept_ids, batch.relation_ids, cfg.mode,
                     rel_mats=params["rel_mats"], rel_vecs=params["rel_vecs"],
                     mu=cfg.effective_mu, term_params=cfg.term_params(),
                     rel_params=cfg.rel_params())
    dH = enc.pool_backward((res.grad_emb * scale).astype(params.dtype), mask, cfg.pooling, params.dtype)
    grads = enc.backward_from_cache(params, cache, dH)
    if res.grad_rel_mats is not None:
        grads["rel_mats"] += (res.grad_rel_mats * scale).astype(params.dtype)
    if res.grad_rel_vecs is not None:
        grads["rel_vecs"] += (res.grad_rel_vecs * scale).astype(params.dtype)
    return res, grads


def initial_params(cfg: TrainConfig, vocab_size: int, relation_labels) -> enc.EncoderParams:
    dims = enc.EncoderDims(vocab_size, cfg.d_model, cfg.d_ff, cfg.d_out, cfg.max_len, len(relation_labels))
    rng = np.random.default_rng([cfg.seed, 1])
    return enc.init_params(dims, rng, relation_labels, dtype=cfg.dtype, std=cfg.init_std)


def train(cfg: TrainConfig, checkpoint_name="model.kge", progress=None) -> TrainResult:
    cfg.validate()
    t0 = time.perf_counter()
    dictionary = load_concepts(cfg.concepts)
    store = load_relations(cfg.relations, dictionary)
    vocab = load_vocab(cfg.vocab)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    params = initial_params(cfg, len(vocab), store.labels)
    sampler = BatchSampler(dictionary, store, TokenCache(vocab, cfg.max_len), cfg.k, cfg.m,
                           np.random.default_rng([cfg.seed, 2]))
    state = OptimizerState.for_params(params.tensors, beta1=cfg.beta1, beta2=cfg.beta2,
                                      eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    sched = cfg.schedule()
    history = np.zeros((cfg.steps, 5))
    log_path = out / "train_log.tsv"
    with open(log_path, "w", newline="") as fh:
        log = csv.writer(fh, delimiter="\t", lineterminator="\n")
        log.writerow(["step", "lr", "loss", "loss_term", "loss_rel"])
        for step in range(1, cfg.steps + 1):
            grads = params.zeros_like()
            losses = np.zeros(3)
            for _ in range(cfg.grad_accum):
                res, g = batch_gradients(params, sampler.sample(), cfg, scale=1.0 / cfg.grad_accum)
                for n in grads:
                    grads[n] += g[n]
                losses += (res.loss, res.loss_term, res.loss_rel)
            losses /= cfg.grad_accum
            lr = lr_at(step, sched)
            adamw_step(params.tensors, grads, state, lr)
            history[step - 1] = (step, lr, *losses)
            if step % cfg.log_every == 0 or step == cfg.steps:
                log.writerow([step, f"{lr:.6g}", *(f"{x:.6f}" for x in losses)])
                logger.info("step %d lr %.3g loss %.4f (term %.4f rel %.4f)", step, lr, *losses)
                if progress:
                    progress(step, losses)
            if cfg.save_every and step % cfg.save_every == 0 and step != cfg.steps:
                enc.save_checkpoint(params, out / f"step{step:06d}.kge")
    ckpt = enc.save_checkpoint(params, out / checkpoint_name)
    return TrainResult(ckpt, params, history, time.perf_counter() - t0, log_path)


# -- gradient checking ---------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    n_coords: int
    tolerance: float
    flagged: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.flagged

    def lines(self):
        yield f"coords\t{self.n_coords}"
        for name, err in self.per_tensor.items():
            mark = "FAIL" if name in self.flagged else "ok"
            yield f"{name}\t{err:.3e}\t{mark}"
        yield f"max_rel_error\t{self.max_rel_error:.3e}"


def rel_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    """|a - n| / max(|a|, |n|, floor); 0 when both are exactly zero."""
    diff = abs(analytic - numeric)
    if diff == 0.0:
        return 0.0
    return diff / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(loss_fn, tensors: dict, grads: dict, coords, h=1e-5,
                            tolerance=1e-4, floor=1e-8) -> GradCheckReport:
    """Compare analytic gradients with central differences at given coordinates.

    ``coords`` is a sequence of ``(tensor_name, flat_index)``. Each tensor is
    perturbed in place and restored exactly afterwards.
    """
    per: dict[str, float] = {}
    for name, idx in coords:
        arr = tensors[name]
        flat = arr.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        f_plus = loss_fn()
        flat[idx] = orig - h
        f_minus = loss_fn()
        flat[idx] = orig
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = float(grads[name].reshape(-1)[idx])
        per[name] = max(per.get(name, 0.0), rel_error(analytic, numeric, floor))
    flagged = [n for n, e in per.items() if e > tolerance]
    worst = max(per.values()) if per else 0.0
    return GradCheckReport(worst, per, len(coords), tolerance, flagged)


@dataclass
class GradCheckConfig:
    mode: str = "distmult-cos"
    k: int = 8
    m: int = 2
    d_model: int = 16
    d_ff: int = 24
    d_out: int = 16
    max_len: int = 8
    vocab_size: int = 30
    n_relations: int = 3
    n_coords: int = 240
    h: float = 1e-5
    tolerance: float = 1e-4
    init_std: float = 0.3
    pooling: str = "cls"
    seed: int = 0


def _random_batch(cfg: GradCheckConfig, rng):
    """Token ids, masks and labels shaped like a sampled training batch."""
    k, m = cfg.k, cfg.m
    n_distinct = k // m
    heads = rng.choice(np.arange(100, 200), size=n_distinct, replace=False)
    tails = rng.choice(np.arange(200, 300), size=n_distinct, replace=False)
    rels = np.arange(n_distinct) % cfg.n_relations
    heads, tails, rels = np.repeat(heads, m), np.repeat(tails, m), np.repeat(rels, m)
    concept_ids = [f"C{c}" for c in np.concatenate([heads, tails])]
    lengths = rng.integers(3, cfg.max_len + 1, size=2 * k)
    ids = np.zeros((2 * k, cfg.max_len), dtype=np.int64)
    mask = np.zeros((2 * k, cfg.max_len), dtype=bool)
    for i, n in enumerate(lengths):
        ids[i, 0] = 2
        ids[i, 1:n - 1] = rng.integers(4, cfg.vocab_size, size=n - 2)
        ids[i, n - 1] = 3
        mask[i, :n] = True
    return ids, mask, concept_ids, rels


def _sample_coords(params: enc.EncoderParams, ids, rel_ids, n_coords, rng):
    """Spread coordinates over every tensor; embedding and relation rows are
    drawn from those the batch actually uses, plus one unused token row."""
    names = [n for n, _ in params.items()]
    per = max(1, n_coords // len(names))
    used_tokens = np.unique(ids)
    unused = np.setdiff1d(np.arange(params.dims.vocab_size), used_tokens)
    coords = []
    for name in names:
        arr = params[name]
        if name == "token_emb":
            rows = rng.choice(used_tokens, size=per)
            cols = rng.integers(arr.shape[1], size=per)
            coords += [(name, int(r * arr.shape[1] + c)) for r, c in zip(rows, cols)]
            if unused.size:
                coords.append((name, int(unused[0] * arr.shape[1])))
        elif name in ("rel_mats", "rel_vecs"):
            per_rel = max(1, per // arr.shape[0])
            row = int(np.prod(arr.shape[1:]))
            for r in range(arr.shape[0]):
                coords += [(name, int(r * row + j)) for j in rng.integers(row, size=per_rel)]
        else:
            coords += [(name, int(j)) for j in rng.integers(arr.size, size=per)]
    return coords


def grad_check(cfg: GradCheckConfig | None = None, corrupt: dict | None = None) -> GradCheckReport:
    """Finite-difference check of the full encoder + total-loss gradient.

    Runs in float64 on a random batch. Mined pair sets from the unperturbed
    point are held fixed while differencing, matching the gradient's
    treatment of mining as constant. ``corrupt`` maps tensor names to factors
    applied to the analytic gradient, for fault-injection tests.
    """
    cfg = cfg or GradCheckConfig()
    rng = np.random.default_rng(cfg.seed)
    dims = enc.EncoderDims(cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.d_out, cfg.max_len, cfg.n_relations)
    params = enc.init_params(dims, rng, dtype=np.float64, std=cfg.init_std, rel_noise=cfg.init_std)
    ids, mask, concept_ids, rel_ids = _random_batch(cfg, rng)
    mu = default_mu(cfg.mode)

    def run(sets=None):
        H, cache = enc.forward_with_cache(params, ids, mask)
        E = enc.pool(enc.HiddenStates(H, mask), cfg.pooling)
        res = total_loss(E, concept_ids, rel_ids, cfg.mode, rel_mats=params["rel_mats"],
                         rel_vecs=params["rel_vecs"], mu=mu, sets=sets)
        return res, cache

    res, cache = run()
    dH = enc.pool_backward(res.grad_emb, mask, cfg.pooling, np.float64)
    grads = enc.backward_from_cache(params, cache, dH)
    grads["rel_mats"] += res.grad_rel_mats
    grads["rel_vecs"] += res.grad_rel_vecs
    for name, factor in (corrupt or {}).items():
        grads[name] = grads[name] * factor

    frozen = res.sets
    coords = _sample_coords(params, ids, rel_ids, cfg.n_coords, rng)
    return finite_difference_check(lambda: run(frozen)[0].loss, params.tensors, grads, coords,
                                   h=cfg.h, tolerance=cfg.tolerance)
