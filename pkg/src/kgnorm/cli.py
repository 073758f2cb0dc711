"""Command-line entry point.

Results go to stdout as tab-separated rows; ``--out`` also writes them to a
file. Exit status is 0 on success, 1 for invalid input or arguments, and 2
for failures during computation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import metrics as mt
from . import normalizer as nz
from . import report, synthetic, trainer
from .kg_store import KGFormatError, load_concepts, load_relations
from .tokenizer import build_vocab, load_vocab

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


class Output:
    def __init__(self, path=None):
        self.rows: list[str] = []
        self.path = path

    def row(self, *fields):
        self.rows.append("\t".join(_fmt(f) for f in fields))

    def flush(self):
        text = "".join(r + "\n" for r in self.rows)
        sys.stdout.write(text)
        if self.path:
            Path(self.path).parent.mkdir(parents=True, exist_ok=True)
            Path(self.path).write_text(text, encoding="utf-8")


# -- helpers ----------------------------------------------------------------

def _positive(kind):
    def conv(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return conv


def _int_list(text):
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be >= 1")
    return vals


def _load_model(args):
    params = enc.load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    nz.check_vocab(params, vocab)
    return params, vocab


def _normalizer(args):
    params, vocab = _load_model(args)
    if args.index:
        index = nz.EmbeddingIndex.load(args.index)
    elif args.concepts:
        index = nz.build_index(load_concepts(args.concepts), params, vocab, args.pooling)
    else:
        raise UsageError("either --index or --concepts is required")
    return nz.Normalizer(index, params, vocab)


# -- subcommands --------------------------------------------------------------

def cmd_ingest_check(args, out):
    d = load_concepts(args.concepts)
    out.row("concepts", len(d))
    out.row("terms", d.n_terms())
    out.row("languages", ",".join(sorted({t.language for c in d for t in c.terms})))
    out.row("semantic_types", len({t for c in d for t in c.semantic_types}))
    if args.relations:
        store = load_relations(args.relations, d)
        out.row("triplets", len(store))
        out.row("relation_labels", len(store.labels))
        out.row("dropped", store.dropped)


def cmd_build_vocab(args, out):
    d = load_concepts(args.concepts)
    vocab = build_vocab((t.surface for c in d for t in c.terms), args.min_count, args.max_ngram, args.max_size)
    vocab.save(args.vocab_out)
    out.row("vocab", args.vocab_out)
    out.row("size", len(vocab))


TRAIN_FLAGS = ("k", "m", "d_model", "d_ff", "d_out", "max_len", "steps", "warmup", "lr", "weight_decay",
               "grad_accum", "mode", "mu", "alpha", "beta", "lam", "epsilon", "rel_alpha", "rel_beta",
               "rel_lam", "rel_epsilon", "pooling", "precision", "log_every", "save_every", "init_std")


def cmd_train(args, out):
    cfg = trainer.load_config(args.config) if args.config else trainer.TrainConfig()
    overrides = {"seed": args.seed, "out_dir": args.out_dir}
    for name in ("concepts", "relations", "vocab"):
        if getattr(args, name):
            overrides[name] = getattr(args, name)
    for name in TRAIN_FLAGS:
        v = getattr(args, name)
        if v is not None:
            overrides[name] = v
    cfg = trainer.config_from_mapping(overrides, cfg)
    for name in ("concepts", "relations", "vocab"):
        if not getattr(cfg, name):
            raise UsageError(f"train needs --{name} (or {name} in the config file)")
    cfg.validate()
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    trainer.dump_config(cfg, Path(cfg.out_dir) / "config.txt")
    res = trainer.train(cfg, checkpoint_name=args.checkpoint_name)
    out.row("checkpoint", res.checkpoint)
    out.row("log", res.log_path)
    if cfg.steps:
        tail = res.history[-min(20, cfg.steps):, 2]
        out.row("final_loss", float(tail.mean()))
        if args.figures:
            out.row("figure", report.plot_training_curve(res.history, Path(args.figures) / "training_curve.png"))


def cmd_gradcheck(args, out):
    cfg = trainer.GradCheckConfig(mode=args.mode, k=args.k, m=args.m, d_model=args.dim, d_ff=args.dim * 2,
                                  d_out=args.dim, n_coords=args.coords, seed=args.seed, h=args.step,
                                  tolerance=args.tolerance, pooling=args.pooling)
    rep = trainer.grad_check(cfg)
    for line in rep.lines():
        out.row(line)
    if not rep.passed:
        out.flush()
        out.rows.clear()
        raise FloatingPointError("gradient check failed for: " + ", ".join(rep.flagged))


def cmd_embed(args, out):
    params, vocab = _load_model(args)
    index = nz.build_index(load_concepts(args.concepts), params, vocab, args.pooling)
    index.save(args.index_out)
    out.row("index", args.index_out)
    out.row("rows", len(index))
    out.row("concepts", index.n_concepts)


def cmd_normalize(args, out):
    norm = _normalizer(args)
    queries = list(args.query or [])
    if args.queries:
        queries += [ln.strip() for ln in Path(args.queries).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not queries:
        raise UsageError("normalize needs --query or --queries")
    many = len(queries) > 1
    for q in queries:
        for hit in norm.top_k(q, args.top):
            fields = (hit.concept_id, hit.term, hit.score)
            out.row(*((q,) + fields if many else fields))


def cmd_eval_acc(args, out):
    norm = _normalizer(args)
    gold = nz.read_gold(args.gold)
    acc = nz.eval_acc_at_k(norm, gold, args.ks)
    out.row("k", "accuracy")
    for k, a in acc.items():
        out.row(f"acc@{k}", a)
    if args.figures:
        report.plot_accuracy(acc, Path(args.figures) / "accuracy.png")


def cmd_eval_f1(args, out):
    norm = _normalizer(args)
    res = nz.eval_f1_one_cui(norm, nz.read_gold(args.gold))
    out.row("precision", res.precision)
    out.row("recall", res.recall)
    out.row("f1", res.f1)


def cmd_eval_mcsm(args, out):
    params, vocab = _load_model(args)
    d = load_concepts(args.concepts)
    _, vecs = mt.concept_embeddings(d, params, vocab, args.pooling, args.concept_repr)
    type_sets = [d[c].semantic_types for c in d.ids]
    types = args.types.split(",") if args.types else None
    scores = mt.mcsm_all(vecs, type_sets, args.k, types)
    rand = mt.random_mcsm(type_sets, args.k, vecs.shape[1], args.random_draws, args.seed, types)
    bound = mt.mcsm_bound(args.k)
    out.row("type", "mcsm", "random", "bound")
    for t in scores:
        out.row(t, scores[t], rand[t], bound)
    if args.figures:
        report.plot_mcsm(scores, Path(args.figures) / "mcsm.png", bound, rand)


def cmd_eval_relcls(args, out):
    params, vocab = _load_model(args)
    d = load_concepts(args.concepts)
    pairs = mt.read_probe_pairs(args.pairs)
    cfg = mt.ProbeConfig(epochs=args.epochs, seed=args.seed)
    if args.lr is not None:
        cfg.lr = args.lr
    rep = mt.relation_probe(d, pairs, params, vocab, args.mode, cfg, args.pooling)
    out.row("mode", rep.mode)
    out.row("train_accuracy", rep.train_accuracy)
    out.row("test_accuracy", rep.test_accuracy)
    out.row("n_train", rep.n_train)
    out.row("n_test", rep.n_test)


def cmd_export(args, out):
    params, vocab = _load_model(args)
    index = nz.build_index(load_concepts(args.concepts), params, vocab, args.pooling)
    for cid, term, row in zip(index.concept_ids, index.terms, index.rows):
        out.row(cid, term, ",".join(f"{x:.6g}" for x in row))


def cmd_gen_synthetic(args, out):
    kg = synthetic.generate(args.groups, args.per_group, args.synonyms, args.held_out,
                            args.tails_per_head, args.seed)
    for name, path in kg.write(args.out_dir).items():
        out.row(name, path)


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kgnorm", description="Knowledge-graph contrastive term embeddings.")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--out", help="also write the TSV result to this file")
        return sp

    def model_args(sp, concepts_required=False):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--vocab", required=True)
        sp.add_argument("--concepts", required=concepts_required)
        sp.add_argument("--pooling", choices=("cls", "avg"), default="cls")

    sp = add("ingest-check", cmd_ingest_check, "validate concept and relation files")
    sp.add_argument("--concepts", required=True)
    sp.add_argument("--relations")

    sp = add("build-vocab", cmd_build_vocab, "build a subword vocabulary from a concept file")
    sp.add_argument("--concepts", required=True)
    sp.add_argument("--vocab-out", required=True)
    sp.add_argument("--min-count", type=_positive(int), default=2)
    sp.add_argument("--max-ngram", type=_positive(int), default=4)
    sp.add_argument("--max-size", type=_positive(int))

    sp = add("train", cmd_train, "train an encoder")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--concepts")
    sp.add_argument("--relations")
    sp.add_argument("--vocab")
    sp.add_argument("--checkpoint-name", default="model.kge")
    sp.add_argument("--figures")
    for name in TRAIN_FLAGS:
        kind = {"mode": str, "pooling": str, "precision": str}.get(name)
        if kind is None:
            kind = float if name in ("lr", "weight_decay", "mu", "alpha", "beta", "lam", "epsilon", "init_std") \
                or name.startswith("rel_") else int
        sp.add_argument("--" + name.replace("_", "-"), dest=name, type=kind)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of all gradients")
    sp.add_argument("--mode", choices=("distmult-cos", "transe", "none"), default="distmult-cos")
    sp.add_argument("--k", type=_positive(int), default=8)
    sp.add_argument("--m", type=_positive(int), default=2)
    sp.add_argument("--dim", type=_positive(int), default=16)
    sp.add_argument("--coords", type=_positive(int), default=240)
    sp.add_argument("--step", type=_positive(float), default=1e-5)
    sp.add_argument("--tolerance", type=_positive(float), default=1e-4)
    sp.add_argument("--pooling", choices=("cls", "avg"), default="cls")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("embed", cmd_embed, "embed every dictionary term into an index file")
    model_args(sp, concepts_required=True)
    sp.add_argument("--index-out", required=True)

    for name, fn, help_ in (("normalize", cmd_normalize, "rank concepts for query terms"),
                            ("eval-acc", cmd_eval_acc, "acc@k against a gold file"),
                            ("eval-f1", cmd_eval_f1, "one-concept-per-term F1 against a gold file")):
        sp = add(name, fn, help_)
        model_args(sp)
        sp.add_argument("--index")
        if name == "normalize":
            sp.add_argument("--query", action="append")
            sp.add_argument("--queries")
            sp.add_argument("--top", type=_positive(int), default=1)
        else:
            sp.add_argument("--gold", required=True)
        if name == "eval-acc":
            sp.add_argument("--ks", type=_int_list, default=[1, 3])
            sp.add_argument("--figures")

    sp = add("eval-mcsm", cmd_eval_mcsm, "semantic-type neighbourhood score")
    model_args(sp, concepts_required=True)
    sp.add_argument("--k", type=_positive(int), default=40)
    sp.add_argument("--types")
    sp.add_argument("--concept-repr", choices=("preferred", "mean"), default="preferred")
    sp.add_argument("--random-draws", type=_positive(int), default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--figures")

    sp = add("eval-relcls", cmd_eval_relcls, "relation-classification probe")
    model_args(sp, concepts_required=True)
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--mode", choices=("feature", "fine-tune"), default="feature")
    sp.add_argument("--epochs", type=_positive(int), default=50)
    sp.add_argument("--lr", type=_positive(float))
    sp.add_argument("--seed", type=int, default=0)

    sp = add("export-embeddings", cmd_export, "write CUI, term and vector for every term")
    model_args(sp, concepts_required=True)

    sp = add("gen-synthetic", cmd_gen_synthetic, "write a synthetic benchmark knowledge graph")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--groups", type=_positive(int), default=20)
    sp.add_argument("--per-group", type=_positive(int), default=5)
    sp.add_argument("--synonyms", type=_positive(int), default=4)
    sp.add_argument("--held-out", type=int, default=1)
    sp.add_argument("--tails-per-head", type=_positive(int), default=4)
    return p


INVALID = (UsageError, KGFormatError, FileNotFoundError, nz.MissingConceptError, KeyError, ValueError)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(str(e))
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Output(args.out)
    try:
        args.func(args, out)
    except INVALID as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        sys.stderr.write(f"kgnorm {args.command}: {msg}\n")
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        sys.stderr.write(f"kgnorm {args.command}: {type(e).__name__}: {e}\n")
        return EXIT_RUNTIME
    out.flush()
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
