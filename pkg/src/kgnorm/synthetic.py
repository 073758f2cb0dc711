"""Generator for a small self-consistent benchmark knowledge graph.

Concepts are arranged in ``n_groups`` groups of ``per_group`` concepts. Each
concept owns a pseudo-word name; its synonyms wrap that name in shared
filler words (head nouns, qualifiers, connectors) with varied order and
punctuation, so lexical overlap between different concepts is high while
the name itself identifies the concept. One synonym per concept is held out
as a normalization query.

Relation types are tied to the head's group ``g``:

    g % 4 == 0   same_group     tail in group g
    g % 4 == 1   next_group     tail in group g + 1
    g % 4 == 2   shares_prefix  tail in another group, same name prefix
    g % 4 == 3   inverse_next   tail in group g - 1

so every type has the same number of triplets when ``n_groups`` is a
multiple of 4.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tokenizer import build_vocab

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"
NOUNS = ("disease", "disorder", "syndrome", "condition", "finding", "lesion", "state")
QUALIFIERS = ("acute", "chronic", "primary", "secondary", "mild", "severe", "nos", "unspecified")
RELATIONS = (
    ("SIB", "same_group"),
    ("RN", "next_group"),
    ("RQ", "shares_prefix"),
    ("RB", "inverse_next"),
)

# synonym templates; {w} is the concept name
TEMPLATES = (
    "{w} {n1}",
    "{n1} of {w}",
    "{q1} {w} {n1}",
    "{w} {n1}, {q1}",
    "{n1} of the {w} type",
    "{q1} {n1} ({w})",
    "{w}-{n1} {q2}",
    "{q1} {q2} {w}",
    "{n1} {w}, {q1} {n2}",
)


@dataclass
class SyntheticKG:
    concepts: list[tuple[str, str, str, list[str]]]  # cui, group label, lang, surfaces
    held_out: list[tuple[str, str]]                  # query, cui
    triplets: list[tuple[str, str, str]]
    groups: dict[str, int]

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {name: out / fname for name, fname in (
            ("concepts", "concepts.tsv"), ("relations", "relations.tsv"), ("gold", "gold.tsv"),
            ("probe", "probe_pairs.tsv"), ("vocab", "vocab.txt"))}
        with open(paths["concepts"], "w", encoding="utf-8") as fh:
            fh.write("# CUI\tLANG\tSEMTYPE\tTERM\n")
            for cui, group, lang, surfaces in self.concepts:
                for s in surfaces:
                    fh.write(f"{cui}\t{lang}\t{group}\t{s}\n")
        with open(paths["relations"], "w", encoding="utf-8") as fh:
            for h, r, t in self.triplets:
                fh.write(f"{h}\t{r}\t{t}\n")
        with open(paths["gold"], "w", encoding="utf-8") as fh:
            for q, cui in self.held_out:
                fh.write(f"{q}\t{cui}\n")
        with open(paths["probe"], "w", encoding="utf-8") as fh:
            for h, r, t in self.triplets:
                fh.write(f"{h}\t{t}\t{r.split('|', 1)[1]}\n")
        build_vocab(s for _, _, _, ss in self.concepts for s in ss).save(paths["vocab"])
        return paths


def _syllable(rng):
    return CONSONANTS[rng.integers(len(CONSONANTS))] + VOWELS[rng.integers(len(VOWELS))]


def generate(n_groups=20, per_group=5, synonyms=4, held_out=1, tails_per_head=4, seed=0) -> SyntheticKG:
    if n_groups % 4:
        raise ValueError("n_groups must be a multiple of 4 for balanced relation types")
    if n_groups < 4 or per_group < 2:
        raise ValueError("need at least 4 groups of 2 concepts")
    if not 0 <= held_out < synonyms or synonyms > len(TEMPLATES):
        raise ValueError(f"need 0 <= held_out < synonyms <= {len(TEMPLATES)}")
    rng = np.random.default_rng(seed)

    prefixes: list[str] = []
    while len(prefixes) < per_group:
        p = _syllable(rng)
        if p not in prefixes:
            prefixes.append(p)
    names: set[str] = set()
    concepts, held, groups = [], [], {}
    grid = np.empty((n_groups, per_group), dtype=object)
    width = len(str(n_groups * per_group))
    for g in range(n_groups):
        for c in range(per_group):
            while True:
                w = prefixes[c] + _syllable(rng) + _syllable(rng)
                if w not in names:
                    names.add(w)
                    break
            cui = f"C{g * per_group + c:0{width}d}"
            grid[g, c] = cui
            groups[cui] = g
            picks = rng.choice(len(TEMPLATES), size=synonyms, replace=False)
            surfaces = []
            for ti in picks:
                while True:
                    n1, n2 = rng.choice(NOUNS, size=2, replace=False)
                    q1, q2 = rng.choice(QUALIFIERS, size=2, replace=False)
                    s = TEMPLATES[ti].format(w=w, n1=n1, n2=n2, q1=q1, q2=q2)
                    if s not in surfaces:
                        surfaces.append(s)
                        break
            hold = set((1 + rng.choice(synonyms - 1, size=held_out, replace=False)).tolist())
            held += [(surfaces[i], cui) for i in sorted(hold)]
            kept = [s for i, s in enumerate(surfaces) if i not in hold]
            concepts.append((cui, f"G{g:02d}", "en", kept))

    triplets = []
    for g in range(n_groups):
        rtype, attr = RELATIONS[g % 4]
        label = f"{rtype}|{attr}"
        for c in range(per_group):
            if attr == "same_group":
                cands = [grid[g, j] for j in range(per_group) if j != c]
            elif attr == "next_group":
                cands = list(grid[(g + 1) % n_groups])
            elif attr == "inverse_next":
                cands = list(grid[(g - 1) % n_groups])
            else:
                cands = [grid[h, c] for h in range(n_groups) if h != g]
            n = min(tails_per_head, len(cands))
            for j in sorted(rng.choice(len(cands), size=n, replace=False)):
                triplets.append((grid[g, c], label, cands[j]))
    return SyntheticKG(concepts, held, triplets, groups)
