"""Greedy longest-match subword tokenizer with [CLS]/[SEP] framing."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = range(4)
CONT = "##"
MAX_WORD_CHARS = 100


class Vocab:
    def __init__(self, tokens=()):
        self.id_to_token: list[str] = list(RESERVED)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token in self.token_to_id:
            raise ValueError(f"duplicate token {token!r}")
        self.token_to_id[token] = len(self.id_to_token)
        self.id_to_token.append(token)
        return self.token_to_id[token]

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token[len(RESERVED):]:
                fh.write(tok + "\n")


def load_vocab(path) -> Vocab:
    vocab = Vocab()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            tok = raw.rstrip("\r\n")
            if not tok:
                continue
            if tok in vocab:
                raise ValueError(f"{path}:{lineno}: duplicate token {tok!r}")
            vocab.add(tok)
    return vocab


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    attention_mask: tuple[int, ...]

    @property
    def length(self) -> int:
        return sum(self.attention_mask)


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P") or (ch.isascii() and not ch.isalnum() and not ch.isspace())


def split_words(text: str) -> list[str]:
    """Lowercase, split on whitespace, and isolate punctuation characters."""
    words, cur = [], []
    for ch in text.lower():
        if ch.isspace():
            if cur:
                words.append("".join(cur))
                cur = []
        elif _is_punct(ch):
            if cur:
                words.append("".join(cur))
                cur = []
            words.append(ch)
        else:
            cur.append(ch)
    if cur:
        words.append("".join(cur))
    return words


def segment_word(word: str, vocab: Vocab) -> list[str]:
    if len(word) > MAX_WORD_CHARS:
        return [UNK]
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end] if start == 0 else CONT + word[start:end]
            if piece in vocab:
                match = piece
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def wordpieces(surface: str, vocab: Vocab) -> list[str]:
    return [p for w in split_words(surface) for p in segment_word(w, vocab)]


def tokenize(surface: str, vocab: Vocab, max_len: int = 32) -> TokenSequence:
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    if not surface or not surface.strip():
        raise ValueError("cannot tokenize an empty surface")
    pieces = wordpieces(surface, vocab)[: max_len - 2]
    ids = [CLS_ID] + [vocab.token_to_id[p] for p in pieces] + [SEP_ID]
    n = len(ids)
    return TokenSequence(tuple(ids + [PAD_ID] * (max_len - n)), tuple([1] * n + [0] * (max_len - n)))


def detokenize(seq: TokenSequence, vocab: Vocab) -> str:
    words: list[str] = []
    for i, m in zip(seq.ids, seq.attention_mask):
        if not m or i in (CLS_ID, SEP_ID):
            continue
        tok = vocab.id_to_token[i]
        if tok.startswith(CONT) and words:
            words[-1] += tok[len(CONT):]
        else:
            words.append(tok)
    return " ".join(words)


def batch_arrays(seqs) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    mask = np.array([s.attention_mask for s in seqs], dtype=bool)
    return ids, mask


class TokenCache:
    """Memoizes tokenization of repeated surfaces."""

    def __init__(self, vocab: Vocab, max_len: int):
        self.vocab = vocab
        self.max_len = max_len
        self._cache: dict[str, TokenSequence] = {}

    def __call__(self, surface: str) -> TokenSequence:
        seq = self._cache.get(surface)
        if seq is None:
            seq = tokenize(surface, self.vocab, self.max_len)
            self._cache[surface] = seq
        return seq


def build_vocab(surfaces, min_word_count=2, max_ngram=4, max_size=None) -> Vocab:
    """Frequency-ranked vocabulary of whole words and character n-grams.

    Every character seen in the corpus is included in both word-initial and
    ``##`` continuation form, so no in-corpus word falls back to [UNK].
    """
    words = Counter(w for s in surfaces for w in split_words(s))
    chars: Counter = Counter()
    grams: Counter = Counter()
    for w, c in words.items():
        for ch in w:
            chars[ch] += c
            chars[CONT + ch] += c
        for n in range(2, max_ngram + 1):
            for i in range(len(w) - n + 1):
                g = w[i:i + n]
                grams[g if i == 0 else CONT + g] += c

    ranked_chars = sorted(chars.items(), key=lambda kv: (-kv[1], kv[0]))
    ranked = [(w, c) for w, c in words.items() if c >= min_word_count and len(w) > 1]
    ranked += [(g, c) for g, c in grams.items() if c >= min_word_count]
    ranked.sort(key=lambda kv: (-kv[1], kv[0]))

    vocab = Vocab()
    for tok, _ in ranked_chars:
        vocab.add(tok)
    for tok, _ in ranked:
        if max_size is not None and len(vocab) >= max_size:
            break
        if tok not in vocab:
            vocab.add(tok)
    return vocab
