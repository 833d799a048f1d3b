"""Character-level byte-pair-encoding tokenizer for captions.

Text is lower-cased, punctuation is split off with spaces and whitespace is
collapsed. The normalised text is cut into chunks of one optional leading
space plus a run of non-space characters; merges never cross chunk borders,
so decoding is plain concatenation.
"""
from __future__ import annotations

import json
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

PAD, UNK, SOS, EOS = 0, 1, 2, 3
SPECIALS = ["<pad>", "<unk>", "<sos>", "<eos>"]
DEFAULT_VOCAB_SIZE = 4096
DEFAULT_MAX_LEN = 64

_PUNCT = re.compile(r"([^\w\s])")
_SPACES = re.compile(r"\s+")
_CHUNK = re.compile(r" ?\S+")


def normalize(text: str) -> str:
    text = unicodedata.normalize("NFC", text).lower()
    text = _PUNCT.sub(r" \1 ", text)
    return _SPACES.sub(" ", text).strip()


def _chunks(text: str) -> list[str]:
    return _CHUNK.findall(normalize(text))


@dataclass
class CaptionTokens:
    ids: list[int]

    def __post_init__(self):
        ids = self.ids
        if len(ids) < 2 or ids[0] != SOS or ids[-1] != EOS:
            raise ValueError("caption tokens must start with SOS and end with EOS")
        if PAD in ids:
            raise ValueError("PAD inside a caption")

    @property
    def length(self) -> int:
        return len(self.ids) - 2

    def __len__(self):
        return len(self.ids)


@dataclass
class Vocab:
    tokens: list[str]
    merges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        if self.tokens[:4] != SPECIALS:
            raise ValueError("the first four tokens must be the specials")
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("duplicate token string in vocabulary")
        self._ranks = {m: r for r, m in enumerate(self.merges)}
        self._encode_chunk = lru_cache(maxsize=65536)(self._encode_chunk_uncached)

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def token_id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def _encode_chunk_uncached(self, chunk: str) -> tuple[int, ...]:
        parts = list(chunk)
        while len(parts) > 1:
            ranked = [(self._ranks.get(pair, None), i) for i, pair in enumerate(zip(parts, parts[1:]))]
            ranked = [(r, i) for r, i in ranked if r is not None]
            if not ranked:
                break
            best = min(ranked)[0]
            pair = self.merges[best]
            merged, i = [], 0
            while i < len(parts):
                if i + 1 < len(parts) and (parts[i], parts[i + 1]) == pair:
                    merged.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        return tuple(self.token_id(p) for p in parts)

    def to_json(self) -> str:
        body = {"specials": SPECIALS, "tokens": self.tokens[4:], "merges": [list(m) for m in self.merges]}
        return json.dumps(body, ensure_ascii=False, indent=1)

    @classmethod
    def from_json(cls, text: str) -> Vocab:
        body = json.loads(text)
        if body.get("specials") != SPECIALS:
            raise ValueError(f"vocab specials must be {SPECIALS}")
        return cls(SPECIALS + list(body["tokens"]), [tuple(m) for m in body["merges"]])

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocab:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def train_bpe(corpus: list[str], vocab_size: int = DEFAULT_VOCAB_SIZE, min_frequency: int = 2) -> Vocab:
    """Greedy BPE: merge the most frequent adjacent pair until ``vocab_size`` tokens exist.

    Ties go to the lexicographically smallest pair. Training stops early once
    no pair occurs at least ``min_frequency`` times.
    """
    if not corpus:
        raise ValueError("cannot train a tokenizer on an empty corpus")
    words = Counter(c for text in corpus for c in _chunks(text))
    alphabet = sorted({ch for w in words for ch in w})
    if vocab_size <= len(alphabet) + len(SPECIALS):
        raise ValueError(f"vocab_size {vocab_size} leaves no room for merges over {len(alphabet)} characters")
    tokens = SPECIALS + alphabet
    known = set(tokens)
    seqs = {w: list(w) for w in words}
    merges = []
    while len(tokens) < vocab_size:
        counts = Counter()
        for w, n in words.items():
            s = seqs[w]
            for pair in zip(s, s[1:]):
                counts[pair] += n
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < min_frequency:
            break
        pair = best[0]
        merges.append(pair)
        new = pair[0] + pair[1]
        if new not in known:
            known.add(new)
            tokens.append(new)
        for w, s in seqs.items():
            if len(s) < 2:
                continue
            out, i = [], 0
            while i < len(s):
                if i + 1 < len(s) and s[i] == pair[0] and s[i + 1] == pair[1]:
                    out.append(new)
                    i += 2
                else:
                    out.append(s[i])
                    i += 1
            seqs[w] = out
    return Vocab(tokens, merges)


def encode_text(vocab: Vocab, text: str, max_len: int | None = None) -> CaptionTokens:
    """Normalise and encode; the body is truncated to ``max_len`` tokens before EOS."""
    body = [i for chunk in _chunks(text) for i in vocab._encode_chunk(chunk)]
    if max_len is not None:
        body = body[:max_len]
    return CaptionTokens([SOS] + body + [EOS])


def decode_tokens(vocab: Vocab, tokens) -> str:
    ids = tokens.ids if isinstance(tokens, CaptionTokens) else list(tokens)
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < vocab.size:
            raise ValueError(f"token id {i} outside vocabulary of size {vocab.size}")
        if i in (PAD, SOS, EOS):
            continue
        out.append(vocab.tokens[i])
    return "".join(out).strip()
