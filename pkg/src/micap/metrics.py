"""Classification accuracy, per-label average accuracy, and CIDEr."""
from __future__ import annotations

import math
from collections import Counter

import numpy as np

from .tokenizer import normalize


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"predictions {preds.shape} and labels {labels.shape} are not aligned")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float((preds == labels).mean())


def multilabel_avg_accuracy(preds, labels) -> float:
    """Mean over labels of each binary label's accuracy (``N x K`` 0/1 arrays)."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"predictions {preds.shape} and labels {labels.shape} are not aligned")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float((preds == labels).mean(axis=0).mean())


def _ngrams(words: list[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def _words(text: str) -> list[str]:
    return normalize(text).split()


class CiderScorer:
    """TF-IDF n-gram cosine similarity against reference captions (plain CIDEr, x10)."""

    def __init__(self, corpus: list[list[str]], n: int = 4):
        if not corpus:
            raise ValueError("CIDEr needs a non-empty reference corpus")
        self.n = n
        self.log_n_docs = math.log(float(len(corpus)))
        self.df: Counter = Counter()
        for refs in corpus:
            seen = set()
            for ref in refs:
                words = _words(ref)
                for k in range(1, n + 1):
                    seen.update(_ngrams(words, k))
            self.df.update(seen)

    def _vectors(self, text: str):
        words = _words(text)
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            vec = {g: tf * (self.log_n_docs - math.log(max(1.0, self.df[g])))
                   for g, tf in _ngrams(words, k).items()}
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms

    def score(self, candidate: str, references: list[str]) -> float:
        if not references:
            raise ValueError("every candidate needs at least one reference")
        cand, cnorm = self._vectors(candidate)
        total = 0.0
        for ref in references:
            rvec, rnorm = self._vectors(ref)
            for k in range(self.n):
                if cnorm[k] == 0 or rnorm[k] == 0:
                    continue
                dot = sum(v * rvec[k].get(g, 0.0) for g, v in cand[k].items())
                total += dot / (cnorm[k] * rnorm[k])
        return 10.0 * total / (self.n * len(references))


def cider(candidates: list[str], references: list[list[str]], corpus: list[list[str]] | None = None,
          n: int = 4) -> tuple[float, np.ndarray]:
    """Mean and per-candidate CIDEr; document frequencies come from ``corpus`` (default: ``references``)."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    scorer = CiderScorer(references if corpus is None else corpus, n)
    scores = np.array([scorer.score(c, r) for c, r in zip(candidates, references)])
    return float(scores.mean()) if scores.size else 0.0, scores
