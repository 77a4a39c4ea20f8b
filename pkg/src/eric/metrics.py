"""Automatic text metrics over tokenized corpora.

Every function takes corpora as lists of token lists (use
:func:`eric.text.split_tokens` on raw strings). BLEU and MS-Jaccard are on
the percent scale, repetition and distinct-n are fractions.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

Corpus = Sequence[Sequence[str]]


class EmptyCorpusError(ValueError):
    pass


def _check(corpus: Corpus, name: str = "corpus") -> None:
    if not corpus or all(len(t) == 0 for t in corpus):
        raise EmptyCorpusError(f"{name} is empty")


def ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1)]


def bleu_n(generated: Corpus, references: Corpus, n: int) -> float:
    """Corpus BLEU with uniform weights over orders 1..n and the standard brevity penalty.

    ``references[i]`` is the single reference for ``generated[i]``.
    """
    _check(generated, "generated corpus")
    _check(references, "reference corpus")
    if len(generated) != len(references):
        raise ValueError("generated and reference corpora must be aligned")
    if n < 1:
        raise ValueError("n must be >= 1")
    matched = np.zeros(n)
    total = np.zeros(n)
    hyp_len = ref_len = 0
    for hyp, ref in zip(generated, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for k in range(1, n + 1):
            h, r = Counter(ngrams(hyp, k)), Counter(ngrams(ref, k))
            matched[k - 1] += sum(min(c, r[g]) for g, c in h.items())
            total[k - 1] += max(len(hyp) - k + 1, 0)
    if np.any(matched == 0) or np.any(total == 0):
        return 0.0
    log_p = np.mean(np.log(matched / total))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def _freqs(corpus: Corpus, n: int) -> dict[tuple[str, ...], float]:
    c = Counter(g for toks in corpus for g in ngrams(toks, n))
    total = sum(c.values())
    return {g: v / total for g, v in c.items()} if total else {}


def ms_jaccard(generated: Corpus, references: Corpus, n: int) -> float:
    """Jaccard index of the normalized n-gram frequency multisets, in percent."""
    _check(generated, "generated corpus")
    _check(references, "reference corpus")
    fg, fr = _freqs(generated, n), _freqs(references, n)
    # sorted so the float sums do not depend on string hash order
    keys = sorted(set(fg) | set(fr))
    if not keys:
        raise EmptyCorpusError(f"no {n}-grams in either corpus")
    lo = sum(min(fg.get(g, 0.0), fr.get(g, 0.0)) for g in keys)
    hi = sum(max(fg.get(g, 0.0), fr.get(g, 0.0)) for g in keys)
    return 100.0 * lo / hi


def token_repetition(corpus: Corpus, n: int) -> float:
    """Fraction of token positions whose token already occurs in the previous n tokens.

    The first token of a text counts as a position with an empty window.
    """
    if n < 1:
        raise ValueError("window must be >= 1")
    hits = count = 0
    for toks in corpus:
        for t in range(len(toks)):
            count += 1
            if toks[t] in toks[max(0, t - n): t]:
                hits += 1
    return hits / count if count else 0.0


def distinct_n(corpus: Corpus, n: int) -> float:
    grams = [g for toks in corpus for g in ngrams(toks, n)]
    return len(set(grams)) / len(grams) if grams else 0.0


def zipf_coefficient(corpus: Corpus) -> float:
    """Magnitude of the least-squares slope of log frequency against log rank."""
    c = Counter(t for toks in corpus for t in toks)
    if len(c) < 2:
        raise ValueError("need at least two distinct unigrams for a Zipf fit")
    freqs = np.array(sorted(c.values(), reverse=True), dtype=float)
    ranks = np.arange(1, len(freqs) + 1, dtype=float)
    slope = np.polyfit(np.log(ranks), np.log(freqs), 1)[0]
    return float(abs(slope))


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    msj1: float
    msj2: float
    rpt16: float
    rpt32: float
    rpt64: float
    distinct3: float
    distinct4: float
    zipf: float
    mean_length: float
    n_generated: int
    n_references: int

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("rpt16", "rpt32", "rpt64"):
            d[k + "_percent"] = 100.0 * d[k]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        cols = [("B-1", self.bleu1), ("B-2", self.bleu2), ("MSJ-1", self.msj1), ("MSJ-2", self.msj2),
                ("Rpt-16", 100 * self.rpt16), ("Rpt-32", 100 * self.rpt32), ("Rpt-64", 100 * self.rpt64),
                ("D-3", 100 * self.distinct3), ("D-4", 100 * self.distinct4), ("Zipf", self.zipf),
                ("Len", self.mean_length)]
        width = max(8, *(len(c) for c, _ in cols))
        head = " ".join(c.rjust(width) for c, _ in cols)
        row = " ".join(f"{v:.2f}".rjust(width) for _, v in cols)
        note = f"(Rpt and D in percent; n_generated={self.n_generated}, n_references={self.n_references})"
        return f"{head}\n{row}\n{note}\n"


def evaluate_corpus(generated: Corpus, references: Corpus) -> MetricReport:
    _check(generated, "generated corpus")
    _check(references, "reference corpus")
    return MetricReport(
        bleu1=bleu_n(generated, references, 1),
        bleu2=bleu_n(generated, references, 2),
        msj1=ms_jaccard(generated, references, 1),
        msj2=ms_jaccard(generated, references, 2),
        rpt16=token_repetition(generated, 16),
        rpt32=token_repetition(generated, 32),
        rpt64=token_repetition(generated, 64),
        distinct3=distinct_n(generated, 3),
        distinct4=distinct_n(generated, 4),
        zipf=zipf_coefficient(generated),
        mean_length=float(np.mean([len(t) for t in generated])),
        n_generated=len(generated),
        n_references=len(references),
    )
