"""Evaluation: numeric extraction, MAE/RMSE/STD, and Bleu1 / METEOR / CIDEr."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .numbers import Extraction, extract_number

__all__ = [
    "EvalReport",
    "Extraction",
    "bleu1",
    "cider",
    "extract_number",
    "meteor_simplified",
    "numeric_metrics",
    "text_tokens",
]

METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_THETA = 3.0
CIDER_SCALE = 10.0

_WORD = re.compile(r"\w+(?:[-']\w+)*")


def text_tokens(text: str) -> list[str]:
    """Lowercased word tokens; punctuation dropped, hyphenated words kept whole."""
    return _WORD.findall(text.lower())


@dataclass
class EvalReport:
    n: int
    mae: float | None
    rmse: float | None
    std: float | None
    extraction_failure_rate: float
    bleu1: float
    meteor: float
    cider: float
    cider_normalized: float
    exact_accuracy: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def numeric_metrics(pred: Sequence[int | None], truth: Sequence[int]):
    """(mae, rmse, std, failure_rate) over pairs where a prediction was extracted.

    STD is the population standard deviation of the signed errors pred - truth.
    """
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(truth)} truths")
    if not truth:
        raise ValueError("empty prediction set")
    errors = np.array([p - t for p, t in zip(pred, truth) if p is not None], dtype=np.float64)
    failure_rate = 1.0 - errors.size / len(truth)
    if errors.size == 0:
        return None, None, None, 1.0
    mae = float(np.mean(np.abs(errors)))
    rmse = float(math.sqrt(np.mean(errors**2)))
    std = float(np.std(errors))
    return mae, rmse, std, failure_rate


def bleu1(candidate: str, references: Sequence[str]) -> float:
    cand = text_tokens(candidate)
    if not cand:
        return 0.0
    refs = [text_tokens(r) for r in references]
    max_counts: Counter = Counter()
    for r in refs:
        for tok, c in Counter(r).items():
            max_counts[tok] = max(max_counts[tok], c)
    clipped = sum(min(c, max_counts[tok]) for tok, c in Counter(cand).items())
    precision = clipped / len(cand)
    c = len(cand)
    # closest reference length, ties broken toward the shorter one
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1] if refs else c
    bp = math.exp(min(0.0, 1.0 - r / c))
    return precision * bp


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Greedy left-to-right exact matching, each reference token used once."""
    used = [False] * len(ref)
    pairs = []
    for i, tok in enumerate(cand):
        for j, rtok in enumerate(ref):
            if not used[j] and rtok == tok:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def _meteor_single(cand: list[str], ref: list[str]) -> float:
    pairs = _align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    p = m / len(cand)
    r = m / len(ref)
    fmean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_THETA
    return fmean * (1 - penalty)


def meteor_simplified(candidate: str, references: Sequence[str]) -> float:
    cand = text_tokens(candidate)
    if not cand:
        return 0.0
    return max((_meteor_single(cand, text_tokens(r)) for r in references), default=0.0)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def cider(candidates: Sequence[str], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Corpus CIDEr (plain, not CIDEr-D), scaled by 10.

    Document frequencies come from the references of this corpus.
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    if len(candidates) < 2:
        raise ValueError("CIDEr needs a corpus of at least 2 items")
    ref_toks = [[text_tokens(r) for r in refs] for refs in references]
    cand_toks = [text_tokens(c) for c in candidates]
    n_docs = len(candidates)
    log_n = math.log(n_docs)

    df = [Counter() for _ in range(max_n)]
    for refs in ref_toks:
        for n in range(1, max_n + 1):
            seen = set()
            for r in refs:
                seen.update(_ngrams(r, n))
            df[n - 1].update(seen)

    def vec(tokens, n):
        counts = _ngrams(tokens, n)
        d = df[n - 1]
        v = {g: c * (log_n - math.log(max(1.0, d[g]))) for g, c in counts.items()}
        norm = math.sqrt(sum(x * x for x in v.values()))
        return v, norm

    total = 0.0
    for cand, refs in zip(cand_toks, ref_toks):
        score = 0.0
        for n in range(1, max_n + 1):
            cv, cn = vec(cand, n)
            sims = []
            for r in refs:
                rv, rn = vec(r, n)
                dot = sum(x * rv.get(g, 0.0) for g, x in cv.items())
                sims.append(dot / (cn * rn) if cn > 0 and rn > 0 else 0.0)
            score += sum(sims) / len(sims) if sims else 0.0
        total += score / max_n
    return CIDER_SCALE * total / n_docs
