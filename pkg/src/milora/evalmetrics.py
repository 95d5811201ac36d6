"""ROUGE-1/2/L over token-id sequences and frame-importance F1."""

from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np

SPECIAL_TOKENS = (0, 1)  # pad, eos


def strip_special(tokens: Sequence[int]) -> list[int]:
    return [int(t) for t in tokens if int(t) not in SPECIAL_TOKENS]


def _prf(overlap: int, n_cand: int, n_ref: int) -> tuple[float, float, float]:
    if n_cand == 0 or n_ref == 0 or overlap == 0:
        return 0.0, 0.0, 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return p, r, 2 * p * r / (p + r)


def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[int], reference: Sequence[int], n: int) -> tuple[float, float, float]:
    """Clipped n-gram overlap as (precision, recall, f1)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    cand, ref = _ngrams(strip_special(candidate), n), _ngrams(strip_special(reference), n)
    overlap = sum((cand & ref).values())
    return _prf(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[int], reference: Sequence[int]) -> tuple[float, float, float]:
    """Longest-common-subsequence (precision, recall, f1)."""
    cand, ref = strip_special(candidate), strip_special(reference)
    return _prf(lcs_length(cand, ref), len(cand), len(ref))


def frame_f1(predicted, labels, threshold: float = 0.5) -> float:
    """F1 of thresholded importance scores; 1.0 when both sides are empty."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    pred = np.asarray(predicted) > threshold
    truth = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)
