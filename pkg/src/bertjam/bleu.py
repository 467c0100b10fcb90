"""Corpus-level BLEU with clipped n-gram counts and a brevity penalty."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Hashable, Sequence


@dataclass
class BleuReport:
    precisions: list[float]
    matches: list[int]
    totals: list[int]
    brevity_penalty: float
    cand_len: int
    ref_len: int
    score: float
    skipped_orders: list[int]

    def to_dict(self) -> dict:
        return asdict(self)

    def __str__(self) -> str:
        ps = "/".join(f"{p * 100:.1f}" for p in self.precisions)
        return (
            f"BLEU = {self.score * 100:.2f}, {ps} (BP={self.brevity_penalty:.3f}, "
            f"hyp_len={self.cand_len}, ref_len={self.ref_len})"
        )


def ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    candidates: Sequence[Sequence[Hashable]],
    references: Sequence[Sequence[Hashable]],
    max_n: int = 4,
) -> BleuReport:
    """Single-reference corpus BLEU.

    Orders for which the candidate corpus holds no n-gram at all (every
    sentence shorter than n) are skipped rather than scored as zero.  Any
    remaining order with zero matches makes the score 0.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise ValueError("cannot score an empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            c_counts = ngrams(cand, n)
            r_counts = ngrams(ref, n)
            matches[n - 1] += sum(min(c, r_counts[g]) for g, c in c_counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)

    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    skipped = [n + 1 for n in range(max_n) if totals[n] == 0]
    if c_len == 0:
        bp = 0.0
    elif c_len >= r_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - r_len / c_len)

    used = [p for n, p in enumerate(precisions) if totals[n] > 0]
    if not used or min(used) == 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in used) / len(used))
    return BleuReport(precisions, matches, totals, bp, c_len, r_len, score, skipped)
