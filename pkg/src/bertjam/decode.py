"""Greedy and beam-search decoding over an incremental decoder.

A decodable model exposes ``start_decoding(src) -> cache``,
``decode_step(tokens, cache) -> log-probs [rows, V]`` and ``cache.select(rows)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .data import BOS, EOS, PAD


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float = 0.0
    finished: bool = False

    @property
    def length(self) -> int:
        """Generated tokens, EOS included, BOS excluded."""
        return len(self.tokens) - 1

    @property
    def output(self) -> list[int]:
        out = self.tokens[1:]
        return out[:-1] if self.finished else out

    def score(self, penalty: float = 1.0, style: str = "simple") -> float:
        return self.logprob / length_norm(self.length, penalty, style)


def length_norm(length: int, penalty: float, style: str = "simple") -> float:
    length = max(length, 1)
    if style == "simple":
        return float(length) ** penalty
    if style == "gnmt":
        return ((5.0 + length) / 6.0) ** penalty
    raise ValueError(f"unknown length-penalty style {style!r}")


@dataclass
class BeamConfig:
    width: int = 5
    penalty: float = 1.0
    max_len: int | None = None
    style: str = "simple"
    greedy_floor: bool = True

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"beam width must be >= 1, got {self.width}")
        if self.penalty < 0:
            raise ValueError("length penalty must be >= 0")


def default_max_len(src_len: int, model=None) -> int:
    n = 2 * src_len + 8
    pos = getattr(model, "pos", None)
    if pos is not None:
        n = min(n, pos.max_len)
    return n


def _pad(srcs: Sequence[Sequence[int]]) -> np.ndarray:
    n = max(len(s) for s in srcs)
    out = np.full((len(srcs), n), PAD, dtype=np.int64)
    for i, s in enumerate(srcs):
        out[i, : len(s)] = s
    return out


def _eval_mode(model):
    if hasattr(model, "eval"):
        model.eval()


# -- greedy ---------------------------------------------------------------------

def greedy_batch(
    model, srcs: Sequence[Sequence[int]], max_len: int | None = None, batch_size: int = 256,
    bos: int = BOS, eos: int = EOS,
) -> list[Hypothesis]:
    _eval_mode(model)
    out: list[Hypothesis] = []
    for start in range(0, len(srcs), batch_size):
        chunk = srcs[start:start + batch_size]
        limits = [max_len or default_max_len(len(s), model) for s in chunk]
        hyps = [Hypothesis([bos]) for _ in chunk]
        active = list(range(len(chunk)))
        cache = model.start_decoding(_pad(chunk))
        while active:
            lp = model.decode_step(np.array([hyps[i].tokens[-1] for i in active]), cache)
            nxt = lp.argmax(axis=-1)
            keep = []
            for r, i in enumerate(active):
                tok = int(nxt[r])
                h = hyps[i]
                h.tokens.append(tok)
                h.logprob += float(lp[r, tok])
                if tok == eos:
                    h.finished = True
                elif h.length < limits[i]:
                    keep.append(r)
            if len(keep) != len(active):
                active = [active[r] for r in keep]
                if active:
                    cache = cache.select(np.array(keep))
        out.extend(hyps)
    return out


def greedy(model, src: Sequence[int], states=None, max_len: int | None = None) -> Hypothesis:
    """Argmax decoding of one sentence; ties go to the lowest token id."""
    return greedy_batch(model, [list(src)], max_len)[0]


def greedy_uncached(model, src: Sequence[int], max_len: int | None = None) -> Hypothesis:
    """Reference greedy decoder that re-runs the full prefix every step."""
    _eval_mode(model)
    src_arr = np.asarray([src], dtype=np.int64)
    limit = max_len or default_max_len(len(src), model)
    h = Hypothesis([BOS])
    with nk.no_grad():
        while h.length < limit:
            logits = model.forward(src_arr, np.asarray([h.tokens])).data[0, -1]
            z = logits - logits.max()
            lp = z - np.log(np.exp(z).sum())
            tok = int(lp.argmax())
            h.tokens.append(tok)
            h.logprob += float(lp[tok])
            if tok == EOS:
                h.finished = True
                break
    return h


# -- beam -----------------------------------------------------------------------

def beam_search_batch(
    model, srcs: Sequence[Sequence[int]], config: BeamConfig | None = None, batch_size: int = 64,
    bos: int = BOS, eos: int = EOS,
) -> list[Hypothesis]:
    config = config or BeamConfig()
    _eval_mode(model)
    results: list[Hypothesis] = []
    for start in range(0, len(srcs), batch_size):
        chunk = srcs[start:start + batch_size]
        results.extend(_beam_chunk(model, chunk, config, bos, eos))
    if config.greedy_floor and config.width > 1:
        floor = greedy_batch(model, srcs, config.max_len, bos=bos, eos=eos)
        for i, g in enumerate(floor):
            if g.score(config.penalty, config.style) > results[i].score(config.penalty, config.style):
                results[i] = g
    return results


def _beam_chunk(model, chunk, config: BeamConfig, bos: int, eos: int) -> list[Hypothesis]:
    K, pen, style = config.width, config.penalty, config.style
    limits = [config.max_len or default_max_len(len(s), model) for s in chunk]
    live: list[list[Hypothesis]] = [[Hypothesis([bos])] for _ in chunk]
    finished: list[list[Hypothesis]] = [[] for _ in chunk]
    active = list(range(len(chunk)))
    cache = model.start_decoding(_pad(chunk))

    while active:
        last = np.array([h.tokens[-1] for s in active for h in live[s]])
        lp = model.decode_step(last, cache)
        V = lp.shape[1]
        next_rows: list[int] = []
        still: list[int] = []
        r0 = 0
        for s in active:
            hyps = live[s]
            k = len(hyps)
            base = np.array([h.logprob for h in hyps])
            cand = (base[:, None] + lp[r0:r0 + k]).reshape(-1)
            parent = np.repeat(np.arange(k), V)
            token = np.tile(np.arange(V), k)
            step_lp = lp[r0:r0 + k].reshape(-1)
            order = np.lexsort((token, -step_lp, parent, -cand))
            new_live, rows = [], []
            for j in order[:K]:
                if not np.isfinite(cand[j]):
                    break
                p, t = int(parent[j]), int(token[j])
                h = Hypothesis(hyps[p].tokens + [t], hyps[p].logprob + float(lp[r0 + p, t]))
                if t == eos:
                    h.finished = True
                    finished[s].append(h)
                else:
                    new_live.append(h)
                    rows.append(r0 + p)
            r0 += k
            live[s] = new_live
            done = not new_live or new_live[0].length >= limits[s]
            if not done and finished[s]:
                best_fin = max(f.score(pen, style) for f in finished[s])
                bound = max(h.logprob for h in new_live) / length_norm(limits[s], pen, style)
                done = bound <= best_fin
            if not done:
                still.append(s)
                next_rows.extend(rows)
        active = still
        if active:
            cache = cache.select(np.array(next_rows))

    out = []
    for s in range(len(chunk)):
        pool = finished[s] or live[s]
        best = pool[0]
        for h in pool[1:]:
            if h.score(pen, style) > best.score(pen, style):
                best = h
        out.append(best)
    return out


def beam_search(model, src: Sequence[int], states=None, config: BeamConfig | None = None) -> Hypothesis:
    """Best hypothesis for one sentence under length-normalised score."""
    return beam_search_batch(model, [list(src)], config)[0]


def translate(model, srcs, beam: BeamConfig | None = None, greedy_only: bool = False) -> list[Hypothesis]:
    if greedy_only or (beam is not None and beam.width == 1):
        return greedy_batch(model, srcs, None if beam is None else beam.max_len)
    return beam_search_batch(model, srcs, beam)


def write_hypotheses(path, sentences: Sequence[Sequence[str]]) -> None:
    Path(path).write_text("".join(" ".join(s) + "\n" for s in sentences))
