"""Synthetic bitext, vocabularies and token-budget batching.

The marker-cipher task: a source sentence is a marker token followed by
content tokens drawn from a sparse Markov chain.  The target is a
token-by-token substitution cipher, except that a subset of "polysemous"
source tokens translate differently depending on the marker.  The copy task
is the degenerate case with identity mapping and no markers.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numkernel import STREAM_DATA, RngStream

PAD, BOS, EOS, UNK, MASK = 0, 1, 2, 3, 4
RESERVED = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"]
N_RESERVED = len(RESERVED)
SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    pass


class Vocab:
    """Reserved ids first, then observed tokens in sorted order."""

    def __init__(self, tokens: Iterable[str]):
        extra = sorted(set(tokens) - set(RESERVED))
        self.itos = RESERVED + extra
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, sentence: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in sentence]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD, BOS):
                continue
            if strip and i == EOS:
                break
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text().splitlines()
        if lines[:N_RESERVED] != RESERVED:
            raise DataError(f"{path}: vocab file does not start with the reserved tokens")
        return cls(lines[N_RESERVED:])

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos


def build_vocab(corpora: Iterable[Sequence[tuple[Sequence[str], Sequence[str]]]]) -> tuple[Vocab, Vocab]:
    src, tgt = set(), set()
    for corpus in corpora:
        for s, t in corpus:
            src.update(s)
            tgt.update(t)
    return Vocab(src), Vocab(tgt)


@dataclass
class SynthTaskSpec:
    task: str = "cipher"
    content_vocab: int = 64
    n_polysemous: int = 8
    n_markers: int = 2
    min_len: int = 5
    max_len: int = 16
    reorder: bool = False
    successors: int = 6
    n_train: int = 20000
    n_valid: int = 1000
    n_test: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.task not in ("cipher", "copy"):
            raise DataError(f"unknown task {self.task!r}")
        if self.content_vocab < 2:
            raise DataError("content vocab must hold at least 2 tokens")
        if self.n_polysemous > self.content_vocab:
            raise DataError(
                f"polysemous subset ({self.n_polysemous}) larger than content vocab ({self.content_vocab})"
            )
        if self.n_polysemous < 0 or self.n_markers < 0:
            raise DataError("counts must be non-negative")
        if self.n_polysemous and self.n_markers < 2:
            raise DataError("polysemous tokens need at least 2 markers")
        if not 1 <= self.min_len <= self.max_len:
            raise DataError(f"bad length range {self.min_len}-{self.max_len}")
        if min(self.n_train, self.n_valid, self.n_test) < 1:
            raise DataError("every split needs at least one sentence")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Bitext:
    train: list
    valid: list
    test: list
    cipher: dict = field(default_factory=dict)
    marker_cipher: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return getattr(self, name)


def _src_tok(i: int) -> str:
    return f"s{i:02d}"


def _marker_tok(i: int) -> str:
    return f"@m{i}"


def generate_bitext(spec: SynthTaskSpec) -> Bitext:
    """Deterministically generate train/valid/test pairs of token lists."""
    spec.validate()
    copy = spec.task == "copy"
    n_markers = 0 if copy else spec.n_markers
    n_poly = 0 if copy else spec.n_polysemous
    rng = RngStream(spec.seed, STREAM_DATA).generator()
    V = spec.content_vocab

    # sparse Markov chain over content tokens gives the MLM something to learn
    k = min(spec.successors, V)
    succ = np.stack([rng.choice(V, size=k, replace=False) for _ in range(V)])
    succ_p = rng.dirichlet(np.ones(k), size=V)

    if copy:
        cipher = {_src_tok(i): _src_tok(i) for i in range(V)}
    else:
        perm = rng.permutation(V)
        cipher = {_src_tok(i): f"t{perm[i]:02d}" for i in range(V)}
    poly = sorted(rng.choice(V, size=n_poly, replace=False).tolist()) if n_poly else []
    marker_cipher = {}
    for j, p in enumerate(poly):
        tok = _src_tok(p)
        marker_cipher[tok] = {_marker_tok(0): cipher[tok]}
        for m in range(1, n_markers):
            marker_cipher[tok][_marker_tok(m)] = f"u{j:02d}" + ("" if m == 1 else f"_{m}")

    def translate(src: list[str]) -> list[str]:
        marker = src[0] if n_markers else None
        body = src[1:] if n_markers else src
        out = [marker_cipher[t][marker] if t in marker_cipher else cipher[t] for t in body]
        if spec.reorder:
            for i in range(0, len(out) - 1, 2):
                out[i], out[i + 1] = out[i + 1], out[i]
        return out

    total = spec.n_train + spec.n_valid + spec.n_test
    seen: set[tuple[str, ...]] = set()
    sentences: list[list[str]] = []
    attempts = 0
    while len(sentences) < total:
        attempts += 1
        if attempts > 50 * total:
            raise DataError("could not draw enough distinct sentences; widen the length range")
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        toks = [int(rng.integers(V))]
        for _ in range(n - 1):
            prev = toks[-1]
            toks.append(int(succ[prev][rng.choice(k, p=succ_p[prev])]))
        src = [_src_tok(t) for t in toks]
        if n_markers:
            src = [_marker_tok(int(rng.integers(n_markers)))] + src
        key = tuple(src)
        if key in seen:
            continue
        seen.add(key)
        sentences.append(src)

    pairs = [(s, translate(s)) for s in sentences]
    train = pairs[: spec.n_train]
    valid = pairs[spec.n_train: spec.n_train + spec.n_valid]
    test = pairs[spec.n_train + spec.n_valid:]

    if poly:
        observed = {(s[0], t) for s, _ in train for t in s[1:] if t in marker_cipher}
        for tok in marker_cipher:
            for m in range(n_markers):
                if (_marker_tok(m), tok) not in observed:
                    raise DataError(
                        f"polysemous token {tok} never appears under marker {_marker_tok(m)} in train; "
                        "increase the train size"
                    )
    return Bitext(train, valid, test, cipher, marker_cipher)


def oracle_translate(bitext: Bitext, src: Sequence[str], reorder: bool = False) -> list[str]:
    """Translate with the known cipher tables (used to prove the task solvable)."""
    has_marker = bool(src) and src[0].startswith("@m")
    marker = src[0] if has_marker else None
    body = src[1:] if has_marker else src
    out = [bitext.marker_cipher[t][marker] if t in bitext.marker_cipher else bitext.cipher[t] for t in body]
    if reorder:
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
    return out


# -- corpus files -------------------------------------------------------------

def write_corpus(bitext: Bitext, spec: SynthTaskSpec, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        pairs = bitext.split(split)
        (out / f"{split}.src").write_text("".join(" ".join(s) + "\n" for s, _ in pairs))
        (out / f"{split}.tgt").write_text("".join(" ".join(t) + "\n" for _, t in pairs))
    src_vocab, tgt_vocab = build_vocab([bitext.train, bitext.valid, bitext.test])
    src_vocab.save(out / "vocab.src")
    tgt_vocab.save(out / "vocab.tgt")
    (out / "task.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def read_corpus(data_dir, split: str) -> list[tuple[list[str], list[str]]]:
    d = Path(data_dir)
    src_path, tgt_path = d / f"{split}.src", d / f"{split}.tgt"
    for p in (src_path, tgt_path):
        if not p.exists():
            raise FileNotFoundError(str(p))
    src = src_path.read_text().splitlines()
    tgt = tgt_path.read_text().splitlines()
    if len(src) != len(tgt):
        raise DataError(f"{src_path} and {tgt_path} are not line-aligned ({len(src)} vs {len(tgt)})")
    return [(s.split(), t.split()) for s, t in zip(src, tgt)]


# -- batching -----------------------------------------------------------------

@dataclass
class Batch:
    src: np.ndarray
    src_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray
    index: np.ndarray

    @property
    def size(self) -> int:
        return len(self.src)

    @property
    def padded_tokens(self) -> int:
        return self.src.shape[0] * max(self.src.shape[1], self.tgt_in.shape[1])


def encode_pairs(pairs, src_vocab: Vocab, tgt_vocab: Vocab) -> list[tuple[list[int], list[int]]]:
    return [(src_vocab.encode(s), tgt_vocab.encode(t)) for s, t in pairs]


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], index=None) -> Batch:
    b = len(pairs)
    n = max(len(s) for s, _ in pairs)
    m = max(len(t) for _, t in pairs) + 1
    src = np.full((b, n), PAD, dtype=np.int64)
    tgt_in = np.full((b, m), PAD, dtype=np.int64)
    tgt_out = np.full((b, m), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = s
        tgt_in[i, 0] = BOS
        tgt_in[i, 1: len(t) + 1] = t
        tgt_out[i, : len(t)] = t
        tgt_out[i, len(t)] = EOS
    idx = np.arange(b) if index is None else np.asarray(index)
    return Batch(src, src != PAD, tgt_in, tgt_out, tgt_out != PAD, idx)


def batch_iterator(
    corpus: Sequence[tuple[Sequence[int], Sequence[int]]],
    max_tokens: int,
    rng: np.random.Generator | None = None,
    shuffle: bool = False,
) -> list[Batch]:
    """Length-bucketed batches whose padded size (rows x longest side) fits ``max_tokens``."""
    lens = []
    for i, (s, t) in enumerate(corpus):
        need = max(len(s), len(t) + 1)
        if need + 1 > max_tokens:
            raise DataError(f"sentence {i} ({need} tokens) does not fit the {max_tokens}-token budget")
        lens.append(need)
    lens = np.asarray(lens)
    if shuffle:
        if rng is None:
            raise ValueError("shuffle needs an rng")
        perm = rng.permutation(len(corpus))
        order = perm[np.argsort(lens[perm], kind="stable")]
    else:
        order = np.argsort(lens, kind="stable")

    groups: list[list[int]] = []
    cur: list[int] = []
    longest = 0
    for i in order:
        n = int(lens[i])
        if cur and (len(cur) + 1) * max(longest, n) > max_tokens:
            groups.append(cur)
            cur, longest = [], 0
        cur.append(int(i))
        longest = max(longest, n)
    if cur:
        groups.append(cur)
    if shuffle:
        groups = [groups[j] for j in rng.permutation(len(groups))]
    return [make_batch([corpus[i] for i in g], g) for g in groups]
