"""A small post-norm transformer encoder pre-trained with masked language
modelling on the source side of the synthetic corpus."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .blocks import (
    BertStates,
    EmbeddingTable,
    FeedForward,
    JointAttention,
    LayerNorm,
    Linear,
    PositionalEncoding,
)
from .data import MASK, N_RESERVED, PAD
from .numkernel import Module, RngStream, Tensor

log = logging.getLogger(__name__)


@dataclass
class MicroBertConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    dropout: float = 0.1
    max_len: int = 64

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("micro-BERT needs at least one layer")
        if self.d_model % self.n_heads:
            raise ValueError(f"H_B={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderBlock(Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float, rng):
        self.attn = JointAttention(d_model, n_heads, rng, dropout=dropout)
        self.ln1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, rng)
        self.ln2 = LayerNorm(d_model)
        self.dropout = dropout

    def __call__(self, x: Tensor, key_mask: np.ndarray, rng=None) -> Tensor:
        h = self.attn(x, None, key_mask, rng=rng)
        x = self.ln1(x + nk.dropout(h, self.dropout, rng, self.training))
        h = self.ffn(x, rng)
        return self.ln2(x + nk.dropout(h, self.dropout, rng, self.training))


class MicroBert(Module):
    def __init__(self, config: MicroBertConfig, seed: int = 0):
        rng = RngStream(seed, nk.STREAM_BERT_INIT).generator()
        self.config = config
        self.embed = EmbeddingTable(config.vocab_size, config.d_model, rng)
        self.pos = PositionalEncoding(config.d_model, config.max_len)
        self.layers = [
            EncoderBlock(config.d_model, config.n_heads, config.d_ff, config.dropout, rng)
            for _ in range(config.n_layers)
        ]
        self.mlm_head = Linear(config.d_model, config.vocab_size, rng)

    def encode_all_layers(self, src: np.ndarray, pad_mask: np.ndarray | None = None, rng=None) -> BertStates:
        """Return the outputs of every layer (embedding output excluded)."""
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        if src.shape[1] > self.config.max_len:
            raise ValueError(f"input length {src.shape[1]} exceeds max length {self.config.max_len}")
        if pad_mask is None:
            pad_mask = src != PAD
        key_mask = pad_mask[:, None, :]
        x = self.pos(self.embed(src))
        x = nk.dropout(x, self.config.dropout, rng, self.training)
        layers = []
        for layer in self.layers:
            x = layer(x, key_mask, rng)
            layers.append(x)
        return BertStates(layers, pad_mask)

    def mlm_logits(self, src: np.ndarray, rng=None) -> Tensor:
        states = self.encode_all_layers(src, rng=rng)
        return self.mlm_head(states[len(states) - 1])


def mask_tokens(
    seq: np.ndarray,
    rng: np.random.Generator,
    vocab_size: int,
    mask_rate: float = 0.15,
    maskable: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """BERT corruption: select ``mask_rate`` of maskable positions; of those
    80% become MASK, 10% a random content token, 10% stay unchanged.

    Returns (corrupted ids, labels) with label -1 on unselected positions.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError(f"mask_rate must be in (0, 1), got {mask_rate}")
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size < 1:
        raise ValueError("cannot mask an empty sequence")
    if maskable is None:
        maskable = seq >= N_RESERVED
    selected = (rng.random(seq.shape) < mask_rate) & maskable
    roll = rng.random(seq.shape)
    random_ids = rng.integers(N_RESERVED, vocab_size, size=seq.shape)
    out = seq.copy()
    out = np.where(selected & (roll < 0.8), MASK, out)
    out = np.where(selected & (roll >= 0.8) & (roll < 0.9), random_ids, out)
    labels = np.where(selected, seq, -1)
    return out, labels


def _pad(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def mlm_loss(model: MicroBert, masked: np.ndarray, labels: np.ndarray, rng=None) -> Tensor:
    logits = model.mlm_logits(masked, rng)
    return nk.cross_entropy(logits, np.maximum(labels, 0), labels >= 0)


def mlm_accuracy(model: MicroBert, corpus: Sequence[Sequence[int]], seed: int, mask_rate: float = 0.15) -> float:
    """Fraction of masked positions whose argmax prediction is the original token."""
    rng = RngStream(seed, nk.STREAM_MASK).generator()
    model.eval()
    hit = total = 0
    with nk.no_grad():
        for start in range(0, len(corpus), 256):
            batch = _pad(corpus[start:start + 256])
            masked, labels = mask_tokens(batch, rng, model.config.vocab_size, mask_rate)
            sel = labels >= 0
            if not sel.any():
                continue
            pred = model.mlm_logits(masked).data.argmax(-1)
            hit += int((pred[sel] == labels[sel]).sum())
            total += int(sel.sum())
    return hit / max(total, 1)


def pretrain_mlm(
    corpus: Sequence[Sequence[int]],
    config: MicroBertConfig,
    steps: int,
    seed: int = 0,
    batch_size: int = 64,
    lr: float = 1e-3,
    warmup: int = 100,
    mask_rate: float = 0.15,
    history: list | None = None,
) -> MicroBert:
    """Train a fresh MicroBert on ``corpus`` for ``steps`` Adam updates.

    Deterministic in ``seed``.  Per-step losses are appended to ``history``
    when given.
    """
    from .trainer import AdamState, adam_step  # local: trainer imports model code

    if not corpus:
        raise ValueError("pretraining corpus is empty")
    if any(max(s) >= config.vocab_size for s in corpus if len(s)):
        raise ValueError("corpus token id outside the BERT vocabulary")
    model = MicroBert(config, seed)
    if steps <= 0:
        return model
    data_rng = RngStream(seed, nk.STREAM_SHUFFLE).generator()
    mask_rng = RngStream(seed, nk.STREAM_MASK).generator()
    drop_rng = RngStream(seed, nk.STREAM_DROPOUT).generator()
    state = AdamState()
    params = list(model.named_parameters())
    model.train()
    order = data_rng.permutation(len(corpus))
    cursor = 0
    for step in range(1, steps + 1):
        if cursor + batch_size > len(order):
            order = data_rng.permutation(len(corpus))
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        batch = _pad([corpus[i] for i in idx])
        masked, labels = mask_tokens(batch, mask_rng, config.vocab_size, mask_rate)
        if not (labels >= 0).any():
            # force one target so every step has a loss
            r, c = np.argwhere(batch >= N_RESERVED)[0]
            masked[r, c], labels[r, c] = MASK, batch[r, c]
        model.zero_grad()
        loss = mlm_loss(model, masked, labels, drop_rng)
        loss.backward()
        cur_lr = lr * min(1.0, step / max(warmup, 1))
        adam_step(params, state, cur_lr)
        if history is not None:
            history.append(loss.item())
        if step % 500 == 0:
            log.info("mlm step %d loss %.4f", step, loss.item())
    model.eval()
    return model
