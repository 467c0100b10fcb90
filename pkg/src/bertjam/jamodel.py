"""Joint-attention encoder/decoder.

Each encoder layer mixes the BERT layer outputs with its own combiner and lets
the encoder states attend jointly over themselves and that mix.  Each decoder
layer averages two joint attentions: over the BERT mix and over the encoder
output, both with the decoder states as primary sequence.
"""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass

import numpy as np

from . import numkernel as nk
from .blocks import (
    COMBINERS,
    BertStates,
    EmbeddingTable,
    FeedForward,
    JointAttention,
    LayerNorm,
    Linear,
    PositionalEncoding,
)
from .data import Batch
from .microbert import MicroBert
from .numkernel import DimensionError, Module, RngStream, Tensor

GROUPS = ("bert", "glu", "encdec")


@dataclass
class BertJamConfig:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 32
    d_ff: int = 64
    n_heads: int = 4
    n_layers: int = 2
    dropout: float = 0.1
    max_len: int = 64
    combiner: str = "glu"
    use_bert: bool = True
    attn_scale: str = "head"
    encdec_self_keys: bool = True
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.combiner not in COMBINERS:
            raise ValueError(f"unknown combiner {self.combiner!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderLayer(Module):
    def __init__(self, cfg: BertJamConfig, bert_dim: int, n_bert_layers: int, rng):
        self.glu = COMBINERS[cfg.combiner](n_bert_layers) if cfg.use_bert else None
        self.attn = JointAttention(cfg.d_model, cfg.n_heads, rng, bert_dim, cfg.dropout, cfg.attn_scale)
        self.ln1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.dropout = cfg.dropout

    def __call__(self, x: Tensor, src_mask: np.ndarray, states: BertStates | None, rng=None) -> Tensor:
        key_mask = src_mask[:, None, :]
        bert_mix = self.glu(states) if states is not None else None
        h = self.attn(x, bert_mix, key_mask, key_mask, rng)
        x = self.ln1(x + nk.dropout(h, self.dropout, rng, self.training))
        h = self.ffn(x, rng)
        return self.ln2(x + nk.dropout(h, self.dropout, rng, self.training))


class DecoderLayer(Module):
    def __init__(self, cfg: BertJamConfig, bert_dim: int, n_bert_layers: int, rng):
        self.glu = COMBINERS[cfg.combiner](n_bert_layers) if cfg.use_bert else None
        self.bert_attn = JointAttention(cfg.d_model, cfg.n_heads, rng, bert_dim, cfg.dropout, cfg.attn_scale)
        self.encdec_attn = JointAttention(
            cfg.d_model, cfg.n_heads, rng, cfg.d_model, cfg.dropout, cfg.attn_scale,
            primary_keys=cfg.encdec_self_keys,
        )
        self.ln1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.dropout = cfg.dropout

    def __call__(
        self,
        x: Tensor,
        causal: np.ndarray | None,
        enc_out: Tensor | None,
        src_mask: np.ndarray,
        bert_mix: Tensor | None,
        rng=None,
        cache: dict | None = None,
    ) -> Tensor:
        skey = src_mask[:, None, :]
        a = self.bert_attn(x, bert_mix, causal, skey, rng, cache=None if cache is None else cache["bert"])
        b = self.encdec_attn(x, enc_out, causal, skey, rng, cache=None if cache is None else cache["encdec"])
        h = (a + b) * 0.5
        x = self.ln1(x + nk.dropout(h, self.dropout, rng, self.training))
        h = self.ffn(x, rng)
        return self.ln2(x + nk.dropout(h, self.dropout, rng, self.training))


def causal_mask(m: int) -> np.ndarray:
    return np.tril(np.ones((m, m), dtype=bool))[None]


class BertJamModel(Module):
    def __init__(self, cfg: BertJamConfig, bert: MicroBert | None = None, seed: int = 0):
        if cfg.use_bert and bert is None:
            raise ValueError("a model with use_bert=True needs a micro-BERT")
        rng = RngStream(seed, nk.STREAM_INIT).generator()
        self.config = cfg
        self.bert = bert if cfg.use_bert else None
        bert_dim = bert.config.d_model if self.bert is not None else cfg.d_model
        n_bert = bert.config.n_layers if self.bert is not None else 0
        self.src_embed = EmbeddingTable(cfg.src_vocab, cfg.d_model, rng)
        self.tgt_embed = EmbeddingTable(cfg.tgt_vocab, cfg.d_model, rng)
        self.pos = PositionalEncoding(cfg.d_model, cfg.max_len + 2)
        self.encoder = [EncoderLayer(cfg, bert_dim, n_bert, rng) for _ in range(cfg.n_layers)]
        self.decoder = [DecoderLayer(cfg, bert_dim, n_bert, rng) for _ in range(cfg.n_layers)]
        self.out_proj = Linear(cfg.d_model, cfg.tgt_vocab, rng)

    # -- combiners / groups ------------------------------------------------
    def combiners(self) -> list:
        return [layer.glu for layer in (*self.encoder, *self.decoder) if layer.glu is not None]

    def bert_frozen(self) -> bool:
        return self.bert is None or not any(p.trainable for p in self.bert.parameters())

    # -- forward pieces ----------------------------------------------------
    def bert_states(self, src: np.ndarray, src_mask: np.ndarray, rng=None) -> BertStates | None:
        if self.bert is None:
            return None
        if self.bert_frozen():
            # frozen BERT runs deterministically and outside the graph
            was = self.bert.training
            self.bert.eval()
            try:
                with nk.no_grad():
                    return self.bert.encode_all_layers(src, src_mask)
            finally:
                self.bert.train(was)
        self.bert.train(self.training)
        return self.bert.encode_all_layers(src, src_mask, rng)

    def encode(self, src: np.ndarray, states: BertStates | None, src_mask: np.ndarray | None = None,
               rng=None) -> Tensor:
        src = np.asarray(src, dtype=np.int64)
        if src_mask is None:
            src_mask = src != 0
        if states is not None and states.shape[:2] != src.shape:
            raise DimensionError(f"BERT states {states.shape[:2]} do not match source {src.shape}")
        x = self.pos(self.src_embed(src))
        x = nk.dropout(x, self.config.dropout, rng, self.training)
        for layer in self.encoder:
            x = layer(x, src_mask, states, rng)
        return x

    def decode(
        self,
        tgt_in: np.ndarray,
        enc_out: Tensor,
        states: BertStates | None,
        src_mask: np.ndarray,
        rng=None,
    ) -> Tensor:
        """Teacher-forced logits [B, m, V] for a BOS-prefixed target prefix."""
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        if tgt_in.shape[1] == 0:
            raise ValueError("target prefix is empty; it must start with BOS")
        m = tgt_in.shape[1]
        causal = causal_mask(m)
        x = self.pos(self.tgt_embed(tgt_in))
        x = nk.dropout(x, self.config.dropout, rng, self.training)
        for layer in self.decoder:
            mix = layer.glu(states) if states is not None else None
            x = layer(x, causal, enc_out, src_mask, mix, rng)
        return self.out_proj(x)

    def forward(self, src: np.ndarray, tgt_in: np.ndarray, src_mask: np.ndarray | None = None, rng=None) -> Tensor:
        src = np.asarray(src, dtype=np.int64)
        if src_mask is None:
            src_mask = src != 0
        states = self.bert_states(src, src_mask, rng)
        enc = self.encode(src, states, src_mask, rng)
        return self.decode(tgt_in, enc, states, src_mask, rng)

    __call__ = forward

    def loss(self, batch: Batch, rng=None) -> Tensor:
        logits = self.forward(batch.src, batch.tgt_in, batch.src_mask, rng)
        return sequence_loss(logits, batch.tgt_out, batch.tgt_mask, self.config.label_smoothing)

    # -- incremental decoding ------------------------------------------------
    def start_decoding(self, src: np.ndarray, src_mask: np.ndarray | None = None) -> "DecoderCache":
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        if src_mask is None:
            src_mask = src != 0
        with nk.no_grad():
            states = self.bert_states(src, src_mask)
            enc = self.encode(src, states, src_mask)
            mixes = [layer.glu(states) if states is not None else None for layer in self.decoder]
        return DecoderCache(enc, mixes, src_mask, len(self.decoder))

    def decode_step(self, tokens: np.ndarray, cache: "DecoderCache") -> np.ndarray:
        """Feed one token per row; returns log-probabilities [R, V] for the next token."""
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
        with nk.no_grad():
            x = self.pos(self.tgt_embed(tokens), start=cache.position)
            for layer, mix, c in zip(self.decoder, cache.mixes, cache.layers):
                x = layer(x, None, cache.enc_out, cache.src_mask, mix, cache=c)
            logits = self.out_proj(x).data[:, 0, :]
        cache.position += 1
        z = logits - logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class DecoderCache:
    """Per-row decoder state: encoder output, BERT mixes and attention key/value caches."""

    def __init__(self, enc_out: Tensor, mixes: list, src_mask: np.ndarray, n_layers: int):
        self.enc_out = enc_out
        self.mixes = mixes
        self.src_mask = src_mask
        self.layers = [{"bert": {}, "encdec": {}} for _ in range(n_layers)]
        self.position = 0

    @property
    def rows(self) -> int:
        return self.src_mask.shape[0]

    def select(self, rows: np.ndarray) -> "DecoderCache":
        """Gather rows (beam reordering / expansion); returns a new cache."""
        rows = np.asarray(rows, dtype=np.int64)
        n = self.rows

        def take(a):
            if isinstance(a, np.ndarray) and a.ndim and a.shape[0] == n:
                return a[rows]
            return a

        new = DecoderCache.__new__(DecoderCache)
        new.enc_out = Tensor(self.enc_out.data[rows])
        new.mixes = [None if mx is None else Tensor(mx.data[rows]) for mx in self.mixes]
        new.src_mask = self.src_mask[rows]
        new.layers = [
            {k: {kk: take(vv) for kk, vv in d.items()} for k, d in layer.items()} for layer in self.layers
        ]
        new.position = self.position
        return new


def sequence_loss(logits: Tensor, targets: np.ndarray, pad_mask: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean token negative log-likelihood over non-pad positions."""
    return nk.cross_entropy(logits, targets, pad_mask, label_smoothing)


def loss(logits: Tensor, targets: np.ndarray, pad_mask: np.ndarray) -> Tensor:
    return sequence_loss(logits, targets, pad_mask)


# -- parameter groups and phases ----------------------------------------------

def group_of(name: str) -> str:
    if name.startswith("bert."):
        return "bert"
    if ".glu." in name:
        return "glu"
    return "encdec"


def param_groups(model: BertJamModel) -> dict[str, list]:
    groups = {g: [] for g in GROUPS}
    for name, p in model.named_parameters():
        groups[group_of(name)].append((name, p))
    return groups


def set_trainable(model: BertJamModel, group: str, flag: bool) -> None:
    for _, p in param_groups(model)[group]:
        p.trainable = flag


def fold_compensation(model: BertJamModel) -> None:
    for c in model.combiners():
        c.fold()


def set_phase(model: BertJamModel, phase: int) -> None:
    """1: BERT and GLU frozen, x2 compensation on.  2: GLU trainable, factor
    folded into alpha.  3: everything trainable."""
    if phase not in (1, 2, 3):
        raise ValueError(f"invalid phase {phase!r}; expected 1, 2 or 3")
    set_trainable(model, "encdec", True)
    if phase == 1:
        set_trainable(model, "bert", False)
        set_trainable(model, "glu", False)
        for c in model.combiners():
            if not c.folded:
                c.compensation_active = True
    else:
        fold_compensation(model)
        set_trainable(model, "glu", True)
        set_trainable(model, "bert", phase == 3)
    model.phase = phase


def compensated_alpha_names(model: BertJamModel) -> list[str]:
    """Names of alpha parameters whose combiner still applies the x2 factor."""
    out = []
    for prefix, layers in (("encoder", model.encoder), ("decoder", model.decoder)):
        for i, layer in enumerate(layers):
            if layer.glu is not None and layer.glu.compensation_active:
                out.append(f"{prefix}.{i}.glu.alpha")
    return out


def load_folded(model: BertJamModel, weights: dict[str, np.ndarray]) -> None:
    """Load weights that are in folded form (no active compensation)."""
    model.load_state_dict(weights)
    for c in model.combiners():
        c.compensation_active = False
        c.folded = True


@contextlib.contextmanager
def evaluating(model: Module):
    was = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was)
