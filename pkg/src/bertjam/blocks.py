"""Transformer building blocks: embeddings, sinusoidal positions, FFN,
multi-head joint attention and the layer combiners that mix BERT states."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .numkernel import DimensionError, Module, Parameter, Tensor


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(nk.xavier_uniform(rng, d_in, d_out))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nk.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nk.layer_norm(x, self.gain, self.bias, self.eps)


class EmbeddingTable(Module):
    """Token embedding scaled by sqrt(d_model); the padding row starts at zero."""

    def __init__(self, vocab_size: int, d_model: int, rng: np.random.Generator, pad_id: int = 0):
        w = rng.normal(0.0, d_model ** -0.5, size=(vocab_size, d_model))
        if pad_id is not None and 0 <= pad_id < vocab_size:
            w[pad_id] = 0.0
        self.weight = Parameter(w)
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.scale = math.sqrt(d_model)

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and ids.max() >= self.vocab_size:
            raise IndexError(f"token id {int(ids.max())} >= vocab size {self.vocab_size}")
        return nk.embedding(self.weight, ids) * self.scale


def sinusoid_table(max_len: int, d_model: int) -> np.ndarray:
    """PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table


class PositionalEncoding:
    def __init__(self, d_model: int, max_len: int = 256):
        self.max_len = max_len
        self.table = sinusoid_table(max_len, d_model)

    def __call__(self, embedded: Tensor, start: int = 0) -> Tensor:
        n = embedded.shape[-2]
        if start + n > self.max_len:
            raise ValueError(f"sequence length {start + n} exceeds max length {self.max_len}")
        return embedded + self.table[start:start + n]


def positional_encode(embedded: Tensor, max_len: int = 256) -> Tensor:
    return PositionalEncoding(embedded.shape[-1], max_len)(embedded)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dropout: float = 0.0):
        self.fc1 = Linear(d_model, d_ff, rng)
        self.fc2 = Linear(d_ff, d_model, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = nk.relu(self.fc1(x))
        h = nk.dropout(h, self.dropout, rng, self.training)
        return self.fc2(h)


def feed_forward(x: Tensor, ffn: FeedForward) -> Tensor:
    return ffn(x)


class JointAttention(Module):
    """Queries from the primary sequence attend over [primary keys ; secondary keys].

    Primary and secondary sequences have their own key/value projections, so the
    secondary width may differ from ``d_model``.  With an empty (or absent)
    secondary sequence this is ordinary multi-head self-attention.

    ``scale="head"`` divides logits by sqrt(d_head); ``scale="model"`` by
    sqrt(d_model).  ``primary_keys=False`` drops the primary keys entirely,
    giving plain cross-attention.
    """

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        rng: np.random.Generator,
        d_secondary: int | None = None,
        dropout: float = 0.0,
        scale: str = "head",
        primary_keys: bool = True,
    ):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        if scale not in ("head", "model"):
            raise ValueError(f"unknown attention scale {scale!r}")
        d_secondary = d_model if d_secondary is None else d_secondary
        self.d_model, self.n_heads, self.d_head = d_model, n_heads, d_model // n_heads
        self.d_secondary = d_secondary
        self.q_proj = Parameter(nk.xavier_uniform(rng, d_model, d_model))
        self.k_primary = Parameter(nk.xavier_uniform(rng, d_model, d_model))
        self.v_primary = Parameter(nk.xavier_uniform(rng, d_model, d_model))
        self.k_secondary = Parameter(nk.xavier_uniform(rng, d_secondary, d_model))
        self.v_secondary = Parameter(nk.xavier_uniform(rng, d_secondary, d_model))
        self.out = Linear(d_model, d_model, rng)
        self.dropout = dropout
        self.scale = scale
        self.primary_keys = primary_keys
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def __call__(
        self,
        primary: Tensor,
        secondary: Tensor | None = None,
        primary_mask: np.ndarray | None = None,
        secondary_mask: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
        cache: dict | None = None,
    ) -> Tensor:
        """primary [B,n,d]; secondary [B,m,d_s]; masks [B|1, n|1, n] and [B|1, n|1, m].

        ``cache`` (inference only) holds projected keys/values of earlier
        primary positions plus the fixed secondary keys/values; the new
        primary rows are appended to it.
        """
        if primary.ndim != 3:
            raise DimensionError(f"primary must be [B,n,d], got {primary.shape}")
        bsz, n, _ = primary.shape
        q = self._split(nk.linear(primary, self.q_proj))

        keys, values, masks = [], [], []
        if self.primary_keys:
            kp = self._split(nk.linear(primary, self.k_primary))
            vp = self._split(nk.linear(primary, self.v_primary))
            if cache is not None:
                if "kp" in cache:
                    kp = Tensor(np.concatenate([cache["kp"], kp.data], axis=2))
                    vp = Tensor(np.concatenate([cache["vp"], vp.data], axis=2))
                cache["kp"], cache["vp"] = kp.data, vp.data
            keys.append(kp)
            values.append(vp)
            n_keys = kp.shape[2]
            masks.append(np.ones((1, 1, n_keys), bool) if primary_mask is None else primary_mask)

        has_secondary = secondary is not None and secondary.shape[1] > 0
        if cache is not None and "ks" in cache:
            if cache["ks"].shape[2] > 0:
                keys.append(Tensor(cache["ks"]))
                values.append(Tensor(cache["vs"]))
                masks.append(cache["smask"])
        elif has_secondary:
            if secondary.shape[-1] != self.d_secondary:
                raise DimensionError(
                    f"secondary width {secondary.shape[-1]} != expected {self.d_secondary}"
                )
            ks = self._split(nk.linear(secondary, self.k_secondary))
            vs = self._split(nk.linear(secondary, self.v_secondary))
            smask = np.ones((1, 1, secondary.shape[1]), bool) if secondary_mask is None else secondary_mask
            if cache is not None:
                cache["ks"], cache["vs"], cache["smask"] = ks.data, vs.data, smask
            keys.append(ks)
            values.append(vs)
            masks.append(smask)
        elif cache is not None:
            cache["ks"] = np.zeros((bsz, self.n_heads, 0, self.d_head))
            cache["vs"] = cache["ks"]
            cache["smask"] = np.ones((1, 1, 0), bool)

        if not keys:
            raise ValueError("joint attention has no keys to attend to")
        k = keys[0] if len(keys) == 1 else nk.concat(keys, axis=2)
        v = values[0] if len(values) == 1 else nk.concat(values, axis=2)
        mask = _join_masks(masks, bsz, n)

        denom = math.sqrt(self.d_head if self.scale == "head" else self.d_model)
        logits = nk.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / denom)
        weights = nk.masked_softmax(logits, mask[:, None])
        if not nk.grad_enabled():
            self.last_weights = weights.data
        weights = nk.dropout(weights, self.dropout, rng, self.training)
        ctx = nk.matmul(weights, v).transpose(0, 2, 1, 3).reshape(bsz, n, self.d_model)
        return self.out(ctx)


def _join_masks(masks: Sequence[np.ndarray], bsz: int, n: int) -> np.ndarray:
    parts = []
    for m in masks:
        m = np.asarray(m, dtype=bool)
        if m.ndim == 2:
            m = m[:, None, :]
        parts.append(np.broadcast_to(m, (bsz, n, m.shape[-1])))
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-1)


def joint_attention(
    primary: Tensor,
    secondary: Tensor | None,
    block: JointAttention,
    primary_mask: np.ndarray | None = None,
    secondary_mask: np.ndarray | None = None,
) -> Tensor:
    """Functional wrapper accepting unbatched [n,d] / [m,d_s] inputs."""
    squeeze = primary.ndim == 2
    if squeeze:
        primary = primary.reshape(1, *primary.shape)
        if secondary is not None:
            secondary = secondary.reshape(1, *secondary.shape)
    out = block(primary, secondary, primary_mask, secondary_mask)
    return out.reshape(out.shape[1:]) if squeeze else out


class BertStates:
    """Per-layer BERT outputs B_1..B_L plus the source padding mask.

    Index access is recorded in ``accessed`` so tests can verify which layers a
    combiner actually reads.
    """

    def __init__(self, layers: Sequence[Tensor], pad_mask: np.ndarray):
        if not layers:
            raise ValueError("BertStates needs at least one layer")
        shape = layers[0].shape
        if any(t.shape != shape for t in layers):
            raise DimensionError("all BERT layers must share one shape")
        self._layers = list(layers)
        self.pad_mask = np.asarray(pad_mask, dtype=bool)
        self.accessed: set[int] = set()

    def __len__(self) -> int:
        return len(self._layers)

    def __getitem__(self, i: int) -> Tensor:
        i = range(len(self._layers))[i]
        self.accessed.add(i)
        return self._layers[i]

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def shape(self) -> tuple:
        return self._layers[0].shape

    def select(self, rows: np.ndarray) -> "BertStates":
        return BertStates([Tensor(t.data[rows]) for t in self._layers], self.pad_mask[rows])


class GluCombiner(Module):
    """B = g * sum_i alpha_i B_i with g = sigmoid(sum_i beta_i B_i).

    Starts at alpha = (0, ..., 0, 1), beta = 0 with the x2 compensation on,
    so the initial output is exactly B_L.  :meth:`fold` moves the factor 2
    into alpha and switches the compensation off without changing the output.
    """

    kind = "glu"

    def __init__(self, n_layers: int):
        alpha = np.zeros(n_layers)
        alpha[-1] = 1.0
        self.alpha = Parameter(alpha)
        self.beta = Parameter(np.zeros(n_layers))
        self.n_layers = n_layers
        self.compensation_active = True
        self.folded = False

    def _check(self, states) -> None:
        if len(states) != self.n_layers:
            raise ValueError(f"expected {self.n_layers} BERT states, got {len(states)}")

    def __call__(self, states: BertStates | Sequence[Tensor]) -> Tensor:
        self._check(states)
        layers = [states[i] for i in range(self.n_layers)]
        mix = nk.weighted_sum(layers, self.alpha)
        gate = nk.sigmoid(nk.weighted_sum(layers, self.beta))
        out = gate * mix
        return out * 2.0 if self.compensation_active else out

    def fold(self) -> None:
        if self.compensation_active:
            self.alpha.data *= 2.0
            self.compensation_active = False
        self.folded = True


class LinearCombiner(GluCombiner):
    """Gateless learned weighted sum of BERT layers (ablation M1)."""

    kind = "linear"

    def __init__(self, n_layers: int):
        alpha = np.zeros(n_layers)
        alpha[-1] = 1.0
        self.alpha = Parameter(alpha)
        self.n_layers = n_layers
        self.compensation_active = False
        self.folded = True

    def __call__(self, states):
        self._check(states)
        return nk.weighted_sum([states[i] for i in range(self.n_layers)], self.alpha)


class LastLayerCombiner(Module):
    """Reads only the top BERT layer (ablation M2); no parameters."""

    kind = "last"

    def __init__(self, n_layers: int):
        self.n_layers = n_layers
        self.compensation_active = False
        self.folded = True

    def __call__(self, states):
        if len(states) != self.n_layers:
            raise ValueError(f"expected {self.n_layers} BERT states, got {len(states)}")
        return states[self.n_layers - 1]

    def fold(self) -> None:
        pass


COMBINERS = {"glu": GluCombiner, "linear": LinearCombiner, "last": LastLayerCombiner}


def glu_combine(bert_states, combiner: GluCombiner) -> Tensor:
    return combiner(bert_states)
