import math

import numpy as np
import pytest

from bertjam import numkernel as nk
from bertjam.blocks import LinearCombiner
from bertjam.data import BOS, PAD, make_batch
from bertjam.jamodel import (
    BertJamConfig,
    BertJamModel,
    compensated_alpha_names,
    param_groups,
    sequence_loss,
    set_phase,
)
from bertjam.microbert import MicroBert, MicroBertConfig
from bertjam.numkernel import DimensionError, Tensor
from bertjam.trainer import AdamState, adam_step


def make_model(V=11, d=8, layers=1, bert_layers=2, heads=2, bert_dim=8, combiner="glu", seed=0, use_bert=True,
               encdec_self_keys=True):
    bert = MicroBert(MicroBertConfig(V, n_layers=bert_layers, d_model=bert_dim, n_heads=heads,
                                     d_ff=2 * bert_dim, dropout=0.0), seed)
    cfg = BertJamConfig(V, V, d_model=d, d_ff=2 * d, n_heads=heads, n_layers=layers, dropout=0.0,
                        combiner=combiner, use_bert=use_bert, encdec_self_keys=encdec_self_keys)
    return BertJamModel(cfg, bert if use_bert else None, seed).eval()


def randomize(model, rng, scale=0.3):
    """Give biases, gains and combiner weights non-trivial values."""
    for name, p in model.named_parameters():
        if name.endswith((".bias", ".gain", "alpha", "beta")):
            p.data[...] = p.data + rng.normal(scale=scale, size=p.shape)


# -- numpy oracles written straight from the layer equations ------------------------

def np_layer_norm(x, ln):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * ln.gain.data + ln.bias.data


def np_ffn(x, ffn):
    h = np.maximum(x @ ffn.fc1.weight.data + ffn.fc1.bias.data, 0.0)
    return h @ ffn.fc2.weight.data + ffn.fc2.bias.data


def np_joint(p, s, blk, pmask, smask):
    """p [n,d], s [m,d_s]; masks [n,n] and [n,m] of attendable positions."""
    n, d = p.shape
    h, dh = blk.n_heads, blk.d_head
    out = np.zeros((n, d))
    parts_k, parts_v, parts_m = [], [], []
    if blk.primary_keys:
        parts_k.append(p @ blk.k_primary.data)
        parts_v.append(p @ blk.v_primary.data)
        parts_m.append(pmask)
    if s is not None and len(s):
        parts_k.append(s @ blk.k_secondary.data)
        parts_v.append(s @ blk.v_secondary.data)
        parts_m.append(smask)
    K, V, M = np.concatenate(parts_k), np.concatenate(parts_v), np.concatenate(parts_m, axis=1)
    Q = p @ blk.q_proj.data
    for head in range(h):
        cols = slice(head * dh, (head + 1) * dh)
        e = Q[:, cols] @ K[:, cols].T / math.sqrt(dh)
        e = np.where(M, e, -np.inf)
        w = np.exp(e - e.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        out[:, cols] = w @ V[:, cols]
    return out @ blk.out.weight.data + blk.out.bias.data


def np_glu(states, glu):
    mix = sum(a * b for a, b in zip(glu.alpha.data, states))
    z = sum(bt * b for bt, b in zip(glu.beta.data, states))
    out = mix / (1.0 + np.exp(-z))
    return 2.0 * out if glu.compensation_active else out


def np_encoder_layer(x, states, layer, src_ok):
    n = len(x)
    mix = np_glu(states, layer.glu) if states is not None else None
    pm = np.broadcast_to(src_ok, (n, n))
    sm = np.broadcast_to(src_ok, (n, len(src_ok)))
    x = np_layer_norm(x + np_joint(x, mix, layer.attn, pm, sm), layer.ln1)
    return np_layer_norm(x + np_ffn(x, layer.ffn), layer.ln2)


def np_decoder_layer(y, enc, states, layer, src_ok):
    m = len(y)
    causal = np.tril(np.ones((m, m), bool))
    sm = np.broadcast_to(src_ok, (m, len(src_ok)))
    mix = np_glu(states, layer.glu) if states is not None else None
    a = np_joint(y, mix, layer.bert_attn, causal, sm)
    b = np_joint(y, enc, layer.encdec_attn, causal, sm)
    y = np_layer_norm(y + 0.5 * (a + b), layer.ln1)
    return np_layer_norm(y + np_ffn(y, layer.ffn), layer.ln2)


def np_forward(model, src, tgt_in):
    """Unbatched full-model oracle: src [n], tgt_in [m] -> logits [m,V]."""
    src_ok = src != PAD
    states = None
    if model.bert is not None:
        with nk.no_grad():
            states = [t.data[0] for t in model.bert.encode_all_layers(src[None])]
    x = model.pos(model.src_embed(src)).data
    for layer in model.encoder:
        x = np_encoder_layer(x, states, layer, src_ok)
    y = model.pos(model.tgt_embed(tgt_in)).data
    for layer in model.decoder:
        y = np_decoder_layer(y, x, states, layer, src_ok)
    return y @ model.out_proj.weight.data + model.out_proj.bias.data


SRC = np.array([[5, 6, 7, 8], [9, 10, 5, PAD]])
TGT = np.array([[BOS, 6, 7, 8, 9], [BOS, 10, 5, 6, PAD]])


# -- encoder / decoder against the oracles -------------------------------------------

def test_full_model_matches_layer_equation_oracle():
    rng = np.random.default_rng(0)
    for kw in ({}, {"layers": 2, "heads": 2}, {"heads": 1, "bert_dim": 6}, {"encdec_self_keys": False}):
        model = make_model(**kw)
        randomize(model, rng)
        set_phase(model, 2)
        with nk.no_grad():
            got = model(SRC, TGT).data
        for b in range(2):
            np.testing.assert_allclose(got[b], np_forward(model, SRC[b], TGT[b]), rtol=0, atol=1e-9)


def test_encoder_at_phase1_init_is_joint_attention_over_top_bert_layer():
    model = make_model(layers=1)
    set_phase(model, 1)
    src = SRC[:1]
    with nk.no_grad():
        states = model.bert_states(src, src != PAD)
        got = model.encode(src, states).data[0]
    layer = model.encoder[0]
    x = model.pos(model.src_embed(src)).data[0]
    ok = np.ones(4, bool)
    top = states[len(states) - 1].data[0]
    h = np_joint(x, top, layer.attn, np.ones((4, 4), bool), ok[None].repeat(4, 0))
    x = np_layer_norm(x + h, layer.ln1)
    expect = np_layer_norm(x + np_ffn(x, layer.ffn), layer.ln2)
    assert np.abs(got - expect).max() <= 1e-9


def test_decoder_single_layer_single_head_direct_oracle():
    model = make_model(heads=1, layers=1)
    randomize(model, np.random.default_rng(3))
    with nk.no_grad():
        states = model.bert_states(SRC, SRC != PAD)
        enc = model.encode(SRC, states)
        got = model.decode(TGT, enc, states, SRC != PAD).data
    for b in range(2):
        ok = SRC[b] != PAD
        st = [t.data[b] for t in states]
        y = model.pos(model.tgt_embed(TGT[b])).data
        y = np_decoder_layer(y, enc.data[b], st, model.decoder[0], ok)
        logits = y @ model.out_proj.weight.data + model.out_proj.bias.data
        assert np.abs(got[b] - logits).max() <= 1e-9


def test_zeroed_secondary_projections_leave_only_primary_values():
    model = make_model(layers=1)
    randomize(model, np.random.default_rng(1))
    attn = model.encoder[0].attn
    attn.k_secondary.data[...] = 0.0
    attn.v_secondary.data[...] = 0.0
    src = SRC[:1]
    with nk.no_grad():
        states = model.bert_states(src, src != PAD)
        got = model.encode(src, states).data[0]
    # plain self-attention whose softmax also counts m zero-logit, zero-value slots
    x = model.pos(model.src_embed(src)).data[0]
    n, h, dh = 4, attn.n_heads, attn.d_head
    Q, K, V = x @ attn.q_proj.data, x @ attn.k_primary.data, x @ attn.v_primary.data
    ctx = np.zeros((n, attn.d_model))
    for hd in range(h):
        c = slice(hd * dh, (hd + 1) * dh)
        e = np.exp(Q[:, c] @ K[:, c].T / math.sqrt(dh))
        ctx[:, c] = (e / (e.sum(1, keepdims=True) + states.shape[1])) @ V[:, c]
    layer = model.encoder[0]
    y = np_layer_norm(x + ctx @ attn.out.weight.data + attn.out.bias.data, layer.ln1)
    expect = np_layer_norm(y + np_ffn(y, layer.ffn), layer.ln2)
    assert np.abs(got - expect).max() <= 1e-9


def test_masked_out_bert_gives_plain_self_attention():
    model = make_model(layers=1)
    randomize(model, np.random.default_rng(2))
    src = SRC[:1]
    layer = model.encoder[0]
    x0 = model.pos(model.src_embed(src))
    with nk.no_grad():
        mix = layer.glu(model.bert_states(src, src != PAD))
        h = layer.attn(x0, mix, None, np.zeros((1, 1, 4), bool)).data[0]
    expect = np_joint(x0.data[0], None, layer.attn, np.ones((4, 4), bool), None)
    assert np.abs(h - expect).max() <= 1e-9


def test_glu_at_init_equals_model_hardwired_to_top_bert_layer():
    rng = np.random.default_rng(4)
    glu_model = make_model(layers=2, combiner="glu")
    last_model = make_model(layers=2, combiner="last")
    randomize(glu_model, rng)
    for c in glu_model.combiners():
        c.alpha.data[...] = [0.0, 1.0]
        c.beta.data[...] = 0.0
    set_phase(glu_model, 1)
    shared = {k: v for k, v in glu_model.state_dict().items() if ".glu." not in k}
    last_model.load_state_dict(shared)
    with nk.no_grad():
        a, b = glu_model(SRC, TGT).data, last_model(SRC, TGT).data
    assert np.abs(a - b).max() <= 1e-9


# -- masking and causality -----------------------------------------------------------

def test_trailing_source_pads_do_not_change_outputs():
    model = make_model(layers=2)
    randomize(model, np.random.default_rng(5))
    src = np.array([[5, 6, 7]])
    padded = np.array([[5, 6, 7, PAD, PAD]])
    with nk.no_grad():
        e1 = model.encode(src, model.bert_states(src, src != PAD)).data
        e2 = model.encode(padded, model.bert_states(padded, padded != PAD)).data
        l1, l2 = model(src, TGT[:1]).data, model(padded, TGT[:1]).data
    assert np.abs(e1 - e2[:, :3]).max() <= 1e-12
    assert np.abs(l1 - l2).max() <= 1e-12


def test_decoder_causality_bit_identical_prefix():
    model = make_model(layers=2)
    randomize(model, np.random.default_rng(6))
    rng = np.random.default_rng(7)
    tgt = np.array([[BOS, 6, 7, 8, 9, 10]])
    with nk.no_grad():
        base = model(SRC[:1], tgt).data
        for j in range(1, tgt.shape[1]):
            alt = tgt.copy()
            alt[0, j] = int(rng.integers(5, 11)) if alt[0, j] != 5 else 6
            out = model(SRC[:1], alt).data
            assert np.array_equal(out[:, :j], base[:, :j])
            assert not np.array_equal(out[:, j:], base[:, j:])


def test_state_length_mismatch_and_empty_prefix_rejected():
    model = make_model()
    with nk.no_grad():
        states = model.bert_states(SRC, SRC != PAD)
        with pytest.raises(DimensionError):
            model.encode(SRC[:, :3], states)
        enc = model.encode(SRC, states)
        with pytest.raises(ValueError):
            model.decode(np.zeros((2, 0), np.int64), enc, states, SRC != PAD)


# -- loss -----------------------------------------------------------------------------

def test_zero_output_projection_gives_log_vocab_loss():
    model = make_model(V=11)
    model.out_proj.weight.data[...] = 0.0
    batch = make_batch([([5, 6, 7], [8, 9]), ([10, 5], [6])])
    with nk.no_grad():
        assert abs(model.loss(batch).item() - math.log(11)) <= 1e-12


def test_loss_examples():
    targets = np.array([[1, 2, 3]])
    onehot = np.full((1, 3, 4), -50.0)
    onehot[0, np.arange(3), targets[0]] = 50.0
    assert sequence_loss(Tensor(onehot), targets, np.ones((1, 3), bool)).item() < 1e-40
    assert sequence_loss(Tensor(np.zeros((1, 3, 4))), targets, np.ones((1, 3), bool)).item() == pytest.approx(
        math.log(4), abs=1e-15)
    with pytest.raises(ValueError):
        sequence_loss(Tensor(np.zeros((1, 3, 4))), targets, np.zeros((1, 3), bool))


def test_loss_matches_log_sum_exp_oracle():
    rng = np.random.default_rng(8)
    logits = rng.normal(scale=3, size=(2, 4, 5))
    targets = rng.integers(0, 5, size=(2, 4))
    mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], bool)
    got = sequence_loss(Tensor(logits), targets, mask).item()
    terms = []
    for b in range(2):
        for t in range(4):
            if mask[b, t]:
                row = logits[b, t]
                top = max(row)
                lse = top + math.log(sum(math.exp(v - top) for v in row))
                terms.append(lse - row[targets[b, t]])
    assert abs(got - sum(terms) / len(terms)) <= 1e-12


# -- phases and freezing ----------------------------------------------------------------

def _train_steps(model, n, rng, lr=1e-2):
    state = AdamState()
    for _ in range(n):
        model.zero_grad()
        model.loss(make_batch([([5, 6, 7], [8, 9]), ([10, 5, 6, 7], [6, 7, 8])])).backward()
        adam_step(list(model.named_parameters()), state, lr)


def test_phase1_freezes_bert_and_glu():
    model = make_model(layers=2)
    set_phase(model, 1)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    _train_steps(model, 10, np.random.default_rng(0))
    for name, p in model.named_parameters():
        if name.startswith("bert.") or ".glu." in name:
            assert np.array_equal(p.data, before[name]), name
            assert not np.any(p.grad), name
        elif name.startswith(("encoder.", "decoder.", "out_proj")) and not name.endswith(".gain"):
            pass
    assert any(not np.array_equal(p.data, before[n]) for n, p in model.named_parameters() if n.startswith("out_proj"))
    assert len(compensated_alpha_names(model)) == 4


def test_phase1_to_2_transition_keeps_outputs():
    model = make_model(layers=2)
    randomize(model, np.random.default_rng(9))
    set_phase(model, 1)
    with nk.no_grad():
        before = model(SRC, TGT).data
    set_phase(model, 2)
    with nk.no_grad():
        after = model(SRC, TGT).data
    assert np.abs(before - after).max() <= 1e-9
    assert compensated_alpha_names(model) == []
    # re-entering phase 2 must not fold twice
    set_phase(model, 2)
    with nk.no_grad():
        assert np.abs(model(SRC, TGT).data - before).max() <= 1e-9


def test_phase_trainability_table():
    model = make_model()
    expect = {1: {"bert": False, "glu": False, "encdec": True},
              2: {"bert": False, "glu": True, "encdec": True},
              3: {"bert": True, "glu": True, "encdec": True}}
    for phase, table in expect.items():
        set_phase(model, phase)
        for group, params in param_groups(model).items():
            assert params and all(p.trainable == table[group] for _, p in params), (phase, group)
    with pytest.raises(ValueError):
        set_phase(model, 4)


def test_glu_weights_are_layer_local():
    model = make_model(layers=2)
    combiners = model.combiners()
    assert len(combiners) == 4 and len({id(c) for c in combiners}) == 4
    assert len({id(c.alpha) for c in combiners}) == 4


def test_linear_variant_has_no_gate_and_last_variant_reads_top_layer_only():
    m1 = make_model(combiner="linear", bert_layers=3)
    assert all(isinstance(c, LinearCombiner) for c in m1.combiners())
    assert not any(n.endswith("beta") for n, _ in m1.named_parameters())
    m2 = make_model(combiner="last", bert_layers=3)
    assert not any(".glu." in n for n, _ in m2.named_parameters())
    with nk.no_grad():
        states = m2.bert_states(SRC, SRC != PAD)
        m2.decode(TGT, m2.encode(SRC, states), states, SRC != PAD)
    assert states.accessed == {2}


# -- gradients and incremental decoding --------------------------------------------------

def test_end_to_end_gradient_check():
    model = make_model(V=11, d=8, layers=1, bert_layers=2, heads=2)
    rng = np.random.default_rng(10)
    randomize(model, rng)
    set_phase(model, 3)
    src = np.array([[5, 6, 7]])
    tgt_in = np.array([[BOS, 8, 9]])
    tgt_out = np.array([[8, 9, 10]])
    mask = np.ones((1, 3), bool)

    def f():
        return sequence_loss(model(src, tgt_in), tgt_out, mask)

    # a few gradient entries are ~1e-7, where rounding noise at eps=1e-5
    # dominates the relative error; 1e-4 keeps truncation error far below it
    err = nk.check_gradients(f, model.parameters(), eps=1e-4)
    assert err <= 1e-4


def test_incremental_decoding_matches_full_recompute():
    model = make_model(layers=2)
    randomize(model, np.random.default_rng(11))
    tgt = np.array([[BOS, 6, 7, 8, 9], [BOS, 10, 5, 6, 7]])
    with nk.no_grad():
        full = model(SRC, tgt).data
    full = full - full.max(-1, keepdims=True)
    full = full - np.log(np.exp(full).sum(-1, keepdims=True))
    cache = model.start_decoding(SRC)
    for t in range(tgt.shape[1]):
        step = model.decode_step(tgt[:, t], cache)
        assert np.abs(step - full[:, t]).max() <= 1e-6


def test_no_bert_model_runs_without_secondary():
    model = make_model(use_bert=False)
    assert model.bert is None and model.combiners() == []
    with nk.no_grad():
        got = model(SRC, TGT).data
    for b in range(2):
        assert np.abs(got[b] - np_forward(model, SRC[b], TGT[b])).max() <= 1e-9
