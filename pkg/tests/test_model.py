import itertools

import numpy as np
import pytest

from conftest import tiny_config, well_conditioned
from oracles import encoder_side_logits_ref, sentence_logits_ref, sigmoid
from selattn import tensor as T
from selattn.config import ATTENTION_VARIANTS
from selattn.corpus import BOS
from selattn.gradcheck import check_gradients
from selattn.model import (ContextMismatchError, DocBatch, Model, build_decoder_context,
                           build_encoder_context, context_gate, sinusoidal_positions)
from selattn.tensor import Tensor

ALL_CONFIGS = list(itertools.product(ATTENTION_VARIANTS, ("encoder", "decoder"),
                                     ("online", "offline")))


def model_for(attention="hier-sparse-soft", integration="encoder", setting="online", seed=0,
              **kw):
    cfg = tiny_config(attention=attention, integration=integration, setting=setting, **kw)
    return well_conditioned(Model(cfg), seed)


def numpy_params(model):
    return {k: v.data for k, v in model.params.items()}


# -- batching ----------------------------------------------------------------------
def test_doc_batch_layout(toy_doc):
    src, tgt = toy_doc
    b = DocBatch.build([src], [tgt])
    assert b.src.shape == (1, 2, 3)
    assert b.tgt_in.shape == (1, 2, 4)
    np.testing.assert_array_equal(b.tgt_in[0, 0], [BOS, 4, 5, 0])
    np.testing.assert_array_equal(b.tgt_out[0, 1], [6, 7, 8, 2])
    assert b.loss_weights.sum() == 2 + 1 + 3 + 1


def test_doc_batch_pads_sentence_slots():
    b = DocBatch.build([[[4]], [[4, 5], [6]]], [[[4]], [[4], [5, 6]]])
    assert b.sent_valid.tolist() == [[True, False], [True, True]]
    assert b.loss_weights[0, 1].sum() == 0


def test_doc_batch_rejects_misaligned_documents():
    with pytest.raises(ValueError):
        DocBatch.build([[[4], [5]]], [[[4]]])


# -- sentence model ------------------------------------------------------------------
def test_sentence_forward_shape_and_vocab_check():
    m = Model(tiny_config(), with_context=False)
    assert m.sentence_forward([4, 5, 6], [BOS, 4]).shape == (2, 13)
    with pytest.raises(IndexError):
        m.sentence_forward([4, 99], [BOS])
    with pytest.raises(IndexError):
        m.sentence_forward([4], [BOS, 13])


def test_sentence_forward_is_causal(rng):
    m = Model(tiny_config(), with_context=False)
    prefix = [BOS, 4, 5, 6, 7]
    base = m.sentence_forward([4, 5, 6], prefix).data
    for n in range(len(prefix)):
        changed = prefix[:n + 1] + list(rng.integers(4, 13, size=len(prefix) - n - 1))
        out = m.sentence_forward([4, 5, 6], changed).data
        np.testing.assert_array_equal(out[:n + 1], base[:n + 1])


@pytest.mark.parametrize("layers,heads", [(1, 1), (2, 2)])
def test_sentence_forward_matches_straight_line_oracle(layers, heads):
    m = well_conditioned(Model(tiny_config(layers=layers, heads=heads), with_context=False), 4)
    src, prefix = [4, 9], [BOS, 5, 7]
    ref = sentence_logits_ref(numpy_params(m), src, prefix, layers, heads)
    np.testing.assert_allclose(m.sentence_forward(src, prefix).data, ref, atol=1e-9)


def test_sinusoidal_positions_first_rows():
    p = sinusoidal_positions(2, 4)
    np.testing.assert_allclose(p[0], [0, 1, 0, 1])
    np.testing.assert_allclose(p[1], [np.sin(1), np.cos(1), np.sin(0.01), np.cos(0.01)])


# -- caches ----------------------------------------------------------------------------
def test_encoder_cache_sentence_keys_are_token_means(toy_doc):
    m = model_for()
    enc_doc = m.encode_document(toy_doc[0])
    cache = build_encoder_context(enc_doc)
    e = enc_doc.enc.data
    np.testing.assert_allclose(cache.k_s.data[0, 0], e[0, :3].mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(cache.k_s.data[0, 1], (e[1, 0] + e[1, 1]) / 2, atol=1e-15)
    np.testing.assert_array_equal(cache.k_w.data, cache.v_w.data)
    assert cache.boundaries() == [(0, 3), (3, 5)]


def test_encoder_cache_identical_rows():
    m = model_for()
    enc_doc = m.encode_document([[4, 4, 4]])
    enc_doc.enc.data[...] = np.arange(8.0)
    cache = build_encoder_context(enc_doc)
    np.testing.assert_allclose(cache.k_s.data[0, 0], np.arange(8.0), rtol=1e-15)


def test_decoder_cache_streams(toy_doc):
    m = model_for(integration="decoder")
    src = [[4], [5]]
    tgt = [[6], [7, 8, 9]]
    enc_doc = m.encode_document(src, tgt)
    cache = build_decoder_context(enc_doc)
    assert cache.boundaries() == [(0, 1), (1, 4)]
    # single-token target: its sentence key is its own source-attention context vector
    np.testing.assert_array_equal(cache.k_s.data[0, 0], enc_doc.src_context.data[0, 1])
    np.testing.assert_array_equal(cache.v_w.data[0, 1, :3], enc_doc.hidden.data[1, 1:4])
    # with single-token sources every source-attention read returns the one source value,
    # so perturbing target embeddings moves the values but not the keys
    m.params["tgt_emb"].data[...] += np.random.default_rng(0).normal(size=m.params["tgt_emb"].shape)
    cache2 = build_decoder_context(m.encode_document(src, tgt))
    np.testing.assert_allclose(cache2.k_w.data, cache.k_w.data, atol=1e-12)
    assert np.abs(cache2.v_w.data - cache.v_w.data).max() > 1e-3


def test_decoder_cache_needs_targets(toy_doc):
    m = model_for(integration="decoder")
    with pytest.raises(ContextMismatchError):
        build_decoder_context(m.encode_document(toy_doc[0]))


# -- gate ---------------------------------------------------------------------------------
def test_zero_gate_weights_average(rng):
    r, d = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    z = Tensor(np.zeros((3, 3)))
    out, g = context_gate(Tensor(r), Tensor(d), z, z)
    np.testing.assert_array_equal(g.data, 0.5)
    np.testing.assert_allclose(out.data, (r + d) / 2, atol=1e-15)


def test_saturated_gate_passes_r(rng):
    r, d = rng.uniform(0.5, 1.0, size=(1, 3)), rng.normal(size=(1, 3))
    w_r = Tensor(np.eye(3) * 400.0)
    out, g = context_gate(Tensor(r), Tensor(d), w_r, Tensor(np.zeros((3, 3))))
    assert (r @ w_r.data >= 100).all()
    np.testing.assert_allclose(out.data, r, atol=1e-6)


def test_scalar_gate_example():
    out, g = context_gate(Tensor([[1.0]]), Tensor([[0.0]]), Tensor([[1.0]]), Tensor([[1.0]]))
    assert g.data[0, 0] == pytest.approx(sigmoid(1.0), abs=1e-12)
    assert out.data[0, 0] == pytest.approx(0.7310585786300049, abs=1e-12)


def test_gate_shape_mismatch():
    with pytest.raises(ValueError):
        context_gate(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 2))), Tensor(np.eye(3)),
                     Tensor(np.eye(3)))


def test_gate_gradients(rng):
    ps = {k: Tensor(rng.normal(size=s), requires_grad=True)
          for k, s in dict(r=(2, 3), d=(2, 3), wr=(3, 3), wd=(3, 3)).items()}
    w = Tensor(rng.normal(size=(2, 3)))
    errs = check_gradients(lambda: (context_gate(ps["r"], ps["d"], ps["wr"], ps["wd"])[0] * w).sum(),
                           ps)
    assert max(errs.values()) <= 1e-4


# -- context forward ---------------------------------------------------------------------
@pytest.mark.parametrize("attention,integration,setting", ALL_CONFIGS)
def test_forced_gate_reproduces_sentence_model(attention, integration, setting, toy_doc):
    m = model_for(attention, integration, setting)
    batch = DocBatch.build([toy_doc[0]], [toy_doc[1]])
    m.gate_force = 1.0
    ctx = m.context_logits(batch).logits.data
    plain = m.sentence_logits(batch).data
    np.testing.assert_allclose(ctx, plain, atol=1e-9)
    cache = m.build_cache(m.encode_document(*toy_doc))
    for j in range(2):
        prefix = [BOS] + toy_doc[1][j]
        logits, _ = m.forward_with_context(toy_doc[0], j, prefix, cache)
        np.testing.assert_array_equal(logits.data, m.sentence_forward(toy_doc[0][j], prefix).data)


@pytest.mark.parametrize("attention,integration,setting", ALL_CONFIGS)
def test_single_sentence_document_has_zero_context(attention, integration, setting):
    m = model_for(attention, integration, setting)
    src, tgt = [[4, 5, 6]], [[7, 8]]
    cache = m.build_cache(m.encode_document(src, tgt))
    logits, trace = m.forward_with_context(src, 0, [BOS, 7, 8], cache)
    np.testing.assert_array_equal(trace["d"], 0.0)
    # gated mix of r and 0 with gamma = sigmoid(r W_r)
    P = m.params
    if integration == "encoder":
        enc = m.encode(np.array(src), np.array(src) != 0)
        r = enc.data[0]
        g = sigmoid(r @ P["gate.w_r"].data)
        hidden, _ = m.decode(np.array([[BOS, 7, 8]]), Tensor((g * r)[None]), np.array(src) != 0)
        expect = m.project(hidden).data[0]
    else:
        enc = m.encode(np.array(src), np.array(src) != 0)
        hidden, _ = m.decode(np.array([[BOS, 7, 8]]), enc, np.array(src) != 0)
        r = hidden.data[0]
        expect = (sigmoid(r @ P["gate.w_r"].data) * r) @ P["out.w"].data + P["out.b"].data
    np.testing.assert_allclose(logits.data, expect, atol=1e-12)


@pytest.mark.parametrize("setting", ["online", "offline"])
def test_encoder_side_matches_straight_line_oracle(setting, toy_doc):
    m = model_for("hier-sparse-soft", "encoder", setting, heads=2, seed=11)
    src, tgt = toy_doc
    cache = m.build_cache(m.encode_document(src))
    for j in range(2):
        prefix = [BOS] + tgt[j]
        logits, _ = m.forward_with_context(src, j, prefix, cache)
        ref = encoder_side_logits_ref(numpy_params(m), src, j, prefix, 1, 2, setting)
        np.testing.assert_allclose(logits.data, ref, atol=1e-9)


@pytest.mark.parametrize("attention,integration,setting", ALL_CONFIGS)
def test_batched_and_per_sentence_paths_agree(attention, integration, setting):
    m = model_for(attention, integration, setting)
    src = [[4, 5, 6], [7], [8, 9]]
    tgt = [[4, 5], [6, 7, 8], [9]]
    batch = DocBatch.build([src, [[4, 4]]], [tgt, [[5]]])
    batched = m.context_logits(batch).logits.data
    cache = m.build_cache(m.encode_document(src, tgt))
    for j in range(3):
        prefix = [BOS] + tgt[j]
        logits, _ = m.forward_with_context(src, j, prefix, cache)
        np.testing.assert_allclose(logits.data, batched[0, j, :len(prefix)], atol=1e-10)


@pytest.mark.parametrize("attention", ATTENTION_VARIANTS)
@pytest.mark.parametrize("setting", ["online", "offline"])
def test_decoder_side_never_reads_future_target_tokens(attention, setting, rng):
    m = model_for(attention, "decoder", setting)
    src = [[4, 5], [6, 7, 8], [9, 4]]
    tgt = [[5, 6, 7], [8, 9, 10, 11], [4, 5]]
    base = m.context_logits(DocBatch.build([src], [tgt])).logits.data
    for j, n in [(0, 1), (1, 0), (1, 2), (2, 1)]:
        changed = [list(s) for s in tgt]
        changed[j][n:] = list(rng.integers(4, 13, size=len(changed[j]) - n))
        out = m.context_logits(DocBatch.build([src], [changed])).logits.data
        # logits at positions <= n only see y_1 .. y_n of sentence j
        np.testing.assert_array_equal(out[0, j, :n + 1], base[0, j, :n + 1])


def test_online_logits_ignore_later_sentences(rng):
    for integration in ("encoder", "decoder"):
        m = model_for("hier-sparse-sparse", integration, "online")
        src = [[4, 5], [6, 7, 8], [9, 4]]
        tgt = [[5, 6], [7, 8], [9]]
        base = m.context_logits(DocBatch.build([src], [tgt])).logits.data
        src2 = src[:1] + [list(rng.integers(4, 12, size=4)) for _ in range(2)]
        tgt2 = tgt[:1] + [list(rng.integers(4, 13, size=3)) for _ in range(2)]
        out = m.context_logits(DocBatch.build([src2], [tgt2])).logits.data
        np.testing.assert_array_equal(out[0, 0, :3], base[0, 0, :3])


def test_cache_side_mismatch(toy_doc):
    enc_model = model_for(integration="encoder")
    dec_model = model_for(integration="decoder")
    cache = enc_model.build_cache(enc_model.encode_document(*toy_doc))
    with pytest.raises(ContextMismatchError):
        dec_model.forward_with_context(toy_doc[0], 0, [BOS], cache)
    with pytest.raises(IndexError):
        enc_model.forward_with_context(toy_doc[0], 2, [BOS], cache)
    plain = Model(tiny_config(), with_context=False)
    with pytest.raises(ContextMismatchError):
        plain.forward_with_context(toy_doc[0], 0, [BOS], cache)


# -- parameters -----------------------------------------------------------------------------
def _hand_count(d, ff, vs, vt, hierarchical):
    mha = 4 * (d * d + d)
    ln = 2 * d
    ffn = d * ff + ff + ff * d + d
    enc = mha + ln + ffn + ln
    dec = 2 * mha + 3 * ln + ffn
    sentence = vs * d + vt * d + enc + dec + d * vt + vt
    ctx = (6 if hierarchical else 4) * d * d + 2 * ln + ffn + 2 * d * d
    return sentence, ctx


@pytest.mark.parametrize("attention", ATTENTION_VARIANTS)
def test_parameter_count_matches_hand_count(attention):
    cfg = tiny_config(model_dim=8, ff_dim=16, layers=1, heads=1, src_vocab=10, tgt_vocab=11,
                      attention=attention)
    m = Model(cfg)
    sentence, ctx = _hand_count(8, 16, 10, 11, cfg.hierarchical)
    assert sentence == 1771
    assert m.n_parameters() == sentence + ctx
    assert m.n_parameters(context_only=True) == ctx
    assert Model(cfg, with_context=False).n_parameters() == sentence


def test_context_init_starts_gate_at_half():
    m = Model(tiny_config())
    assert (m.params["gate.w_r"].data == 0).all() and (m.params["gate.w_d"].data == 0).all()
    assert np.abs(m.params["ctx.att.w_qs"].data).max() <= 0.05


def test_invalid_head_count():
    with pytest.raises(ValueError):
        tiny_config(heads=3)


# -- gradients ------------------------------------------------------------------------------
@pytest.mark.parametrize("attention,integration,setting", [
    ("hier-sparse-soft", "encoder", "online"), ("flat-word", "decoder", "offline")])
def test_loss_gradients_spot_check(attention, integration, setting, toy_doc):
    m = model_for(attention, integration, setting, seed=2)
    batch = DocBatch.build([toy_doc[0]], [toy_doc[1]])
    errs = check_gradients(lambda: m.loss(batch), m.params, max_coords=3,
                           rng=np.random.default_rng(0))
    assert max(errs.values()) <= 1e-4, {k: v for k, v in errs.items() if v > 1e-4}


def test_gradients_reach_both_groups():
    # offline with four sentences: every query weighs three candidates, so sparsemax
    # does not sit on a vertex everywhere (which would zero the sentence-key gradients)
    m = model_for(setting="offline")
    m.loss(DocBatch.build([[[4, 5], [6], [7, 8], [9, 10, 4]]],
                          [[[4], [5, 6], [7], [8, 9]]])).backward()
    for group in ("enc.0.self.wq", "dec.0.src.wv", "ctx.att.w_qs", "ctx.att.w_ks", "ctx.ff.w1",
                  "gate.w_r"):
        assert np.abs(m.params[group].grad).max() > 0


def test_dropout_only_when_training(toy_doc):
    m = model_for()
    batch = DocBatch.build([toy_doc[0]], [toy_doc[1]])
    with T.no_grad():
        a = m.loss(batch).item()
        m.train(0.3)
        b = m.loss(batch).item()
        m.eval()
        c = m.loss(batch).item()
    assert a == c and a != b
