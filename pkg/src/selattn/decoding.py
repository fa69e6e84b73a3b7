"""Greedy decoding and two-pass iterative document decoding."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS, PAD
from .model import ContextCache, DocBatch, Model

Doc = Sequence[Sequence[int]]


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 10


def greedy_decode(model: Model, src: Sequence[int], cache: ContextCache | None = None,
                  max_len: int | None = None, src_doc: Doc | None = None,
                  sentence: int | None = None) -> list[int]:
    """Greedy left-to-right decoding of one sentence.

    Without ``cache`` the context-agnostic stacks are used.  With a cache,
    ``src_doc`` and ``sentence`` locate ``src`` in its document.
    """
    max_len = default_max_len(len(src)) if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    prefix = [BOS]
    with T.no_grad():
        for _ in range(max_len):
            if cache is None:
                logits = model.sentence_forward(src, prefix)
            else:
                logits, _ = model.forward_with_context(src_doc, sentence, prefix, cache)
            tok = int(np.argmax(logits.data[-1]))
            if tok == EOS:
                break
            prefix.append(tok)
    return prefix[1:]


def _finish(tokens: np.ndarray, done_at: np.ndarray) -> list[list[int]]:
    out = []
    for row, n in zip(tokens, done_at):
        out.append([int(t) for t in row[1:n]])
    return out


def _greedy_loop(step_fn, n_sent: int, max_len: int) -> list[list[int]]:
    """Shared loop: ``step_fn(prefix (S, t)) -> last-position logits (S, V)``."""
    seqs = np.full((n_sent, 1), BOS, dtype=np.int64)
    finished = np.zeros(n_sent, bool)
    end = np.full(n_sent, max_len + 1)
    for t in range(max_len):
        nxt = np.argmax(step_fn(seqs), axis=-1)
        nxt = np.where(finished, PAD, nxt)
        newly = (~finished) & (nxt == EOS)
        end[newly] = t + 1
        finished |= newly
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        if finished.all():
            break
    return _finish(seqs, end)


def decode_sentences(model: Model, src_docs: Sequence[Doc], params=None,
                     max_len: int | None = None) -> list[list[list[int]]]:
    """Context-agnostic greedy decoding of every sentence (optionally with other weights)."""
    batch = DocBatch.build(src_docs)
    b, j, ts = batch.src.shape
    src_valid = batch.src_valid.reshape(b * j, ts)
    max_len = default_max_len(ts) if max_len is None else max_len
    with T.no_grad():
        model.eval()
        memory = model.encode(batch.src.reshape(b * j, ts), src_valid, params)

        def step(seqs):
            hidden, _ = model.decode(seqs, memory, src_valid, params)
            return model.project(hidden[:, -1], params).data

        flat = _greedy_loop(step, b * j, max_len)
    return _unflatten(flat, src_docs, j)


def _unflatten(flat, src_docs, j):
    return [[flat[i * j + k] for k in range(len(d))] for i, d in enumerate(src_docs)]


def decode_with_source_context(model: Model, src_docs: Sequence[Doc],
                               max_len: int | None = None) -> list[list[list[int]]]:
    """Encoder-side integration: the source context is fixed, one pass suffices."""
    batch = DocBatch.build(src_docs)
    b, j, ts = batch.src.shape
    src_valid = batch.src_valid.reshape(b * j, ts)
    max_len = default_max_len(ts) if max_len is None else max_len
    with T.no_grad():
        model.eval()
        memory, _ = model.encode_with_context(batch)

        def step(seqs):
            hidden, _ = model.decode(seqs, memory, src_valid)
            return model.project(hidden[:, -1]).data

        flat = _greedy_loop(step, b * j, max_len)
    return _unflatten(flat, src_docs, j)


def decode_with_target_context(model: Model, src_docs: Sequence[Doc],
                               tgt_context: Sequence[Doc],
                               max_len: int | None = None) -> list[list[list[int]]]:
    """Decoder-side integration: re-decode every sentence against fixed target context.

    The cache is built once from ``tgt_context`` (all sentences' current
    translations); each sentence's own row is hidden by the context mask.
    """
    batch = DocBatch.build(src_docs, tgt_context, tgt_with_eos=False)
    b, j, ts = batch.src.shape
    src_valid = batch.src_valid.reshape(b * j, ts)
    max_len = default_max_len(ts) if max_len is None else max_len
    with T.no_grad():
        model.eval()
        enc = model.encode(batch.src.reshape(b * j, ts), src_valid)
        hidden, ctx = model.decode(batch.tgt_in.reshape(b * j, -1), enc, src_valid)
        cache = model.decoder_cache(hidden, ctx, batch)

        def step(seqs):
            t = seqs.shape[1]
            h, c = model.decode(seqs, enc, src_valid)
            queries = T.reshape(c, (b, j * t, c.shape[-1]))
            qsent = np.repeat(np.arange(j), t)[None].repeat(b, axis=0)
            d, _ = model.context_layer(queries, qsent, cache)
            r_tilde, _ = model.gate(T.reshape(h, queries.shape), d)
            logits = model.project(r_tilde).data.reshape(b * j, t, -1)
            return logits[:, -1]

        flat = _greedy_loop(step, b * j, max_len)
    return _unflatten(flat, src_docs, j)


def decode_documents(model: Model, src_docs: Sequence[Doc], max_len: int | None = None,
                     chunk: int = 64) -> list[list[list[int]]]:
    """Single pass: sentence model if there is no context layer, else source context
    (encoder side) or the first pass only (decoder side)."""
    out = []
    for i in range(0, len(src_docs), chunk):
        part = src_docs[i:i + chunk]
        if not model.has_context:
            out += decode_sentences(model, part, max_len=max_len)
        elif model.cfg.integration == "encoder":
            out += decode_with_source_context(model, part, max_len)
        else:
            out += decode_sentences(model, part, model.sentence_params, max_len)
    return out


def iterative_decode(model: Model, src_docs: Sequence[Doc], passes: int = 2,
                     max_len: int | None = None, chunk: int = 64,
                     return_passes: bool = False):
    """Two-pass iterative decoding.

    Pass 1 translates each sentence with the stage-1 sentence model.  With
    decoder-side integration every later pass re-decodes all sentences with
    the context model, the target context being the previous pass's output
    (all sentences updated simultaneously).  With encoder-side integration
    the context is source-only, so one context-aware pass is the result.
    """
    if passes < 1:
        raise ValueError("need at least one pass")
    if not model.has_context:
        result = decode_documents(model, src_docs, max_len, chunk)
        return (result, [result]) if return_passes else result
    if model.cfg.integration == "encoder":
        result = decode_documents(model, src_docs, max_len, chunk)
        return (result, [result]) if return_passes else result
    history = []
    for i in range(0, len(src_docs), chunk):
        part = list(src_docs[i:i + chunk])
        cur = decode_sentences(model, part, model.sentence_params, max_len)
        per_pass = [cur]
        for _ in range(passes - 1):
            cur = decode_with_target_context(model, part, cur, max_len)
            per_pass.append(cur)
        history.append(per_pass)
    n_pass = len(history[0])
    passes_out = [[doc for chunk_passes in history for doc in chunk_passes[p]]
                  for p in range(n_pass)]
    return (passes_out[-1], passes_out) if return_passes else passes_out[-1]
