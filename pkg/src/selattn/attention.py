"""Attention kernels over context documents.

Layout conventions (leading batch axes ``...`` are arbitrary):

* queries ``(..., Nq, d)``
* sentence keys/values ``(..., J, d)``
* word keys/values grouped by sentence and padded: ``(..., J, T, d)`` with a
  boolean ``word_valid`` of shape ``(..., J, T)``
* ``blocked`` masks are boolean, true where a key may not be attended.

Masked scores are replaced by a large negative constant before normalisation so
both softmax and sparsemax give them exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .sparsemax import masked_sparsemax_np, sparsemax
from .tensor import NEG_LARGE, Tensor

OFFLINE = "offline"
ONLINE = "online"


class EmptyContextError(ValueError):
    """Every key is masked for some query."""


# -- masks -----------------------------------------------------------------
@dataclass
class ContextMask:
    values: np.ndarray    # additive, 0 or -inf, one entry per sentence
    setting: str
    degenerate: bool      # no sentence left unmasked

    @property
    def blocked(self) -> np.ndarray:
        return np.isneginf(self.values)


def build_context_mask(n_sentences: int, query_sentence: int, setting: str) -> ContextMask:
    """Offline masks only the query's own sentence; online also masks later ones."""
    if setting not in (OFFLINE, ONLINE):
        raise ValueError(f"unknown setting {setting!r}")
    if not 0 <= query_sentence < n_sentences:
        raise IndexError(f"sentence index {query_sentence} outside [0, {n_sentences})")
    blocked = sentence_block_matrix(np.array([query_sentence]), n_sentences, setting)[0]
    values = np.where(blocked, -np.inf, 0.0)
    return ContextMask(values, setting, bool(blocked.all()))


def sentence_block_matrix(query_sentences: np.ndarray, n_sentences: int, setting: str,
                          sentence_valid: np.ndarray | None = None) -> np.ndarray:
    """Boolean ``(Nq, J)``: which context sentences each query may not see."""
    qs = np.asarray(query_sentences)[:, None]
    js = np.arange(n_sentences)[None, :]
    if setting == OFFLINE:
        blocked = js == qs
    elif setting == ONLINE:
        blocked = js >= qs
    else:
        raise ValueError(f"unknown setting {setting!r}")
    if sentence_valid is not None:
        blocked = blocked | ~np.asarray(sentence_valid, dtype=bool)[None, :]
    return blocked


def as_blocked(mask) -> np.ndarray | None:
    """Accept a boolean block mask or an additive {0, -inf} mask."""
    if mask is None:
        return None
    if isinstance(mask, ContextMask):
        return mask.blocked
    m = np.asarray(mask)
    if m.dtype == bool:
        return m
    return np.isneginf(m) | (m <= NEG_LARGE)


# -- normalisers -----------------------------------------------------------
def _normalise(scores: Tensor, blocked: np.ndarray | None, normalizer: str) -> Tensor:
    if blocked is not None:
        scores = T.masked_fill(scores, blocked, NEG_LARGE)
    if normalizer == "softmax":
        return T.softmax(scores, axis=-1)
    if normalizer == "sparsemax":
        return sparsemax(scores, axis=-1)
    raise ValueError(f"unknown normalizer {normalizer!r}")


def _empty_rows(blocked: np.ndarray | None, shape, empty: str) -> np.ndarray | None:
    """Rows with nothing to attend to: raise, or return a 0/1 keep-factor."""
    if blocked is None:
        return None
    empty_rows = np.broadcast_to(blocked, shape).all(axis=-1)
    if not empty_rows.any():
        return None
    if empty == "error":
        raise EmptyContextError("all keys are masked for at least one query")
    if empty != "zero":
        raise ValueError(f"unknown empty-row policy {empty!r}")
    return (~empty_rows)[..., None].astype(np.float64)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None,
                         normalizer: str = "softmax", empty: str = "error"):
    """``normalizer(q k^T / sqrt(d_k) + mask) v``; returns ``(output, weights)``.

    With ``empty="zero"`` fully masked queries get all-zero weights and output.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("query and key dims differ")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("keys and values have different lengths")
    dk = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, _swap_last(k.ndim))), 1.0 / np.sqrt(dk))
    blocked = as_blocked(mask)
    if blocked is not None and np.broadcast_shapes(blocked.shape, scores.shape) != scores.shape:
        raise ValueError(f"mask shape {blocked.shape} incompatible with scores {scores.shape}")
    keep = _empty_rows(blocked, scores.shape, empty)
    w = _normalise(scores, blocked, normalizer)
    if keep is not None:
        w = T.mul(w, keep)
    return T.matmul(w, v), w


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# -- hierarchical attention ------------------------------------------------
def sentence_attention_weights(q_s: Tensor, k_s: Tensor, mask=None, empty: str = "error") -> Tensor:
    """Sparse sentence-level matching ``sparsemax(q_s k_s^T / sqrt(d_k) + mask)``."""
    dk = q_s.shape[-1]
    scores = T.scale(T.matmul(q_s, T.transpose(k_s, _swap_last(k_s.ndim))), 1.0 / np.sqrt(dk))
    blocked = as_blocked(mask)
    keep = _empty_rows(blocked, scores.shape, empty)
    a = _normalise(scores, blocked, "sparsemax")
    return a if keep is None else T.mul(a, keep)


def word_attention_weights(q_w: Tensor, k_w: Tensor, word_valid=None,
                           normalizer: str = "softmax") -> Tensor:
    """Word-level matching done separately inside every context sentence.

    ``q_w``: ``(..., Nq, d)``; ``k_w``: ``(..., J, T, d)``.  Returns ``(..., Nq, J, T)``,
    each ``[..., q, j, :]`` a distribution over the valid words of sentence ``j``.
    Sentences with no valid word (padding slots) get an arbitrary distribution
    that the sentence weights zero out.
    """
    *lead, n_sent, n_tok, dk = k_w.shape
    nq = q_w.shape[-2]
    flat_k = T.reshape(k_w, (*lead, n_sent * n_tok, dk))
    scores = T.scale(T.matmul(q_w, T.transpose(flat_k, _swap_last(flat_k.ndim))), 1.0 / np.sqrt(dk))
    scores = T.reshape(scores, (*scores.shape[:-1], n_sent, n_tok))
    blocked = None
    if word_valid is not None:
        wv = np.asarray(word_valid, dtype=bool)
        blocked = ~wv[..., None, :, :]
        # padding sentence slots keep one finite entry so nothing is all-masked
        blocked = blocked & wv.any(axis=-1)[..., None, :, None]
    del nq
    return _normalise(scores, blocked, normalizer)


def rescale_hierarchical(alpha_s: Tensor, alpha_w: Tensor) -> Tensor:
    """Scale each sentence's word distribution by that sentence's weight."""
    if alpha_s.shape != alpha_w.shape[:-1]:
        raise ValueError(f"sentence weights {alpha_s.shape} do not match word weights "
                         f"{alpha_w.shape} (sentence count or boundary mismatch)")
    return T.mul(T.reshape(alpha_s, alpha_s.shape + (1,)), alpha_w)


def concat_by_boundaries(alpha_hier: np.ndarray, lengths: Sequence[int]) -> np.ndarray:
    """Drop padding and concatenate per-sentence rows in document order."""
    a = np.asarray(alpha_hier)
    if a.shape[-2] != len(lengths):
        raise ValueError("boundary index length does not match sentence count")
    return np.concatenate([a[..., j, :n] for j, n in enumerate(lengths)], axis=-1)


@dataclass
class AttentionWeights:
    sentence: np.ndarray   # (..., Nq, J)
    word: np.ndarray       # (..., Nq, J, T), before rescaling
    hier: np.ndarray       # (..., Nq, J, T), after rescaling


def h_attention(q_s: Tensor, q_w: Tensor, k_s: Tensor, k_w: Tensor, v_w: Tensor, mask=None,
                word_valid=None, word_normalizer: str = "softmax", empty: str = "error",
                pruned: bool = False):
    """Top-down hierarchical attention over a document context.

    Sentence matching (sparsemax) -> word matching per sentence -> rescale by
    sentence weight -> read word values.  Returns ``(output, AttentionWeights)``.
    ``pruned=True`` routes through a numpy path that only scores words of
    sentences with non-zero weight (no gradient; for benchmarking).
    """
    if pruned:
        return _h_attention_pruned(q_s, q_w, k_s, k_w, v_w, mask, word_valid,
                                   word_normalizer, empty)
    if k_w.shape[:-1] != v_w.shape[:-1]:
        raise ValueError("word keys and values are not aligned")
    if k_s.shape[-2] != k_w.shape[-3]:
        raise ValueError("sentence keys and word keys disagree on sentence count")
    a_s = sentence_attention_weights(q_s, k_s, mask, empty)
    a_w = word_attention_weights(q_w, k_w, word_valid, word_normalizer)
    a_h = rescale_hierarchical(a_s, a_w)
    *lead, n_sent, n_tok, dv = v_w.shape
    flat_a = T.reshape(a_h, (*a_h.shape[:-2], n_sent * n_tok))
    out = T.matmul(flat_a, T.reshape(v_w, (*lead, n_sent * n_tok, dv)))
    return out, AttentionWeights(a_s.data, a_w.data, a_h.data)


def _h_attention_pruned(q_s, q_w, k_s, k_w, v_w, mask, word_valid, word_normalizer, empty):
    with T.no_grad():
        a_s = sentence_attention_weights(q_s, k_s, mask, empty).data
    qw, kw, vw = q_w.data, k_w.data, v_w.data
    lead = a_s.shape[:-2]
    nq, n_sent = a_s.shape[-2:]
    n_tok = kw.shape[-2]
    dk = qw.shape[-1]
    wv = np.ones(kw.shape[:-1], bool) if word_valid is None else np.asarray(word_valid, bool)
    wv = np.broadcast_to(wv, kw.shape[:-1])
    a_w = np.zeros(lead + (nq, n_sent, n_tok))
    out = np.zeros(lead + (nq, vw.shape[-1]))
    for b in np.ndindex(*lead):
        for qi in range(nq):
            for j in np.flatnonzero(a_s[b + (qi,)] > 0):
                sc = kw[b + (j,)] @ qw[b + (qi,)] / np.sqrt(dk)
                valid = wv[b + (j,)]
                if word_normalizer == "softmax":
                    sc = np.where(valid, sc, -np.inf)
                    e = np.exp(sc - sc.max())
                    w = e / e.sum()
                else:
                    w = masked_sparsemax_np(sc, ~valid).probs
                a_w[b + (qi, j)] = w
                out[b + (qi,)] += a_s[b + (qi, j)] * (w @ vw[b + (j,)])
    a_h = a_s[..., None] * a_w
    return Tensor(out), AttentionWeights(a_s, a_w, a_h)


# -- multi-head wrappers ---------------------------------------------------
@dataclass
class HeadProjections:
    """Column blocks of each ``d x d`` matrix are the per-head projections."""

    w_qs: Tensor
    w_qw: Tensor
    w_ks: Tensor
    w_kw: Tensor
    w_vw: Tensor
    w_o: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.w_o.shape[0]
        if d % self.n_heads:
            raise ValueError(f"{self.n_heads} heads do not divide model_dim {d}")


@dataclass
class FlatProjections:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.w_o.shape[0]
        if d % self.n_heads:
            raise ValueError(f"{self.n_heads} heads do not divide model_dim {d}")


def split_heads(x: Tensor, n_heads: int, item_axes: int = 1) -> Tensor:
    """``(..., *items, d)`` -> ``(..., H, *items, d/H)``."""
    d = x.shape[-1]
    if d % n_heads:
        raise ValueError(f"{n_heads} heads do not divide {d}")
    lead = x.shape[:x.ndim - 1 - item_axes]
    items = x.shape[x.ndim - 1 - item_axes:-1]
    y = T.reshape(x, (*lead, *items, n_heads, d // n_heads))
    nl = len(lead)
    order = list(range(nl)) + [nl + item_axes] + [nl + i for i in range(item_axes)] + [y.ndim - 1]
    return T.transpose(y, tuple(order))


def merge_heads(x: Tensor) -> Tensor:
    """``(..., H, N, dk)`` -> ``(..., N, H*dk)``."""
    nd = x.ndim
    order = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    y = T.transpose(x, tuple(order))
    return T.reshape(y, (*y.shape[:-2], y.shape[-2] * y.shape[-1]))


def _head_mask(blocked: np.ndarray | None) -> np.ndarray | None:
    return None if blocked is None else blocked[..., None, :, :]


def h_multi_head(q_s: Tensor, k_s: Tensor, q_w: Tensor, k_w: Tensor, v_w: Tensor, mask,
                 proj: HeadProjections, word_valid=None, word_normalizer: str = "softmax",
                 empty: str = "error"):
    """All five inputs projected per head, hierarchical attention per head, concat, ``W^O``."""
    d = proj.w_o.shape[0]
    for name, x in (("q_s", q_s), ("k_s", k_s), ("q_w", q_w), ("k_w", k_w), ("v_w", v_w)):
        if x.shape[-1] != d:
            raise ValueError(f"{name} has feature dim {x.shape[-1]}, expected {d}")
    h = proj.n_heads
    qs = split_heads(T.matmul(q_s, proj.w_qs), h)
    qw = split_heads(T.matmul(q_w, proj.w_qw), h)
    ks = split_heads(T.matmul(k_s, proj.w_ks), h)
    kw = split_heads(T.matmul(k_w, proj.w_kw), h, item_axes=2)
    vw = split_heads(T.matmul(v_w, proj.w_vw), h, item_axes=2)
    blocked = as_blocked(mask)
    wv = None if word_valid is None else np.asarray(word_valid, bool)[..., None, :, :]
    heads, weights = h_attention(qs, qw, ks, kw, vw, _head_mask(blocked), wv,
                                 word_normalizer, empty)
    return T.matmul(merge_heads(heads), proj.w_o), weights


def flat_multi_head(q: Tensor, k: Tensor, v: Tensor, mask, proj: FlatProjections,
                    normalizer: str = "softmax", empty: str = "error"):
    """Standard multi-head attention over sentence-level or word-level context rows."""
    h = proj.n_heads
    qh = split_heads(T.matmul(q, proj.w_q), h)
    kh = split_heads(T.matmul(k, proj.w_k), h)
    vh = split_heads(T.matmul(v, proj.w_v), h)
    heads, w = scaled_dot_attention(qh, kh, vh, _head_mask(as_blocked(mask)), normalizer, empty)
    return T.matmul(merge_heads(heads), proj.w_o), w


def group_by_sentence(rows: np.ndarray, lengths: Sequence[int]):
    """Flat ``(N_words, d)`` rows -> padded ``(J, T_max, d)`` plus validity mask."""
    rows = np.asarray(rows, dtype=np.float64)
    lengths = list(lengths)
    if sum(lengths) != rows.shape[0]:
        raise ValueError("sentence lengths do not partition the word rows")
    if any(n <= 0 for n in lengths):
        raise ValueError("empty sentence in boundary index")
    tmax = max(lengths)
    out = np.zeros((len(lengths), tmax) + rows.shape[1:])
    valid = np.zeros((len(lengths), tmax), bool)
    start = 0
    for j, n in enumerate(lengths):
        out[j, :n] = rows[start:start + n]
        valid[j, :n] = True
        start += n
    return out, valid
