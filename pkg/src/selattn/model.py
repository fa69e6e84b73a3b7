"""Transformer with a document-level context layer and context gating.

Documents are processed in padded batches of shape ``(B, J, T)`` (documents x
sentence slots x tokens).  The context cache for a document is built from the
same forward pass, so gradients flow through cached keys and values as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import (FlatProjections, HeadProjections, flat_multi_head, h_multi_head,
                        merge_heads, sentence_block_matrix, split_heads)
from .config import ModelConfig
from .corpus import BOS, EOS, PAD, DocumentPair
from .tensor import Tensor


class ContextMismatchError(ValueError):
    """Cache built for the other integration side, or a model without a context layer."""


# -- batching ----------------------------------------------------------------
def _pad(seqs: Sequence[Sequence[int]], length: int) -> np.ndarray:
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


@dataclass
class DocBatch:
    """Padded ids for B documents, sentence slots padded to the longest document."""

    src: np.ndarray          # (B, J, Ts)
    src_valid: np.ndarray    # (B, J, Ts) bool
    sent_valid: np.ndarray   # (B, J) bool
    tgt_in: np.ndarray | None = None    # (B, J, Tt): BOS y_1 .. y_N
    tgt_out: np.ndarray | None = None   # (B, J, Tt): y_1 .. y_N EOS
    tgt_valid: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.src.shape[:2]

    @classmethod
    def build(cls, src_docs: Sequence[Sequence[Sequence[int]]],
              tgt_docs: Sequence[Sequence[Sequence[int]]] | None = None,
              tgt_with_eos: bool = True) -> "DocBatch":
        """``tgt_docs`` holds plain target sentences (no BOS/EOS); empty ones are allowed."""
        n_docs = len(src_docs)
        n_sent = max(len(d) for d in src_docs)
        ts = max(max(len(s) for s in d) for d in src_docs)
        src = np.full((n_docs, n_sent, ts), PAD, dtype=np.int64)
        sent_valid = np.zeros((n_docs, n_sent), bool)
        for b, d in enumerate(src_docs):
            src[b, :len(d)] = _pad(d, ts)
            sent_valid[b, :len(d)] = True
        src_valid = src != PAD
        # empty slots keep one visible token so no self-attention row is all-masked
        src_valid[..., 0] |= ~sent_valid
        batch = cls(src, src_valid, sent_valid)
        if tgt_docs is not None:
            extra = 1 if tgt_with_eos else 0
            tt = max(1, max(max((len(s) for s in d), default=0) for d in tgt_docs)) + 1
            tgt_in = np.full((n_docs, n_sent, tt), PAD, dtype=np.int64)
            tgt_out = np.full((n_docs, n_sent, tt), PAD, dtype=np.int64)
            tgt_valid = np.zeros((n_docs, n_sent, tt), bool)
            for b, d in enumerate(tgt_docs):
                if len(d) != len(src_docs[b]):
                    raise ValueError(f"document {b}: source/target sentence counts differ")
                for j, s in enumerate(d):
                    n = len(s)
                    tgt_in[b, j, 0] = BOS
                    tgt_in[b, j, 1:n + 1] = s
                    tgt_out[b, j, :n] = s
                    if tgt_with_eos:
                        tgt_out[b, j, n] = EOS
                    tgt_valid[b, j, :n + extra] = True
            tgt_valid[..., 0] |= ~sent_valid
            batch.tgt_in, batch.tgt_out, batch.tgt_valid = tgt_in, tgt_out, tgt_valid
        return batch

    @classmethod
    def from_documents(cls, docs: Sequence[DocumentPair]) -> "DocBatch":
        return cls.build([d.src for d in docs], [d.tgt for d in docs])

    @property
    def loss_weights(self) -> np.ndarray:
        return (self.tgt_valid & self.sent_valid[..., None]).astype(np.float64)

    @property
    def tgt_in_valid(self) -> np.ndarray:
        """Valid decoder input positions: BOS plus the target tokens."""
        v = self.tgt_in != PAD
        v[..., 0] = True
        return v


# -- parameters ---------------------------------------------------------------
def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _xavier(rng, n_in, n_out):
    lim = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


def _mha_params(p: dict, prefix: str, d: int, rng) -> None:
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.w{name}"] = _xavier(rng, d, d)
        p[f"{prefix}.b{name}"] = np.zeros(d)


def _ln_params(p: dict, prefix: str, d: int) -> None:
    p[f"{prefix}.g"] = np.ones(d)
    p[f"{prefix}.b"] = np.zeros(d)


def _ff_params(p: dict, prefix: str, d: int, ff: int, rng, init=None) -> None:
    if init is None:
        p[f"{prefix}.w1"] = _xavier(rng, d, ff)
        p[f"{prefix}.w2"] = _xavier(rng, ff, d)
    else:
        p[f"{prefix}.w1"] = rng.uniform(-init, init, size=(d, ff))
        p[f"{prefix}.w2"] = rng.uniform(-init, init, size=(ff, d))
    p[f"{prefix}.b1"] = np.zeros(ff)
    p[f"{prefix}.b2"] = np.zeros(d)


def init_sentence_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = cfg.model_dim
    p: dict[str, np.ndarray] = {}
    p["src_emb"] = rng.normal(0.0, d ** -0.5, size=(cfg.src_vocab, d))
    p["tgt_emb"] = rng.normal(0.0, d ** -0.5, size=(cfg.tgt_vocab, d))
    for l in range(cfg.layers):
        _mha_params(p, f"enc.{l}.self", d, rng)
        _ln_params(p, f"enc.{l}.ln1", d)
        _ff_params(p, f"enc.{l}.ff", d, cfg.ff_dim, rng)
        _ln_params(p, f"enc.{l}.ln2", d)
    for l in range(cfg.layers):
        _mha_params(p, f"dec.{l}.self", d, rng)
        _ln_params(p, f"dec.{l}.ln1", d)
        _mha_params(p, f"dec.{l}.src", d, rng)
        _ln_params(p, f"dec.{l}.ln2", d)
        _ff_params(p, f"dec.{l}.ff", d, cfg.ff_dim, rng)
        _ln_params(p, f"dec.{l}.ln3", d)
    p["out.w"] = _xavier(rng, d, cfg.tgt_vocab)
    p["out.b"] = np.zeros(cfg.tgt_vocab)
    return p


CONTEXT_INIT = 0.05
CONTEXT_OUT_GAIN = 0.1
HIER_PROJ = ("w_qs", "w_qw", "w_ks", "w_kw", "w_vw", "w_o")
FLAT_PROJ = ("w_q", "w_k", "w_v", "w_o")


def init_context_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Context layer (attention, FF, two layer norms) and the gate; gate starts at 0.5."""
    d = cfg.model_dim
    p: dict[str, np.ndarray] = {}
    names = HIER_PROJ if cfg.hierarchical else FLAT_PROJ
    for n in names:
        p[f"ctx.att.{n}"] = rng.uniform(-CONTEXT_INIT, CONTEXT_INIT, size=(d, d))
    _ln_params(p, "ctx.ln1", d)
    _ff_params(p, "ctx.ff", d, cfg.ff_dim, rng, init=CONTEXT_INIT)
    _ln_params(p, "ctx.ln2", d)
    # small output gain: d starts near zero so the gated mix starts near the sentence model
    p["ctx.ln2.g"] *= CONTEXT_OUT_GAIN
    p["gate.w_r"] = np.zeros((d, d))
    p["gate.w_d"] = np.zeros((d, d))
    return p


def is_context_param(name: str) -> bool:
    return name.startswith(("ctx.", "gate."))


# -- building blocks -----------------------------------------------------------
@dataclass
class ContextCache:
    """Keys/values of every sentence slot of B documents.

    ``k_w``/``v_w``: ``(B, J, T, d)``; ``k_s``/``v_s``: ``(B, J, d)`` means of
    the valid word rows; ``word_valid``: ``(B, J, T)``; ``sent_valid``: ``(B, J)``.
    """

    k_w: Tensor
    v_w: Tensor
    k_s: Tensor
    v_s: Tensor
    word_valid: np.ndarray
    sent_valid: np.ndarray
    side: str

    @property
    def lengths(self) -> np.ndarray:
        return self.word_valid.sum(axis=-1)

    def boundaries(self, b: int = 0) -> list[tuple[int, int]]:
        """Token-offset range of each sentence in the concatenated document."""
        out, start = [], 0
        for j in range(self.word_valid.shape[1]):
            if not self.sent_valid[b, j]:
                continue
            n = int(self.lengths[b, j])
            out.append((start, start + n))
            start += n
        return out


def masked_mean(x: Tensor, valid: np.ndarray) -> Tensor:
    """Mean over axis -2 restricted to ``valid`` rows (empty rows give zeros)."""
    w = valid.astype(np.float64)
    cnt = np.maximum(w.sum(axis=-1, keepdims=True), 1.0)
    return T.tsum(T.mul(x, (w / cnt)[..., None]), axis=-2)


def make_cache(keys: Tensor, values: Tensor, word_valid: np.ndarray, sent_valid: np.ndarray,
               side: str) -> ContextCache:
    sent_valid = sent_valid & word_valid.any(axis=-1)
    return ContextCache(keys, values, masked_mean(keys, word_valid),
                        masked_mean(values, word_valid), word_valid, sent_valid, side)


def context_gate(r: Tensor, d: Tensor, w_r: Tensor, w_d: Tensor, force: float | None = None):
    """``g = sigmoid(r W_r + d W_d)``; returns ``(g * r + (1 - g) * d, g)``.

    ``force`` pins the gate to a constant (used to switch context off exactly).
    """
    if r.shape != d.shape:
        raise ValueError(f"gate inputs differ in shape: {r.shape} vs {d.shape}")
    if force is None:
        g = T.sigmoid(T.add(T.matmul(r, w_r), T.matmul(d, w_d)))
        return T.add(T.mul(g, r), T.mul(T.sub(1.0, g), d)), g
    g = Tensor(np.full(r.shape, float(force)))
    return T.add(T.mul(g, r), T.mul(1.0 - float(force), d)), g


@dataclass
class ForwardOutput:
    logits: Tensor
    trace: dict = field(default_factory=dict)


class Model:
    """Parameters plus the forward computations for every configuration."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None,
                 with_context: bool = True, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng or np.random.default_rng(cfg.seed)
        if params is None:
            raw = init_sentence_params(cfg, rng)
            if with_context:
                raw.update(init_context_params(cfg, rng))
            params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
        self.params = params
        self.pos = sinusoidal_positions(cfg.max_positions, cfg.model_dim)
        self.training = False
        self.dropout_rate = 0.0
        self.dropout_rng = np.random.default_rng(cfg.seed + 1)
        self.gate_force: float | None = None
        # frozen stage-1 weights used for the first pass of iterative decoding
        self.sentence_params: dict[str, Tensor] | None = None

    # -- bookkeeping
    @property
    def has_context(self) -> bool:
        return "gate.w_r" in self.params

    def add_context_layer(self, rng: np.random.Generator | None = None) -> None:
        rng = rng or np.random.default_rng(self.cfg.seed + 7)
        for k, v in init_context_params(self.cfg, rng).items():
            self.params[k] = Tensor(v, requires_grad=True, name=k)

    def n_parameters(self, context_only: bool = False) -> int:
        return sum(p.size for n, p in self.params.items()
                   if not context_only or is_context_param(n))

    def train(self, rate: float) -> None:
        self.training, self.dropout_rate = True, rate

    def eval(self) -> None:
        self.training, self.dropout_rate = False, 0.0

    def _drop(self, x: Tensor, rate: float | None = None) -> Tensor:
        r = self.dropout_rate if rate is None else rate
        return T.dropout(x, r, self.dropout_rng, self.training)

    def _p(self, name: str, params=None) -> Tensor:
        return (params or self.params)[name]

    # -- transformer pieces
    def _mha(self, prefix, x_q, x_kv, blocked, P):
        h = self.cfg.heads
        q = split_heads(T.linear(x_q, P[f"{prefix}.wq"], P[f"{prefix}.bq"]), h)
        k = split_heads(T.linear(x_kv, P[f"{prefix}.wk"], P[f"{prefix}.bk"]), h)
        v = split_heads(T.linear(x_kv, P[f"{prefix}.wv"], P[f"{prefix}.bv"]), h)
        dk = q.shape[-1]
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
        scores = T.masked_fill(scores, blocked[:, None], T.NEG_LARGE)
        w = self._drop(T.softmax(scores, axis=-1))
        out = merge_heads(T.matmul(w, v))
        return T.linear(out, P[f"{prefix}.wo"], P[f"{prefix}.bo"])

    def _ff(self, prefix, x, P):
        h = self._drop(T.relu(T.linear(x, P[f"{prefix}.w1"], P[f"{prefix}.b1"])))
        return T.linear(h, P[f"{prefix}.w2"], P[f"{prefix}.b2"])

    def _ln(self, prefix, x, P):
        return T.layer_norm(x, P[f"{prefix}.g"], P[f"{prefix}.b"])

    def _embed(self, table: Tensor, ids: np.ndarray) -> Tensor:
        n = ids.shape[-1]
        if n > self.cfg.max_positions:
            raise ValueError(f"sequence of length {n} exceeds max_positions")
        e = T.scale(T.embedding(table, ids), np.sqrt(self.cfg.model_dim))
        return self._drop(T.add(e, self.pos[:n]))

    def encode(self, src: np.ndarray, src_valid: np.ndarray, P=None) -> Tensor:
        """``src``: ``(S, Ts)`` -> last encoder layer output ``(S, Ts, d)``."""
        P = P or self.params
        x = self._embed(P["src_emb"], src)
        blocked = np.broadcast_to(~src_valid[:, None, :], (src.shape[0], src.shape[1], src.shape[1]))
        for l in range(self.cfg.layers):
            a = self._mha(f"enc.{l}.self", x, x, blocked, P)
            x = self._ln(f"enc.{l}.ln1", T.add(x, self._drop(a)), P)
            f = self._ff(f"enc.{l}.ff", x, P)
            x = self._ln(f"enc.{l}.ln2", T.add(x, self._drop(f)), P)
        return x

    def decode(self, tgt_in: np.ndarray, memory: Tensor, src_valid: np.ndarray, P=None):
        """Teacher-forced decoder; returns ``(hidden, src_context)`` of the last layer.

        ``src_context`` is the raw multi-head source-attention output (the
        context vectors) of the last layer, before its residual and norm.
        """
        P = P or self.params
        s, tt = tgt_in.shape
        ts = src_valid.shape[1]
        x = self._embed(P["tgt_emb"], tgt_in)
        causal = np.triu(np.ones((tt, tt), bool), k=1)[None]
        self_blocked = np.broadcast_to(causal, (s, tt, tt))
        src_blocked = np.broadcast_to(~src_valid[:, None, :], (s, tt, ts))
        ctx = None
        for l in range(self.cfg.layers):
            a = self._mha(f"dec.{l}.self", x, x, self_blocked, P)
            x = self._ln(f"dec.{l}.ln1", T.add(x, self._drop(a)), P)
            ctx = self._mha(f"dec.{l}.src", x, memory, src_blocked, P)
            x = self._ln(f"dec.{l}.ln2", T.add(x, self._drop(ctx)), P)
            f = self._ff(f"dec.{l}.ff", x, P)
            x = self._ln(f"dec.{l}.ln3", T.add(x, self._drop(f)), P)
        return x, ctx

    def project(self, hidden: Tensor, P=None) -> Tensor:
        P = P or self.params
        return T.linear(hidden, P["out.w"], P["out.b"])

    # -- context layer
    def context_layer(self, queries: Tensor, query_sentence: np.ndarray, cache: ContextCache,
                      P=None):
        """Context attention -> norm -> feed-forward -> norm, no residual connections.

        ``queries``: ``(B, Nq, d)``; ``query_sentence``: ``(B, Nq)`` sentence index
        of every query.  Queries without any visible context sentence get ``d = 0``.
        Returns ``(d, trace)``.
        """
        P = P or self.params
        cfg = self.cfg
        b, nq, _ = queries.shape
        n_sent = cache.sent_valid.shape[1]
        blocked = np.stack([sentence_block_matrix(query_sentence[i], n_sent, cfg.setting,
                                                  cache.sent_valid[i]) for i in range(b)])
        has_ctx = (~blocked.all(axis=-1)).astype(np.float64)[..., None]
        trace = {"blocked": blocked}
        if cfg.hierarchical:
            proj = HeadProjections(*(P[f"ctx.att.{n}"] for n in HIER_PROJ), n_heads=cfg.heads)
            a, weights = h_multi_head(queries, cache.k_s, queries, cache.k_w, cache.v_w, blocked,
                                      proj, cache.word_valid, cfg.word_normalizer, empty="zero")
            trace["weights"] = weights
        else:
            proj = FlatProjections(*(P[f"ctx.att.{n}"] for n in FLAT_PROJ), n_heads=cfg.heads)
            if cfg.attention == "flat-sentence":
                a, w = flat_multi_head(queries, cache.k_s, cache.v_s, blocked, proj, empty="zero")
            else:
                _, js, ts, d = cache.k_w.shape
                word_blocked = blocked[..., None] | ~cache.word_valid[:, None]
                a, w = flat_multi_head(queries, T.reshape(cache.k_w, (b, js * ts, d)),
                                       T.reshape(cache.v_w, (b, js * ts, d)),
                                       word_blocked.reshape(b, nq, js * ts), proj, empty="zero")
            trace["flat_weights"] = w.data
        rate = cfg.dropout_context if self.training else 0.0
        x = self._ln("ctx.ln1", self._drop(a, rate), P)
        f = T.linear(self._drop(T.relu(T.linear(x, P["ctx.ff.w1"], P["ctx.ff.b1"])), rate),
                     P["ctx.ff.w2"], P["ctx.ff.b2"])
        d_out = self._ln("ctx.ln2", self._drop(f, rate), P)
        return T.mul(d_out, has_ctx), trace

    def gate(self, r: Tensor, d: Tensor, P=None):
        P = P or self.params
        return context_gate(r, d, P["gate.w_r"], P["gate.w_d"], self.gate_force)

    # -- caches
    def encoder_cache(self, enc: Tensor, batch: DocBatch) -> ContextCache:
        b, j = batch.shape
        r = T.reshape(enc, (b, j, enc.shape[-2], enc.shape[-1]))
        valid = batch.src_valid & batch.sent_valid[..., None]
        return make_cache(r, r, valid, batch.sent_valid, "encoder")

    def decoder_cache(self, hidden: Tensor, ctx: Tensor, batch: DocBatch) -> ContextCache:
        """Keys: source-attention context vectors; values: decoder hidden states.

        Rows are the decoder positions whose input is a target token
        (``y_1 .. y_N``), so a sentence has exactly as many rows as tokens.
        """
        if batch.tgt_in is None:
            raise ContextMismatchError("decoder-side context needs target sentences")
        b, j = batch.shape
        tt, d = hidden.shape[-2:]
        keys = T.reshape(ctx, (b, j, tt, d))[:, :, 1:]
        vals = T.reshape(hidden, (b, j, tt, d))[:, :, 1:]
        valid = (batch.tgt_in[:, :, 1:] != PAD) & batch.sent_valid[..., None]
        return make_cache(keys, vals, valid, batch.sent_valid, "decoder")

    # -- whole-batch forward passes
    def sentence_logits(self, batch: DocBatch, P=None) -> Tensor:
        """Context-agnostic logits ``(B, J, Tt, V)`` for every sentence slot."""
        b, j, ts = batch.src.shape
        tt = batch.tgt_in.shape[-1]
        src_valid = batch.src_valid.reshape(b * j, ts)
        enc = self.encode(batch.src.reshape(b * j, ts), src_valid, P)
        hidden, _ = self.decode(batch.tgt_in.reshape(b * j, tt), enc, src_valid, P)
        return T.reshape(self.project(hidden, P), (b, j, tt, -1))

    def encode_with_context(self, batch: DocBatch, P=None):
        """Encoder side: gated encoder states ``(B*J, Ts, d)`` and the trace."""
        P = P or self.params
        b, j, ts = batch.src.shape
        src_valid = batch.src_valid.reshape(b * j, ts)
        enc = self.encode(batch.src.reshape(b * j, ts), src_valid, P)
        cache = self.encoder_cache(enc, batch)
        queries = T.reshape(enc, (b, j * ts, enc.shape[-1]))
        qsent = np.repeat(np.arange(j), ts)[None].repeat(b, axis=0)
        d, trace = self.context_layer(queries, qsent, cache, P)
        r_tilde, g = self.gate(queries, d, P)
        trace.update(gate=g.data, cache=cache, query_sentence=qsent)
        return T.reshape(r_tilde, enc.shape), trace

    def context_logits(self, batch: DocBatch, P=None) -> ForwardOutput:
        """Teacher-forced logits ``(B, J, Tt, V)`` with the document context layer."""
        if not self.has_context:
            raise ContextMismatchError("model has no context layer")
        P = P or self.params
        b, j, ts = batch.src.shape
        tt = batch.tgt_in.shape[-1]
        src_valid = batch.src_valid.reshape(b * j, ts)
        tgt_in = batch.tgt_in.reshape(b * j, tt)
        if self.cfg.integration == "encoder":
            memory, trace = self.encode_with_context(batch, P)
            hidden, _ = self.decode(tgt_in, memory, src_valid, P)
            logits = self.project(hidden, P)
        else:
            enc = self.encode(batch.src.reshape(b * j, ts), src_valid, P)
            hidden, ctx = self.decode(tgt_in, enc, src_valid, P)
            cache = self.decoder_cache(hidden, ctx, batch)
            queries = T.reshape(ctx, (b, j * tt, ctx.shape[-1]))
            qsent = np.repeat(np.arange(j), tt)[None].repeat(b, axis=0)
            d, trace = self.context_layer(queries, qsent, cache, P)
            r_tilde, g = self.gate(T.reshape(hidden, queries.shape), d, P)
            trace.update(gate=g.data, cache=cache, query_sentence=qsent)
            logits = self.project(r_tilde, P)
        return ForwardOutput(T.reshape(logits, (b, j, tt, -1)), trace)

    def logits(self, batch: DocBatch, P=None) -> Tensor:
        return self.context_logits(batch, P).logits if self.has_context else \
            self.sentence_logits(batch, P)

    def loss(self, batch: DocBatch, smoothing: float | None = None, P=None) -> Tensor:
        """Label-smoothed cross-entropy averaged over the batch's target tokens."""
        eps = self.cfg.label_smoothing if smoothing is None else smoothing
        return T.cross_entropy_label_smoothed(self.logits(batch, P), batch.tgt_out, eps,
                                              batch.loss_weights, reduction="mean")

    # -- per-sentence API
    def sentence_forward(self, src: Sequence[int], tgt_prefix: Sequence[int], P=None) -> Tensor:
        """Context-agnostic logits ``(len(prefix), V)``; ``tgt_prefix`` starts with BOS."""
        self._check_ids(src, self.cfg.src_vocab)
        self._check_ids(tgt_prefix, self.cfg.tgt_vocab)
        src_a = np.asarray([src], dtype=np.int64)
        enc = self.encode(src_a, src_a != PAD, P)
        hidden, _ = self.decode(np.asarray([tgt_prefix], dtype=np.int64), enc, src_a != PAD, P)
        return self.project(hidden, P)[0]

    @staticmethod
    def _check_ids(ids, vocab_size):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
            raise IndexError(f"token id outside vocabulary of size {vocab_size}")

    def encode_document(self, src_doc: Sequence[Sequence[int]],
                        tgt_doc: Sequence[Sequence[int]] | None = None, P=None) -> "EncodedDocument":
        """Run the (context-free) stacks over every sentence of one document.

        Each sentence runs at its own length and is zero-padded afterwards:
        BLAS results depend on matrix shapes, so this keeps a sentence's states
        independent of how long its neighbours are.
        """
        batch = DocBatch.build([src_doc], None if tgt_doc is None else [tgt_doc])
        j, ts = batch.src.shape[1:]
        encs, hids, ctxs = [], [], []
        for k in range(j):
            n = max(int(batch.src_valid[0, k].sum()), 1)
            src = batch.src[0, k:k + 1, :n]
            enc = self.encode(src, src != PAD, P)
            encs.append(_pad_rows(enc[0], ts))
            if tgt_doc is not None:
                tt = batch.tgt_in.shape[2]
                m = max(int((batch.tgt_in[0, k] != PAD).sum()), 1)
                h, c = self.decode(batch.tgt_in[0, k:k + 1, :m], enc, src != PAD, P)
                hids.append(_pad_rows(h[0], tt))
                ctxs.append(_pad_rows(c[0], tt))
        hidden = ctx = None
        if tgt_doc is not None:
            hidden, ctx = T.stack(hids), T.stack(ctxs)
        return EncodedDocument(batch, T.stack(encs), hidden, ctx)

    def build_cache(self, encoded: "EncodedDocument") -> ContextCache:
        if self.cfg.integration == "encoder":
            return build_encoder_context(encoded)
        return build_decoder_context(encoded)

    def forward_with_context(self, src_doc: Sequence[Sequence[int]], j: int,
                             tgt_prefix: Sequence[int], cache: ContextCache, P=None):
        """Logits ``(len(prefix), V)`` for sentence ``j`` given a prebuilt document cache."""
        if not self.has_context:
            raise ContextMismatchError("model has no context layer")
        if cache.side != self.cfg.integration:
            raise ContextMismatchError(f"cache built for {cache.side} side, model integrates "
                                       f"into the {self.cfg.integration}")
        if not 0 <= j < len(src_doc):
            raise IndexError(f"sentence {j} outside document of {len(src_doc)} sentences")
        P = P or self.params
        self._check_ids(src_doc[j], self.cfg.src_vocab)
        self._check_ids(tgt_prefix, self.cfg.tgt_vocab)
        src = np.asarray([src_doc[j]], dtype=np.int64)
        src_valid = src != PAD
        tgt = np.asarray([tgt_prefix], dtype=np.int64)
        enc = self.encode(src, src_valid, P)
        if self.cfg.setting == "online":
            # only the visible prefix is read, so later sentences cannot move even
            # the rounding of these logits
            cache = visible_prefix(cache, j + 1)
        if self.cfg.integration == "encoder":
            qsent = np.full((1, src.shape[1]), j)
            d, trace = self.context_layer(enc, qsent, cache, P)
            memory, g = self.gate(enc, d, P)
            hidden, _ = self.decode(tgt, memory, src_valid, P)
            logits = self.project(hidden, P)
        else:
            hidden, ctx = self.decode(tgt, enc, src_valid, P)
            qsent = np.full((1, tgt.shape[1]), j)
            d, trace = self.context_layer(ctx, qsent, cache, P)
            r_tilde, g = self.gate(hidden, d, P)
            logits = self.project(r_tilde, P)
        trace.update(gate=g.data, d=d.data)
        return logits[0], trace


def _pad_rows(x: Tensor, n: int) -> Tensor:
    """Zero rows appended along axis 0 up to length ``n``."""
    if x.shape[0] == n:
        return x
    return T.concat([x, Tensor(np.zeros((n - x.shape[0], *x.shape[1:])))], axis=0)


def visible_prefix(cache: ContextCache, n: int) -> ContextCache:
    """The first ``n`` sentence slots, trimmed to the longest of them."""
    width = max(int(cache.lengths[:, :n].max(initial=0)), 1)
    words = (slice(None), slice(0, n), slice(0, width))
    sents = (slice(None), slice(0, n))
    return ContextCache(T.index(cache.k_w, words), T.index(cache.v_w, words),
                        T.index(cache.k_s, sents), T.index(cache.v_s, sents),
                        cache.word_valid[words], cache.sent_valid[sents], cache.side)


@dataclass
class EncodedDocument:
    batch: DocBatch          # one document: B = 1
    enc: Tensor              # (J, Ts, d) last encoder layer
    hidden: Tensor | None    # (J, Tt, d) last decoder layer (teacher forced)
    src_context: Tensor | None  # (J, Tt, d) last-layer source-attention context vectors


def build_encoder_context(encoded: EncodedDocument) -> ContextCache:
    """Word keys = values = encoder states; sentence keys/values = their means."""
    if encoded.enc.shape[0] == 0:
        raise ValueError("empty document")
    j, ts, d = encoded.enc.shape
    r = T.reshape(encoded.enc, (1, j, ts, d))
    return make_cache(r, r, encoded.batch.src_valid, encoded.batch.sent_valid, "encoder")


def build_decoder_context(encoded: EncodedDocument) -> ContextCache:
    """Word keys = source-attention context vectors, values = target hidden states."""
    if encoded.hidden is None:
        raise ContextMismatchError("decoder-side context needs the target side of the document")
    j, tt, d = encoded.hidden.shape
    keys = T.reshape(encoded.src_context, (1, j, tt, d))[:, :, 1:]
    vals = T.reshape(encoded.hidden, (1, j, tt, d))[:, :, 1:]
    valid = encoded.batch.tgt_in[:, :, 1:] != PAD
    return make_cache(keys, vals, valid, encoded.batch.sent_valid, "decoder")
