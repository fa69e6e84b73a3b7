"""Dump the hierarchical context attention of one query token."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import DocBatch, Model


class NotHierarchicalError(ValueError):
    pass


@dataclass
class HeadDump:
    ranked: list[tuple[int, float]]          # (sentence, alpha_s), decreasing mass
    words: dict[int, list[float]]            # per listed sentence, word weights before rescaling
    pruned: int                              # visible sentences with exactly zero weight


@dataclass
class AttentionTraceDump:
    sentence: int
    token: int
    side: str
    heads: list[HeadDump] = field(default_factory=list)
    mean_sentence_weights: dict[int, float] = field(default_factory=dict)
    visible: list[int] = field(default_factory=list)
    words: dict[int, list[str]] = field(default_factory=dict)

    @property
    def ranking(self) -> list[int]:
        """Visible sentences ordered by head-averaged weight (ties by index)."""
        return sorted(self.visible, key=lambda j: (-self.mean_sentence_weights[j], j))

    @property
    def mean_pruned(self) -> float:
        return float(np.mean([h.pruned for h in self.heads])) if self.heads else 0.0

    def to_text(self) -> str:
        lines = [f"sentence={self.sentence}", f"token={self.token}", f"side={self.side}",
                 f"visible={' '.join(map(str, self.visible))}",
                 f"ranking={' '.join(map(str, self.ranking))}",
                 f"mean_pruned={self.mean_pruned!r}"]
        for h, hd in enumerate(self.heads):
            lines.append(f"head.{h}.pruned={hd.pruned}")
            for rank, (j, w) in enumerate(hd.ranked):
                lines.append(f"head.{h}.rank.{rank}=sentence {j} weight {w:.6f}")
                toks = self.words.get(j, [])
                cells = [f"{toks[i] if i < len(toks) else i}:{a:.6f}"
                         for i, a in enumerate(hd.words[j])]
                lines.append(f"head.{h}.words.{j}={' '.join(cells)}")
        return "\n".join(lines) + "\n"


def inspect_attention(model: Model, src_doc: Sequence[Sequence[int]], sentence: int, token: int,
                      tgt_doc: Sequence[Sequence[int]] | None = None,
                      vocab=None) -> AttentionTraceDump:
    """Sentence ranking, word weights before rescaling and pruned count per head.

    ``token`` indexes the query: a source position for encoder-side models, a
    target position for decoder-side ones (the query predicting target token
    ``token``; needs ``tgt_doc``).  ``vocab`` (source or target, matching the
    side) labels the words.
    """
    if not model.has_context or not model.cfg.hierarchical:
        raise NotHierarchicalError("attention inspection is only defined for hierarchical "
                                   "attention variants (hier-sparse-soft, hier-sparse-sparse)")
    if not 0 <= sentence < len(src_doc):
        raise IndexError(f"sentence {sentence} outside document of {len(src_doc)} sentences")
    side = model.cfg.integration
    model.eval()
    with T.no_grad():
        if side == "encoder":
            if not 0 <= token < len(src_doc[sentence]):
                raise IndexError(f"token {token} outside sentence of {len(src_doc[sentence])}")
            batch = DocBatch.build([src_doc])
            _, trace = model.encode_with_context(batch)
            width = batch.src.shape[2]
            ctx_words = src_doc
        else:
            if tgt_doc is None:
                raise ValueError("decoder-side inspection needs the target document")
            if not 0 <= token <= len(tgt_doc[sentence]):
                raise IndexError(f"token {token} outside target sentence")
            batch = DocBatch.build([src_doc], [tgt_doc], tgt_with_eos=False)
            trace = model.context_logits(batch).trace
            width = batch.tgt_in.shape[2]
            ctx_words = tgt_doc
    q = sentence * width + token
    w = trace["weights"]
    alpha_s = w.sentence[0, :, q]            # (H, J)
    alpha_w = w.word[0, :, q]                # (H, J, T)
    blocked = trace["blocked"][0, q]
    visible = [j for j in range(len(src_doc)) if not blocked[j]]
    lengths = [len(s) for s in ctx_words]
    dump = AttentionTraceDump(sentence, token, side, visible=visible)
    if vocab is not None:
        dump.words = {j: vocab.decode(ctx_words[j]) for j in visible}
    for h in range(alpha_s.shape[0]):
        ranked = sorted(((j, float(alpha_s[h, j])) for j in visible if alpha_s[h, j] > 0),
                        key=lambda t: (-t[1], t[0]))
        words = {j: [float(a) for a in alpha_w[h, j, :lengths[j]]] for j, _ in ranked}
        dump.heads.append(HeadDump(ranked, words, len(visible) - len(ranked)))
    dump.mean_sentence_weights = {j: float(alpha_s[:, j].mean()) for j in visible}
    return dump
