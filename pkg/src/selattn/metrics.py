"""Corpus BLEU, contrastive accuracy by antecedent distance, and synthetic-task accuracies."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

from .corpus import ContrastiveItem, DocumentPair
from .model import Model
from .training import sentence_log_likelihoods

Sentence = Sequence[Hashable]
BUCKETS = ("0", "1", "2", "3", ">3")


def _ngrams(tokens: Sentence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    hyp_len: int
    ref_len: int


def bleu_stats(hyps: Sequence[Sentence], refs: Sequence[Sentence], max_n: int = 4) -> BleuStats:
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not refs:
        raise ValueError("empty reference set")
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    return BleuStats(matches, totals, hyp_len, ref_len)


def corpus_bleu(hyps: Sequence[Sentence], refs: Sequence[Sentence], max_n: int = 4,
                smooth: bool = False) -> float:
    """Corpus-level BLEU in [0, 100] with brevity penalty and one reference per sentence.

    ``smooth`` adds one to the matched and total counts of every order n >= 2
    (BLEU+1), so short test corpora without 4-gram matches score above zero.
    """
    st = bleu_stats(hyps, refs, max_n)
    if st.hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        m, t = st.matches[n], st.totals[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t)
    bp = 1.0 if st.hyp_len > st.ref_len else math.exp(1.0 - st.ref_len / st.hyp_len)
    return 100.0 * bp * math.exp(log_p / max_n)


def flatten_documents(docs: Sequence[Sequence[Sentence]]) -> list[Sentence]:
    return [s for d in docs for s in d]


# -- contrastive evaluation -----------------------------------------------------
def distance_bucket(distance: int) -> str:
    if distance < 0:
        raise ValueError("distance must be non-negative")
    return str(distance) if distance <= 3 else ">3"


@dataclass
class ContrastiveReport:
    correct: dict[str, int] = field(default_factory=lambda: {b: 0 for b in BUCKETS})
    count: dict[str, int] = field(default_factory=lambda: {b: 0 for b in BUCKETS})

    def add(self, distance: int, is_correct: bool) -> None:
        b = distance_bucket(distance)
        self.count[b] += 1
        self.correct[b] += int(is_correct)

    def accuracy(self, bucket: str) -> float:
        """Accuracy of one bucket; NaN when the bucket is empty."""
        n = self.count[bucket]
        return self.correct[bucket] / n if n else float("nan")

    @property
    def total(self) -> int:
        return sum(self.count.values())

    @property
    def overall(self) -> float:
        return sum(self.correct.values()) / self.total if self.total else float("nan")

    def to_text(self) -> str:
        lines = [f"items={self.total}", f"overall={self.overall!r}"]
        for b in BUCKETS:
            lines += [f"count.{b}={self.count[b]}", f"accuracy.{b}={self.accuracy(b)!r}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ContrastiveReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        rep = cls()
        for b in BUCKETS:
            rep.count[b] = int(kv[f"count.{b}"])
            acc = float(kv[f"accuracy.{b}"])
            rep.correct[b] = 0 if math.isnan(acc) else round(acc * rep.count[b])
        return rep


def _with_sentence(doc: DocumentPair, j: int, tgt: list[int]) -> DocumentPair:
    tgt_doc = [list(s) for s in doc.tgt]
    tgt_doc[j] = list(tgt)
    return DocumentPair([list(s) for s in doc.src], tgt_doc, doc.doc_id)


def model_scores(model: Model, items: Sequence[ContrastiveItem], chunk: int = 32
                 ) -> list[np.ndarray]:
    """Teacher-forced log-likelihood of the item's sentence for [correct, *foils].

    The rest of the document keeps its reference targets, so decoder-side
    context is the gold translation of the other sentences.
    """
    flat, owners = [], []
    for i, it in enumerate(items):
        for cand in [it.correct, *it.foils]:
            flat.append(_with_sentence(it.doc, it.sentence, cand))
            owners.append(i)
    scores: list[list[float]] = [[] for _ in items]
    for start in range(0, len(flat), chunk):
        part = flat[start:start + chunk]
        lls = sentence_log_likelihoods(model, part)
        for k, ll in enumerate(lls):
            i = owners[start + k]
            scores[i].append(float(ll[items[i].sentence]))
    return [np.asarray(s) for s in scores]


def score_contrastive(model: Model | None, items: Sequence[ContrastiveItem],
                      scorer: Callable[[ContrastiveItem], Sequence[float]] | None = None
                      ) -> ContrastiveReport:
    """An item counts as correct iff its reference strictly outscores every foil.

    ``scorer`` (item -> scores for [correct, *foils]) replaces the model,
    e.g. for Monte Carlo checks; ties count as incorrect.
    """
    if scorer is None:
        if model is None:
            raise ValueError("need a model or a scorer")
        all_scores = model_scores(model, items)
    else:
        all_scores = [np.asarray(scorer(it), dtype=np.float64) for it in items]
    report = ContrastiveReport()
    for it, s in zip(items, all_scores):
        report.add(it.distance, bool(np.all(s[0] > s[1:])))
    return report


# -- synthetic-task accuracies -----------------------------------------------------
def position_accuracies(hyps: Sequence[Sequence[Sequence[int]]], docs: Sequence[DocumentPair],
                        amb_ids: Sequence[int]) -> tuple[float, float]:
    """(AMB-token accuracy, accuracy on every other reference token).

    The synthetic translation is monotone and length-preserving, so the
    hypothesis token at the reference position is the one compared.
    """
    amb = set(int(a) for a in amb_ids)
    a_ok = a_n = o_ok = o_n = 0
    for hd, doc in zip(hyps, docs):
        for h, r in zip(hd, doc.tgt):
            for p, t in enumerate(r):
                hit = p < len(h) and h[p] == t
                if t in amb:
                    a_n += 1
                    a_ok += hit
                else:
                    o_n += 1
                    o_ok += hit
    return (a_ok / a_n if a_n else float("nan"), o_ok / o_n if o_n else float("nan"))


def amb_decisions(hyps: Sequence[Sequence[Sequence[int]]], docs: Sequence[DocumentPair],
                  amb_ids: Sequence[int]) -> list[int | None]:
    """Hypothesis token at each reference AMB position (None if the hypothesis is short)."""
    amb = set(int(a) for a in amb_ids)
    out = []
    for hd, doc in zip(hyps, docs):
        for h, r in zip(hd, doc.tgt):
            for p, t in enumerate(r):
                if t in amb:
                    out.append(int(h[p]) if p < len(h) else None)
    return out
