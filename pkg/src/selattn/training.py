"""Two-stage training and teacher-forced document likelihoods."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .corpus import DocumentPair
from .model import DocBatch, Model, init_context_params, is_context_param
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainReport:
    stage: str
    train_loss: list[float] = field(default_factory=list)
    dev_loss: list[float] = field(default_factory=list)
    best_dev_loss: float = float("inf")
    best_epoch: int = -1
    patience_counter: int = 0
    stopped_early: bool = False
    final_dev_loss: float = float("nan")
    seconds: float = 0.0

    def to_text(self) -> str:
        """``key=value`` lines; wall-clock time is left out so reruns are byte-identical."""
        lines = [f"stage={self.stage}", f"epochs={len(self.train_loss)}"]
        lines += [f"train_loss.{i}={v!r}" for i, v in enumerate(self.train_loss)]
        lines += [f"dev_loss.{i}={v!r}" for i, v in enumerate(self.dev_loss)]
        lines += [f"best_dev_loss={float(self.best_dev_loss)!r}", f"best_epoch={self.best_epoch}",
                  f"patience_counter={self.patience_counter}",
                  f"stopped_early={self.stopped_early}",
                  f"final_dev_loss={float(self.final_dev_loss)!r}"]
        return "\n".join(lines) + "\n"


class EarlyStopping:
    """Track the best dev loss; ``update`` returns True once patience is exhausted."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_step = -1
        self.counter = 0

    def update(self, value: float, step: int) -> bool:
        if value < self.best:
            self.best, self.best_step, self.counter = value, step, 0
            return False
        self.counter += 1
        return self.counter >= self.patience


def batches(docs: Sequence[DocumentPair], batch_docs: int, rng: np.random.Generator | None = None):
    order = np.arange(len(docs)) if rng is None else rng.permutation(len(docs))
    for i in range(0, len(order), batch_docs):
        yield DocBatch.from_documents([docs[k] for k in order[i:i + batch_docs]])


def dev_loss(model: Model, docs: Sequence[DocumentPair], batch_docs: int = 16,
             context: bool | None = None) -> float:
    """Token-averaged label-smoothed loss with dropout disabled."""
    was_training, rate = model.training, model.dropout_rate
    model.eval()
    use_ctx = model.has_context if context is None else context
    total = weight = 0.0
    try:
        with T.no_grad():
            for b in batches(docs, batch_docs):
                logits = model.context_logits(b).logits if use_ctx else model.sentence_logits(b)
                w = b.loss_weights
                total += T.cross_entropy_label_smoothed(
                    logits, b.tgt_out, model.cfg.label_smoothing, w, reduction="sum").item()
                weight += w.sum()
    finally:
        if was_training:
            model.train(rate)
    return float(total / weight)


def document_log_likelihood(model: Model, doc: DocumentPair, context: bool | None = None) -> float:
    """Sum over sentences and positions of log P(y_n | y_<n, x, other sentences)."""
    return float(sentence_log_likelihoods(model, [doc], context)[0].sum())


def sentence_log_likelihoods(model: Model, docs: Sequence[DocumentPair],
                             context: bool | None = None) -> list[np.ndarray]:
    """Per-document arrays of per-sentence teacher-forced log-likelihoods (EOS included)."""
    use_ctx = model.has_context if context is None else context
    b = DocBatch.from_documents(docs)
    was_training, rate = model.training, model.dropout_rate
    model.eval()
    try:
        with T.no_grad():
            logits = model.context_logits(b).logits if use_ctx else model.sentence_logits(b)
    finally:
        if was_training:
            model.train(rate)
    lp = T.log_softmax_np(logits.data)
    tok = np.take_along_axis(lp, b.tgt_out[..., None], axis=-1)[..., 0] * b.loss_weights
    per_sent = tok.sum(axis=-1)
    return [per_sent[i, :len(d)] for i, d in enumerate(docs)]


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.params.items()}


def _restore(model: Model, snap: dict[str, np.ndarray]) -> None:
    for k, v in snap.items():
        model.params[k].data[...] = v


def _run(model: Model, train_docs, dev_docs, tcfg: TrainConfig, stage: str, dropout: float,
         trainable: set[str], use_context: bool) -> TrainReport:
    if not train_docs:
        raise TrainingError("empty training corpus")
    if not dev_docs:
        raise TrainingError("empty dev corpus")
    report = TrainReport(stage)
    opt = Adam(model.params, lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.adam_eps,
               trainable=trainable)
    stopper = EarlyStopping(tcfg.patience)
    rng = np.random.default_rng(tcfg.seed)
    best = _snapshot(model)
    t0 = time.time()
    for epoch in range(tcfg.max_epochs):
        model.train(dropout)
        total = weight = 0.0
        for b in batches(train_docs, tcfg.batch_docs, rng):
            opt.zero_grad()
            logits = model.context_logits(b).logits if use_context else model.sentence_logits(b)
            w = b.loss_weights
            loss = T.cross_entropy_label_smoothed(logits, b.tgt_out, model.cfg.label_smoothing,
                                                  w, reduction="mean")
            loss.backward()
            opt.step()
            total += loss.item() * w.sum()
            weight += w.sum()
        model.eval()
        dl = dev_loss(model, dev_docs, context=use_context)
        report.train_loss.append(float(total / weight))
        report.dev_loss.append(float(dl))
        stop = stopper.update(dl, epoch)
        if stopper.best_step == epoch:
            best = _snapshot(model)
        log.info("%s epoch %d train %.4f dev %.4f (%.0fs)", stage, epoch, total / weight, dl,
                 time.time() - t0)
        if stop:
            report.stopped_early = True
            break
    _restore(model, best)
    model.eval()
    report.best_dev_loss = stopper.best
    report.best_epoch = stopper.best_step
    report.patience_counter = stopper.counter
    report.final_dev_loss = dev_loss(model, dev_docs, context=use_context)
    report.seconds = time.time() - t0
    log.info("%s stage finished in %.1fs", stage, report.seconds)
    return report


def train_sentence_stage(model: Model, train_docs: Sequence[DocumentPair],
                         dev_docs: Sequence[DocumentPair], tcfg: TrainConfig) -> TrainReport:
    """Stage 1: context-agnostic Transformer; context parameters are left untouched."""
    trainable = {n for n in model.params if not is_context_param(n)}
    return _run(model, train_docs, dev_docs, tcfg, "sentence", model.cfg.dropout_sentence,
                trainable, use_context=False)


def prepare_context_model(stage1: Model, cfg: ModelConfig, seed: int | None = None) -> Model:
    """Copy stage-1 weights, add a fresh context layer, keep a frozen stage-1 copy."""
    base = stage1.cfg
    for f in ("src_vocab", "tgt_vocab", "model_dim", "ff_dim", "layers", "heads"):
        if getattr(base, f) != getattr(cfg, f):
            raise TrainingError(f"stage-1 model differs in {f}")
    params = {k: Tensor(v.data.copy(), requires_grad=True, name=k)
              for k, v in stage1.params.items() if not is_context_param(k)}
    rng = np.random.default_rng(cfg.seed + 7 if seed is None else seed)
    for k, v in init_context_params(cfg, rng).items():
        params[k] = Tensor(v, requires_grad=True, name=k)
    model = Model(cfg, params)
    model.sentence_params = {k: Tensor(v.data.copy(), name=k) for k, v in stage1.params.items()
                             if not is_context_param(k)}
    return model


def train_context_stage(model: Model, train_docs: Sequence[DocumentPair],
                        dev_docs: Sequence[DocumentPair], tcfg: TrainConfig) -> TrainReport:
    """Stage 2: all parameters jointly (or only the context ones with ``freeze_sentence``)."""
    if not model.has_context:
        raise TrainingError("model has no context layer")
    if model.sentence_params is None:
        raise TrainingError("context stage needs a model initialised from a stage-1 checkpoint")
    trainable = set(model.params)
    if tcfg.freeze_sentence:
        trainable = {n for n in model.params if is_context_param(n)}
    return _run(model, train_docs, dev_docs, tcfg, "context", model.cfg.dropout_context,
                trainable, use_context=True)
