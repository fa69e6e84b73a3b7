"""Command-line entry points: data generation, training, decoding, evaluation, inspection."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import load_model, save_model
from .config import load_configs
from .corpus import (EMPTY_SENTENCE, generate_contrastive_set, generate_synthetic_docs,
                     load_corpus_dir, load_source_documents, read_contrastive_items,
                     read_documents, write_contrastive_items, write_corpus_dir, write_documents)
from .decoding import decode_documents, iterative_decode
from .inspection import inspect_attention
from .metrics import corpus_bleu, flatten_documents, score_contrastive
from .model import Model
from .training import prepare_context_model, train_context_stage, train_sentence_stage

log = logging.getLogger("selattn")


def _parse_distances(text: str | None):
    if not text:
        return None
    return [int(x) for x in text.split(",")]


def cmd_gen_data(a) -> int:
    corpus = generate_synthetic_docs(a.seed, a.docs, a.doc_len, a.sent_len, a.vocab_size,
                                     a.classes, _parse_distances(a.distances))
    out = Path(a.out)
    write_corpus_dir(out, corpus.docs, corpus.src_vocab, corpus.tgt_vocab)
    info = [f"doc={i} class={inf.cls} marker_sentence={inf.marker_sentence} "
            f"marker_position={inf.marker_position} amb_sentence={inf.amb_sentence} "
            f"amb_position={inf.amb_position} distance={inf.distance}\n"
            for i, inf in enumerate(corpus.info)]
    (out / "info.txt").write_text("".join(info), encoding="utf-8")
    write_contrastive_items(generate_contrastive_set(corpus), out / "contrastive",
                            corpus.src_vocab, corpus.tgt_vocab)
    print(f"documents={len(corpus.docs)}")
    print(f"src_vocab={len(corpus.src_vocab)}")
    print(f"tgt_vocab={len(corpus.tgt_vocab)}")
    return 0


def cmd_train(a) -> int:
    train_docs, src_vocab, tgt_vocab = load_corpus_dir(a.train)
    dev_docs, _, _ = load_corpus_dir(a.dev, src_vocab, tgt_vocab)
    cfg, tcfg = load_configs(Path(a.config).read_text(encoding="utf-8"))
    cfg = cfg.with_(src_vocab=len(src_vocab), tgt_vocab=len(tgt_vocab))
    if a.stage == "sentence":
        if a.init:
            model, _, _ = load_model(a.init, expect=cfg)
        else:
            model = Model(cfg, with_context=False)
        report = train_sentence_stage(model, train_docs, dev_docs, tcfg)
    else:
        if not a.init:
            print("error: --stage context needs --init with a stage-1 checkpoint", file=sys.stderr)
            return 2
        stage1, _, _ = load_model(a.init, expect=cfg)
        if stage1.has_context:
            print("error: --init must be a sentence-stage checkpoint", file=sys.stderr)
            return 2
        model = prepare_context_model(stage1, cfg)
        report = train_context_stage(model, train_docs, dev_docs, tcfg)
    save_model(model, a.out, src_vocab, tgt_vocab)
    Path(str(a.out) + ".report").write_text(report.to_text(), encoding="utf-8")
    print(f"parameters={model.n_parameters()}")
    print(f"context_parameters={model.n_parameters(context_only=True)}")
    print(report.to_text(), end="")
    return 0


def _load_for_inference(path):
    model, src_vocab, tgt_vocab = load_model(path)
    if src_vocab is None or tgt_vocab is None:
        raise SystemExit(f"error: checkpoint {path} carries no vocabularies")
    return model, src_vocab, tgt_vocab


def cmd_translate(a) -> int:
    model, src_vocab, tgt_vocab = _load_for_inference(a.ckpt)
    src_docs = load_source_documents(a.src, src_vocab)
    if a.iterative:
        hyps = iterative_decode(model, src_docs)
    else:
        hyps = decode_documents(model, src_docs)
    write_documents([[tgt_vocab.decode(s) or [EMPTY_SENTENCE] for s in d] for d in hyps], a.out)
    return 0


def cmd_eval_bleu(a) -> int:
    hyp = [[t for t in s if t != EMPTY_SENTENCE] for s in flatten_documents(read_documents(a.hyp))]
    ref = flatten_documents(read_documents(a.ref))
    print(f"bleu={corpus_bleu(hyp, ref, smooth=a.smooth)!r}")
    return 0


def cmd_eval_contrastive(a) -> int:
    model, src_vocab, tgt_vocab = _load_for_inference(a.ckpt)
    items = read_contrastive_items(a.items, src_vocab, tgt_vocab)
    report = score_contrastive(model, items)
    Path(a.report).write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    return 0


def cmd_inspect(a) -> int:
    model, src_vocab, tgt_vocab = _load_for_inference(a.ckpt)
    docs = load_source_documents(a.doc, src_vocab)
    if len(docs) != 1:
        print(f"error: {a.doc} holds {len(docs)} documents, expected 1", file=sys.stderr)
        return 2
    tgt_doc, vocab = None, src_vocab
    if model.cfg.integration == "decoder":
        tgt_doc, vocab = iterative_decode(model, docs)[0], tgt_vocab
    dump = inspect_attention(model, docs[0], a.sentence, a.token, tgt_doc, vocab)
    print(dump.to_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selattn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic disambiguation corpus")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--docs", type=int, required=True)
    g.add_argument("--doc-len", type=int, required=True, help="sentences per document")
    g.add_argument("--sent-len", type=int, required=True, help="tokens per sentence")
    g.add_argument("--classes", type=int, required=True, help="number of ambiguity classes")
    g.add_argument("--vocab-size", type=int, default=50)
    g.add_argument("--distances", help="comma-separated marker distances (default 0..4 and >4)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", choices=("sentence", "context"), required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--train", required=True)
    t.add_argument("--dev", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="greedy document translation")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--src", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--iterative", action="store_true")
    tr.set_defaults(func=cmd_translate)

    b = sub.add_parser("eval-bleu", help="corpus BLEU of two document files")
    b.add_argument("--hyp", required=True)
    b.add_argument("--ref", required=True)
    b.add_argument("--smooth", action="store_true")
    b.set_defaults(func=cmd_eval_bleu)

    c = sub.add_parser("eval-contrastive", help="contrastive accuracy by antecedent distance")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--items", required=True)
    c.add_argument("--report", required=True)
    c.set_defaults(func=cmd_eval_contrastive)

    i = sub.add_parser("inspect-attn", help="dump hierarchical attention of one token")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--doc", required=True)
    i.add_argument("--sentence", type=int, required=True)
    i.add_argument("--token", type=int, required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
