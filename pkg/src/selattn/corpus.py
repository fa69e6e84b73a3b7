"""Documents, vocabularies, parallel-corpus I/O and the synthetic context task."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
# written in place of an empty translation, which has no line of its own
EMPTY_SENTENCE = RESERVED[EOS]


class CorpusFormatError(ValueError):
    pass


class AlignmentError(CorpusFormatError):
    def __init__(self, doc_index: int, detail: str):
        super().__init__(f"document {doc_index}: {detail}")
        self.doc_index = doc_index


class Vocab:
    """Token <-> id bijection with fixed reserved ids 0..3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if not token or any(c.isspace() for c in token):
            raise ValueError(f"invalid token {token!r}")
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @property
    def user_tokens(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.user_tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line.strip() for line in lines if line.strip())

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]]) -> "Vocab":
        v = cls()
        for s in sentences:
            for t in s:
                v.add(t)
        return v


@dataclass
class DocumentPair:
    src: list[list[int]]
    tgt: list[list[int]]
    doc_id: str = ""

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise ValueError(f"document {self.doc_id!r}: {len(self.src)} source vs "
                             f"{len(self.tgt)} target sentences")
        if any(len(s) == 0 for s in self.src) or any(len(t) == 0 for t in self.tgt):
            raise ValueError(f"document {self.doc_id!r} contains an empty sentence")

    def __len__(self) -> int:
        return len(self.src)


# -- text format -----------------------------------------------------------
def read_documents(path) -> list[list[list[str]]]:
    """One sentence per line, documents separated by exactly one blank line."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    docs: list[list[list[str]]] = []
    cur: list[list[str]] = []
    prev_blank = False
    for lineno, line in enumerate(lines, 1):
        toks = line.split()
        if not toks:
            if prev_blank or not cur:
                raise CorpusFormatError(f"{path}:{lineno}: unexpected blank line")
            docs.append(cur)
            cur = []
            prev_blank = True
            continue
        prev_blank = False
        cur.append(toks)
    if cur:
        docs.append(cur)
    return docs


def write_documents(docs: Sequence[Sequence[Sequence[str]]], path) -> None:
    for i, doc in enumerate(docs):
        if any(len(s) == 0 for s in doc):
            raise CorpusFormatError(f"document {i}: an empty sentence would read as a "
                                    "document boundary")
    blocks = ["".join(" ".join(s) + "\n" for s in doc) for doc in docs]
    Path(path).write_text("\n".join(blocks), encoding="utf-8")


def load_parallel_documents(src_path, tgt_path, src_vocab: Vocab, tgt_vocab: Vocab
                            ) -> list[DocumentPair]:
    src_docs = read_documents(src_path)
    tgt_docs = read_documents(tgt_path)
    for i in range(max(len(src_docs), len(tgt_docs))):
        if i >= len(src_docs) or i >= len(tgt_docs):
            raise AlignmentError(i, "present on one side only")
        if len(src_docs[i]) != len(tgt_docs[i]):
            raise AlignmentError(i, f"{len(src_docs[i])} source vs {len(tgt_docs[i])} "
                                    "target sentences")
    return [DocumentPair([src_vocab.encode(s) for s in sd], [tgt_vocab.encode(t) for t in td],
                         doc_id=str(i))
            for i, (sd, td) in enumerate(zip(src_docs, tgt_docs))]


def write_parallel_documents(docs: Sequence[DocumentPair], src_path, tgt_path,
                             src_vocab: Vocab, tgt_vocab: Vocab) -> None:
    write_documents([[src_vocab.decode(s) for s in d.src] for d in docs], src_path)
    write_documents([[tgt_vocab.decode(t) for t in d.tgt] for d in docs], tgt_path)


def load_source_documents(path, src_vocab: Vocab) -> list[list[list[int]]]:
    return [[src_vocab.encode(s) for s in doc] for doc in read_documents(path)]


# -- synthetic disambiguation task ------------------------------------------
def default_distances(n_sentences: int) -> list[list[int]]:
    """Buckets 0, 1, 2, 3, 4 and >4; the last holds every distance 5..J-1."""
    buckets = [[d] for d in range(min(5, n_sentences))]
    if n_sentences > 5:
        buckets.append(list(range(5, n_sentences)))
    return buckets


@dataclass
class SyntheticInfo:
    """Where the marker and the ambiguous token sit in one document."""

    cls: int
    marker_sentence: int
    marker_position: int
    amb_sentence: int
    amb_position: int

    @property
    def distance(self) -> int:
        return self.amb_sentence - self.marker_sentence


@dataclass
class SyntheticCorpus:
    docs: list[DocumentPair]
    info: list[SyntheticInfo]
    src_vocab: Vocab
    tgt_vocab: Vocab
    n_classes: int

    def amb_target_ids(self) -> list[int]:
        return [self.tgt_vocab.id(f"A{c}") for c in range(1, self.n_classes + 1)]

    @property
    def amb_source_id(self) -> int:
        return self.src_vocab.id("AMB")


def synthetic_vocabs(vocab_size: int, n_classes: int) -> tuple[Vocab, Vocab]:
    src = Vocab([f"s{i}" for i in range(vocab_size)] + [f"M{c}" for c in range(1, n_classes + 1)]
                + ["AMB"])
    tgt = Vocab([f"t{i}" for i in range(vocab_size)] + [f"m{c}" for c in range(1, n_classes + 1)]
                + [f"A{c}" for c in range(1, n_classes + 1)])
    return src, tgt


def generate_synthetic_docs(seed: int, n_docs: int, n_sentences: int, sentence_len: int,
                            vocab_size: int = 50, n_classes: int = 4,
                            distances: Sequence[Sequence[int]] | Sequence[int] | None = None
                            ) -> SyntheticCorpus:
    """Documents where one ambiguous token's translation depends on a marker elsewhere.

    Ordinary token ``s_i`` always translates to ``t_i``, marker ``M_c`` to
    ``m_c``; the token ``AMB`` translates to ``A_c`` where ``c`` is the class of
    the document's single marker.  ``distances`` lists buckets (or plain
    values) sampled uniformly; a distance that does not fit the document is
    resampled.
    """
    if n_classes < 2:
        raise ValueError("need at least two ambiguity classes")
    if n_sentences < 2:
        raise ValueError("documents need at least two sentences")
    if sentence_len < 1 or (sentence_len < 2 and _allows_zero(distances, n_sentences)):
        raise ValueError("sentence too short for marker and ambiguous token")
    buckets = default_distances(n_sentences) if distances is None else \
        [list(b) if isinstance(b, (list, tuple)) else [int(b)] for b in distances]
    if not any(d < n_sentences for b in buckets for d in b):
        raise ValueError("no admissible distance for this document length")
    rng = np.random.default_rng(seed)
    src_vocab, tgt_vocab = synthetic_vocabs(vocab_size, n_classes)
    docs, info = [], []
    for n in range(n_docs):
        while True:
            bucket = buckets[rng.integers(len(buckets))]
            dist = int(bucket[rng.integers(len(bucket))])
            if 0 <= dist < n_sentences:
                break
        cls = int(rng.integers(1, n_classes + 1))
        m_sent = int(rng.integers(0, n_sentences - dist))
        a_sent = m_sent + dist
        m_pos = int(rng.integers(sentence_len))
        a_pos = int(rng.integers(sentence_len))
        while dist == 0 and a_pos == m_pos:
            a_pos = int(rng.integers(sentence_len))
        words = rng.integers(0, vocab_size, size=(n_sentences, sentence_len))
        src_doc, tgt_doc = [], []
        for j in range(n_sentences):
            s = [f"s{w}" for w in words[j]]
            t = [f"t{w}" for w in words[j]]
            if j == m_sent:
                s[m_pos], t[m_pos] = f"M{cls}", f"m{cls}"
            if j == a_sent:
                s[a_pos], t[a_pos] = "AMB", f"A{cls}"
            src_doc.append(src_vocab.encode(s))
            tgt_doc.append(tgt_vocab.encode(t))
        docs.append(DocumentPair(src_doc, tgt_doc, doc_id=f"syn{seed}-{n}"))
        info.append(SyntheticInfo(cls, m_sent, m_pos, a_sent, a_pos))
    return SyntheticCorpus(docs, info, src_vocab, tgt_vocab, n_classes)


def _allows_zero(distances, n_sentences) -> bool:
    if distances is None:
        return True
    return any(0 in (b if isinstance(b, (list, tuple)) else [b]) for b in distances)


@dataclass
class ContrastiveItem:
    doc: DocumentPair
    sentence: int
    position: int
    correct: list[int]
    foils: list[list[int]]
    distance: int
    meta: dict = field(default_factory=dict)


def generate_contrastive_set(corpus: SyntheticCorpus, indices: Sequence[int] | None = None
                             ) -> list[ContrastiveItem]:
    """One item per ambiguous token: the reference plus k-1 single-token foils."""
    amb = corpus.amb_target_ids()
    idx = range(len(corpus.docs)) if indices is None else indices
    items = []
    for i in idx:
        doc, inf = corpus.docs[i], corpus.info[i]
        correct = list(doc.tgt[inf.amb_sentence])
        gold = correct[inf.amb_position]
        foils = []
        for alt in amb:
            if alt != gold:
                f = list(correct)
                f[inf.amb_position] = alt
                foils.append(f)
        items.append(ContrastiveItem(doc, inf.amb_sentence, inf.amb_position, correct, foils,
                                     inf.distance, {"doc_index": i}))
    return items


def write_contrastive_items(items: Sequence[ContrastiveItem], directory, src_vocab: Vocab,
                            tgt_vocab: Vocab) -> None:
    """Directory layout: ``src.txt``/``tgt.txt`` documents plus ``items.txt`` key=value lines."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_parallel_documents([it.doc for it in items], d / "src.txt", d / "tgt.txt",
                             src_vocab, tgt_vocab)
    lines = []
    for n, it in enumerate(items):
        foils = "|".join(" ".join(tgt_vocab.decode(f)) for f in it.foils)
        lines.append(f"doc={n} sentence={it.sentence} position={it.position} "
                     f"distance={it.distance} foils={foils}\n")
    (d / "items.txt").write_text("".join(lines), encoding="utf-8")


def read_contrastive_items(directory, src_vocab: Vocab, tgt_vocab: Vocab) -> list[ContrastiveItem]:
    d = Path(directory)
    docs = load_parallel_documents(d / "src.txt", d / "tgt.txt", src_vocab, tgt_vocab)
    items = []
    for lineno, line in enumerate((d / "items.txt").read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        head, _, foil_text = line.partition(" foils=")
        kv = dict(part.split("=", 1) for part in head.split())
        try:
            doc = docs[int(kv["doc"])]
            j = int(kv["sentence"])
            items.append(ContrastiveItem(
                doc, j, int(kv["position"]), list(doc.tgt[j]),
                [tgt_vocab.encode(f.split()) for f in foil_text.split("|")],
                int(kv["distance"])))
        except (KeyError, ValueError, IndexError) as exc:
            raise CorpusFormatError(f"{d / 'items.txt'}:{lineno}: {exc}") from exc
    return items


def write_corpus_dir(directory, docs: Sequence[DocumentPair], src_vocab: Vocab,
                     tgt_vocab: Vocab) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_parallel_documents(docs, d / "src.txt", d / "tgt.txt", src_vocab, tgt_vocab)
    src_vocab.save(d / "vocab.src")
    tgt_vocab.save(d / "vocab.tgt")


def find_vocabs(directory) -> tuple[Vocab, Vocab]:
    d = Path(directory)
    for cand in (d, d.parent):
        if (cand / "vocab.src").exists() and (cand / "vocab.tgt").exists():
            return Vocab.load(cand / "vocab.src"), Vocab.load(cand / "vocab.tgt")
    raise FileNotFoundError(f"no vocab.src/vocab.tgt in {d} or its parent")


def load_corpus_dir(directory, src_vocab: Vocab | None = None, tgt_vocab: Vocab | None = None
                    ) -> tuple[list[DocumentPair], Vocab, Vocab]:
    d = Path(directory)
    if src_vocab is None or tgt_vocab is None:
        src_vocab, tgt_vocab = find_vocabs(d)
    docs = load_parallel_documents(d / "src.txt", d / "tgt.txt", src_vocab, tgt_vocab)
    return docs, src_vocab, tgt_vocab

