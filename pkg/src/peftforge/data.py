"""Tokenization, corpora, classification tasks, and synthetic generators.

The synthetic data mirrors a two-stage regime at desk scale: a general
corpus and a domain corpus drawn from order-1 Markov chains over a shared
word inventory (the domain chain routes a large share of its mass through
domain-exclusive words), plus five classification tasks whose labels are
deterministic functions of planted marker words, so every label can be
recomputed from the text alone.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import make_rng

PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")


class DataFormatError(ValueError):
    """Raised for malformed corpus/dataset files or label/task mismatches."""


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    """Shape of one classification task."""

    name: str
    kind: str  # binary | multiclass | multilabel
    n_classes: int

    def __post_init__(self):
        if self.kind not in ("binary", "multiclass", "multilabel"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "binary" and self.n_classes != 2:
            raise ValueError("binary tasks have exactly 2 classes")
        if self.n_classes < 2 and self.kind != "multilabel":
            raise ValueError("need at least 2 classes")

    @property
    def n_outputs(self) -> int:
        """Classifier head width: 1 sigmoid logit for binary, k otherwise."""
        return 1 if self.kind == "binary" else self.n_classes


#: The five task shapes, desk scale: two binary, one 4-class, two large multilabel.
TASKS: dict[str, TaskSpec] = {
    "pmv": TaskSpec("pmv", "binary", 2),
    "mor": TaskSpec("mor", "binary", 2),
    "los": TaskSpec("los", "multiclass", 4),
    "diag": TaskSpec("diag", "multilabel", 50),
    "proc": TaskSpec("proc", "multilabel", 30),
}

TASK_NAMES = tuple(TASKS)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class Vocab:
    """Whitespace-token vocabulary with fixed reserved ids 0..3."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            tokens = list(RESERVED_TOKENS) + list(tokens)
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


def build_vocab(docs: Iterable[str], max_size: int) -> Vocab:
    """Frequency-ranked vocabulary, ties broken lexicographically.

    ``max_size`` includes the four reserved ids.
    """
    counts: Counter[str] = Counter()
    for doc in docs:
        counts.update(doc.split())
    if not counts:
        raise DataFormatError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [w for w, _ in ranked[: max(0, max_size - len(RESERVED_TOKENS))]]
    return Vocab(list(RESERVED_TOKENS) + kept)


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------


def _split_of(seed: int, i: int, text: str, test_frac: float) -> str:
    h = hashlib.blake2b(f"{seed}:{i}:{text}".encode(), digest_size=8).digest()
    return "test" if int.from_bytes(h, "little") % 10_000 < test_frac * 10_000 else "train"


@dataclass
class Corpus:
    """Tokenized documents with a deterministic train/test split."""

    documents: list[list[int]]
    split: list[str]
    texts: list[str] = field(default_factory=list)
    vocab: Vocab | None = None

    @classmethod
    def from_texts(cls, texts: list[str], vocab: Vocab, seed: int = 0, test_frac: float = 0.2) -> "Corpus":
        docs = [vocab.encode(t) for t in texts]
        split = [_split_of(seed, i, t, test_frac) for i, t in enumerate(texts)]
        return cls(documents=docs, split=split, texts=list(texts), vocab=vocab)

    def docs_for(self, which: str) -> list[list[int]]:
        return [d for d, s in zip(self.documents, self.split) if s == which]

    def __len__(self) -> int:
        return len(self.documents)


# ---------------------------------------------------------------------------
# Synthetic word inventory and Markov chains
# ---------------------------------------------------------------------------

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t",
           "v", "z", "br", "dr", "gr", "kr", "pl", "st", "tr", "sk")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "or")
_CODAS = ("", "n", "r", "s", "t", "x", "l", "m")

_N_WORDS = 508          # + 4 reserved ids = a 512-entry vocabulary
_N_EXCLUSIVE = 128      # words that never occur in the general corpus


def _word_inventory() -> list[str]:
    # Dedupe: different syllable splits can spell the same word ("t+or" vs "t+o+r").
    words: list[str] = []
    seen: set[str] = set()
    for o in _ONSETS:
        for v in _VOWELS:
            for c in _CODAS:
                w = o + v + c
                if w not in seen:
                    seen.add(w)
                    words.append(w)
    return words[:_N_WORDS]


_WORDS = _word_inventory()
_GENERAL_WORDS = _WORDS[: _N_WORDS - _N_EXCLUSIVE]
_EXCLUSIVE_WORDS = _WORDS[_N_WORDS - _N_EXCLUSIVE:]


def domain_exclusive_words() -> frozenset[str]:
    """Words reserved for the domain corpus; never sampled in the general one."""
    return frozenset(_EXCLUSIVE_WORDS)


def task_motifs() -> dict[str, list[str]]:
    """Marker words that determine labels, carved out of the domain-exclusive set."""
    m = list(_EXCLUSIVE_WORDS)
    return {
        "pmv": m[0:1],
        "mor": m[1:2],
        "los": m[2:6],
        "diag": m[6:56],
        "proc": m[56:86],
    }


_ALL_MOTIFS = frozenset(w for ws in task_motifs().values() for w in ws)


class _MarkovChain:
    """Order-1 chain with a small successor set per word (peaked, learnable)."""

    def __init__(self, rng: np.random.Generator, words: list[str],
                 succ_pool: list[str], probs: list[float],
                 pool_split: tuple[list[str], list[float]] | None = None):
        self.words = words
        self.table: dict[str, tuple[list[str], np.ndarray]] = {}
        p = np.asarray(probs)
        p = p / p.sum()
        for w in words:
            if pool_split is None:
                succ = list(rng.choice(succ_pool, size=len(p), replace=False))
            else:
                # Fixed count from each sub-pool so the mass split is exact.
                pools, counts = pool_split
                succ = []
                for pool, cnt in zip(pools, counts):
                    succ.extend(rng.choice(pool, size=cnt, replace=False))
            self.table[w] = (succ, p)

    def sample_doc(self, rng: np.random.Generator, start: str, length: int) -> str:
        out = [start]
        cur = start
        for _ in range(length - 1):
            succ, p = self.table[cur]
            cur = succ[rng.choice(len(succ), p=p)]
            out.append(cur)
        return " ".join(out)


def _general_chain(rng: np.random.Generator) -> _MarkovChain:
    return _MarkovChain(rng, _GENERAL_WORDS, _GENERAL_WORDS,
                        probs=[0.25, 0.20, 0.15, 0.12, 0.10, 0.08, 0.06, 0.04])


def _domain_chain(rng: np.random.Generator) -> _MarkovChain:
    # Two exclusive + two shared successors: 0.30 + 0.15 = 0.45 of each
    # step's mass flows through domain-exclusive words.
    return _MarkovChain(
        rng, _WORDS, _WORDS,
        probs=[0.30, 0.15, 0.35, 0.20],
        pool_split=([_EXCLUSIVE_WORDS, _GENERAL_WORDS], [2, 2]),
    )


def gen_domain_corpora(seed: int, general_docs: int = 300, domain_docs: int = 300) -> tuple[Corpus, Corpus]:
    """Seeded general and domain corpora over a shared vocabulary.

    The domain chain routes ~45% of its transition mass through words the
    general chain never emits, and its bigram statistics over shared words
    differ, so a model trained only on the general corpus is measurably
    worse on the domain one.
    """
    if general_docs < 100 or domain_docs < 100:
        raise ValueError("corpora need at least 100 documents each")
    rng = make_rng(seed)
    gchain = _general_chain(rng)
    dchain = _domain_chain(rng)

    gtexts = []
    for _ in range(general_docs):
        start = _GENERAL_WORDS[rng.choice(len(_GENERAL_WORDS))]
        gtexts.append(gchain.sample_doc(rng, start, int(rng.integers(30, 90))))
    dtexts = []
    for _ in range(domain_docs):
        pool = _EXCLUSIVE_WORDS if rng.random() < 0.45 else _GENERAL_WORDS
        start = pool[rng.choice(len(pool))]
        dtexts.append(dchain.sample_doc(rng, start, int(rng.integers(30, 90))))

    vocab = build_vocab(gtexts + dtexts, max_size=512)
    return (
        Corpus.from_texts(gtexts, vocab, seed=seed, test_frac=0.2),
        Corpus.from_texts(dtexts, vocab, seed=seed + 1, test_frac=0.2),
    )


# ---------------------------------------------------------------------------
# Classification datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Example:
    text: str
    label: int | tuple[int, ...]  # int for binary/multiclass, active indices for multilabel


@dataclass
class Dataset:
    task: TaskSpec
    splits: dict[str, list[Example]]

    def __getitem__(self, which: str) -> list[Example]:
        return self.splits[which]


SPLIT_NAMES = ("train", "valid", "test")
_SPLIT_FRACS = (0.7, 0.1, 0.2)

_POSITIVE_RATE = {"pmv": 0.3, "mor": 0.5}
_MULTILABEL_RATE = {"diag": 0.12, "proc": 0.15}
_EXAMPLE_LEN = (26, 40)


def _background_chain(rng: np.random.Generator) -> _MarkovChain:
    # Domain-flavored background that can never emit a motif word, so the
    # rule checker sees exactly the planted markers.
    free_exclusive = [w for w in _EXCLUSIVE_WORDS if w not in _ALL_MOTIFS]
    pool_all = _GENERAL_WORDS + free_exclusive
    return _MarkovChain(
        rng, pool_all, pool_all,
        probs=[0.30, 0.15, 0.35, 0.20],
        pool_split=([free_exclusive, _GENERAL_WORDS], [2, 2]),
    )


def _plant(words: list[str], motif_words: list[str], rng: np.random.Generator) -> list[str]:
    if not motif_words:
        return words
    pos = rng.choice(len(words), size=len(motif_words), replace=False)
    out = list(words)
    for p, m in zip(pos, motif_words):
        out[p] = m
    return out


def _gen_task_examples(task: TaskSpec, n: int, chain: _MarkovChain,
                       rng: np.random.Generator) -> list[Example]:
    motifs = task_motifs()[task.name]
    examples = []
    starts = chain.words
    for _ in range(n):
        length = int(rng.integers(*_EXAMPLE_LEN))
        start = starts[rng.choice(len(starts))]
        words = chain.sample_doc(rng, start, length).split()
        if task.kind == "binary":
            y = int(rng.random() < _POSITIVE_RATE[task.name])
            planted = _plant(words, motifs * 2 if y else [], rng)
            examples.append(Example(" ".join(planted), y))
        elif task.kind == "multiclass":
            y = int(rng.choice(task.n_classes))
            planted = _plant(words, [motifs[y], motifs[y]], rng)
            examples.append(Example(" ".join(planted), y))
        else:
            rate = _MULTILABEL_RATE[task.name]
            active = tuple(int(c) for c in np.nonzero(rng.random(task.n_classes) < rate)[0])
            planted = _plant(words, [motifs[c] for c in active], rng)
            examples.append(Example(" ".join(planted), active))
    return examples


def gen_classification_datasets(seed: int, scale: float = 1.0) -> dict[str, Dataset]:
    """Five seeded datasets whose labels are planted-motif functions of the text.

    ``scale`` multiplies the per-task example count (500 at scale 1); it must
    keep every split at >= 50 examples.
    """
    n = int(round(500 * scale))
    if int(n * _SPLIT_FRACS[1]) < 50:
        raise ValueError(f"scale {scale} yields fewer than 50 examples in the smallest split")
    rng = make_rng(seed)
    chain = _background_chain(rng)
    datasets = {}
    for name, task in TASKS.items():
        examples = _gen_task_examples(task, n, chain, rng)
        order = rng.permutation(n)
        shuffled = [examples[i] for i in order]
        n_train = int(n * _SPLIT_FRACS[0])
        n_valid = int(n * _SPLIT_FRACS[1])
        datasets[name] = Dataset(task, {
            "train": shuffled[:n_train],
            "valid": shuffled[n_train:n_train + n_valid],
            "test": shuffled[n_train + n_valid:],
        })
    return datasets


def expected_label(task: TaskSpec, text: str) -> int | tuple[int, ...]:
    """Recompute an example's label from its text via the motif rule.

    Independent of the generator's sampling: it only inspects which marker
    words occur.
    """
    present = set(text.split())
    motifs = task_motifs()[task.name]
    if task.kind == "binary":
        return int(motifs[0] in present)
    if task.kind == "multiclass":
        hits = [c for c, m in enumerate(motifs) if m in present]
        if len(hits) != 1:
            raise ValueError(f"expected exactly one class marker, found {len(hits)}")
        return hits[0]
    return tuple(c for c, m in enumerate(motifs) if m in present)


# ---------------------------------------------------------------------------
# File formats: corpus = one document per line; dataset = JSON lines
# ---------------------------------------------------------------------------


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text("\n".join(corpus.texts) + "\n", encoding="utf-8")


def load_corpus(path: str | Path, vocab: Vocab | None = None, seed: int = 0,
                test_frac: float = 0.2, max_vocab: int = 512) -> Corpus:
    """Read a newline-delimited UTF-8 corpus.

    Builds a fresh vocabulary from the file unless one is supplied (reuse
    the base model's vocabulary when continuing from a checkpoint).
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"corpus file not found: {path}")
    texts = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not texts:
        raise DataFormatError(f"corpus file is empty: {path}")
    if vocab is None:
        vocab = build_vocab(texts, max_vocab)
    return Corpus.from_texts(texts, vocab, seed=seed, test_frac=test_frac)


def dataset_path(directory: str | Path, task_name: str, split: str) -> Path:
    return Path(directory) / f"{task_name}.{split}.jsonl"


def write_dataset(ds: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, examples in ds.splits.items():
        with open(dataset_path(directory, ds.task.name, split), "w", encoding="utf-8") as f:
            for ex in examples:
                if ds.task.kind == "multilabel":
                    rec = {"text": ex.text, "labels": list(ex.label)}
                else:
                    rec = {"text": ex.text, "label": int(ex.label)}
                f.write(json.dumps(rec) + "\n")


def _parse_example(line: str, lineno: int, path: Path, task: TaskSpec) -> Example:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
    if not isinstance(rec, dict) or "text" not in rec:
        raise DataFormatError(f"{path}:{lineno}: expected an object with a 'text' field")
    if task.kind == "multilabel":
        labels = rec.get("labels")
        if not isinstance(labels, list) or any(not isinstance(c, int) for c in labels):
            raise DataFormatError(f"{path}:{lineno}: multilabel examples need a 'labels' int list")
        if any(c < 0 or c >= task.n_classes for c in labels):
            raise DataFormatError(f"{path}:{lineno}: label index out of range for k={task.n_classes}")
        return Example(rec["text"], tuple(sorted(set(labels))))
    label = rec.get("label")
    if not isinstance(label, int):
        raise DataFormatError(f"{path}:{lineno}: expected an integer 'label'")
    if label < 0 or label >= task.n_classes:
        raise DataFormatError(f"{path}:{lineno}: label {label} out of range for {task.n_classes} classes")
    return Example(rec["text"], label)


def load_split(path: str | Path, task: TaskSpec) -> list[Example]:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"dataset file not found: {path}")
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if line.strip():
                examples.append(_parse_example(line, lineno, path, task))
    if not examples:
        raise DataFormatError(f"dataset file is empty: {path}")
    return examples


def load_dataset(directory: str | Path, task: TaskSpec) -> Dataset:
    """Load the three split files ``<task>.<split>.jsonl`` from a directory."""
    return Dataset(task, {s: load_split(dataset_path(directory, task.name, s), task) for s in SPLIT_NAMES})


def encode_example(vocab: Vocab, text: str) -> list[int]:
    """Token ids for one document: BOS + content + EOS."""
    return [BOS_ID] + vocab.encode(text) + [EOS_ID]
