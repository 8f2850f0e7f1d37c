"""Tokenization, vocabulary, embedding loading, and padded batch assembly.

Datasets are UTF-8 TSV files of ``label<TAB>text`` lines. Batches carry the
vocabulary-encoded token matrix plus, aligned position by position, the
lexicon feature vector of each ORIGINAL surface token — so a word that maps
to UNK in the vocabulary still contributes its lexicon features. That
alignment is the channel the conditioned attention variants rely on.
"""

from __future__ import annotations

import hashlib
import string
from dataclasses import dataclass, field

import numpy as np

from .lexicons import LexiconFeatureTable

__all__ = [
    "Batch",
    "DatasetFormatError",
    "EmbeddingFormatError",
    "EmbeddingMatrix",
    "LabelMap",
    "Vocabulary",
    "load_embeddings",
    "make_batches",
    "read_dataset",
    "tokenize",
]

PAD_INDEX = 0
UNK_INDEX = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_PUNCT = frozenset(string.punctuation)


class DatasetFormatError(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    pass


def tokenize(text: str, lowercase: bool = True) -> list[str]:
    """Whitespace split with leading/trailing punctuation peeled off as tokens."""
    tokens = []
    for chunk in text.split():
        if lowercase:
            chunk = chunk.lower()
        lead = []
        while chunk and chunk[0] in _PUNCT:
            lead.append(chunk[0])
            chunk = chunk[1:]
        trail = []
        while chunk and chunk[-1] in _PUNCT:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        tokens.extend(lead)
        if chunk:
            tokens.append(chunk)
        tokens.extend(reversed(trail))
    return tokens


class Vocabulary:
    """Token/index bijection with reserved PAD=0 and UNK=1 rows."""

    def __init__(self, tokens):
        self.itos = [PAD_TOKEN, UNK_TOKEN] + list(tokens)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    @classmethod
    def build(cls, token_seqs, min_count: int = 1) -> "Vocabulary":
        """Collect tokens with corpus frequency >= min_count, first-seen order."""
        counts: dict[str, int] = {}
        order: list[str] = []
        for seq in token_seqs:
            for tok in seq:
                if tok not in counts:
                    order.append(tok)
                    counts[tok] = 0
                counts[tok] += 1
        return cls([t for t in order if counts[t] >= min_count
                    and t not in (PAD_TOKEN, UNK_TOKEN)])

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK_INDEX)

    def encode(self, tokens) -> np.ndarray:
        return np.array([self.index(t) for t in tokens], dtype=np.int64)

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.itos)

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        lines = text.splitlines()
        if lines[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise DatasetFormatError("vocabulary file must start with <pad>, <unk>")
        return cls(lines[2:])

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


class LabelMap:
    """Label string <-> class index, in first-seen order."""

    def __init__(self, names):
        self.names = list(names)
        self.index = {name: i for i, name in enumerate(self.names)}
        if len(self.index) != len(self.names):
            raise ValueError("duplicate label names")

    def __len__(self):
        return len(self.names)

    @classmethod
    def from_labels(cls, labels) -> "LabelMap":
        seen = dict.fromkeys(labels)
        return cls(seen.keys())


def read_dataset(path) -> list[tuple[str, str]]:
    """Read ``label<TAB>text`` lines into (text, label) pairs."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DatasetFormatError(f"{path}:{line_no}: expected label<TAB>text")
            label, text = line.split("\t", 1)
            examples.append((text, label))
    return examples


def write_dataset(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for text, label in examples:
            fh.write(f"{label}\t{text}\n")


@dataclass
class EmbeddingMatrix:
    """|V| x W float matrix plus the provenance of each row."""

    matrix: np.ndarray
    row_policy: list[str]  # pretrained | random | zero-for-PAD
    coverage: float = 0.0

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.row_policy):
            raise ValueError("one policy entry per row required")
        if np.any(self.matrix[PAD_INDEX] != 0.0):
            raise ValueError("PAD row must be all zeros")


def random_embeddings(vocab_size: int, dim: int, rng) -> EmbeddingMatrix:
    """Uniform [-0.05, 0.05] rows with a zero PAD row."""
    matrix = rng.uniform(-0.05, 0.05, (vocab_size, dim))
    matrix[PAD_INDEX] = 0.0
    policy = ["zero-for-PAD"] + ["random"] * (vocab_size - 1)
    return EmbeddingMatrix(matrix, policy)


def load_embeddings(path, vocab: Vocabulary, dim: int, rng) -> EmbeddingMatrix:
    """Load text-format word vectors for the vocabulary.

    Format: optional ``count dim`` header line, then ``word v1 ... v_dim``
    space-separated. In-vocabulary words get their file vector; everything
    else gets a uniform [-0.05, 0.05] row from ``rng``; PAD stays zero.
    ``coverage`` is the covered fraction of the non-reserved vocabulary.
    """
    emb = random_embeddings(len(vocab), dim, rng)
    found = set()
    with open(path, encoding="utf-8") as fh:
        first = True
        for line_no, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split(" ")
            if first:
                first = False
                if len(fields) == 2 and all(f.lstrip("+-").isdigit() for f in fields):
                    if int(fields[1]) != dim:
                        raise EmbeddingFormatError(
                            f"{path}:{line_no}: header dimension {fields[1]} != {dim}")
                    continue
            if len(fields) != 1 + dim:
                raise EmbeddingFormatError(
                    f"{path}:{line_no}: expected word + {dim} floats, "
                    f"got {len(fields)} fields")
            word = fields[0]
            idx = vocab.stoi.get(word)
            if idx is None or idx in (PAD_INDEX, UNK_INDEX):
                continue
            try:
                emb.matrix[idx] = [float(v) for v in fields[1:]]
            except ValueError:
                raise EmbeddingFormatError(
                    f"{path}:{line_no}: non-numeric value") from None
            emb.row_policy[idx] = "pretrained"
            found.add(idx)
    non_reserved = len(vocab) - 2
    emb.coverage = len(found) / non_reserved if non_reserved else 0.0
    return emb


@dataclass
class Batch:
    """Padded token matrix with aligned lexicon features and labels.

    ``tokens[b, t] == PAD`` and ``lex_feats[b, t]`` is all-zero for every
    ``t >= lengths[b]``; ``raw_tokens[b]`` keeps the surface forms
    (length ``lengths[b]``) for reporting and lexicon-alignment checks.
    """

    tokens: np.ndarray      # int64 (B, T)
    lengths: np.ndarray     # int64 (B,)
    lex_feats: np.ndarray   # float64 (B, T, total_dims)
    labels: np.ndarray      # int64 (B,)
    raw_tokens: list = field(default_factory=list)

    def __post_init__(self):
        B, T = self.tokens.shape
        if self.lengths.shape != (B,) or self.labels.shape != (B,):
            raise ValueError("batch field shapes disagree")
        if self.lex_feats.shape[:2] != (B, T):
            raise ValueError("lex_feats must align with tokens")
        if np.any(self.lengths < 1) or np.any(self.lengths > T):
            raise ValueError("lengths must lie in [1, T]")

    def __len__(self):
        return self.tokens.shape[0]

    def pad_mask(self) -> np.ndarray:
        """True at valid positions, derived from lengths."""
        return np.arange(self.tokens.shape[1])[None, :] < self.lengths[:, None]


def make_batches(dataset, vocab: Vocabulary, table: LexiconFeatureTable,
                 batch_size: int, seed: int, *, lowercase: bool = True,
                 shuffle: bool = True) -> list[Batch]:
    """Tokenize, shuffle (seeded), and pack (text, label_index) pairs.

    Padding is per batch: T is the longest sequence in that batch. Lexicon
    features come from the surface token, before any UNK mapping. The final
    partial batch is kept. An example with no tokens is rejected by its
    dataset index.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    tokenized = []
    for i, (text, label) in enumerate(dataset):
        toks = tokenize(text, lowercase=lowercase)
        if not toks:
            raise DatasetFormatError(f"example {i}: no tokens after tokenization")
        tokenized.append((toks, int(label)))
    order = np.arange(len(tokenized))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(tokenized))
    batches = []
    for start in range(0, len(tokenized), batch_size):
        chunk = [tokenized[i] for i in order[start:start + batch_size]]
        B = len(chunk)
        T = max(len(toks) for toks, _ in chunk)
        tokens = np.full((B, T), PAD_INDEX, dtype=np.int64)
        lex = np.zeros((B, T, table.total_dims))
        lengths = np.empty(B, dtype=np.int64)
        labels = np.empty(B, dtype=np.int64)
        raw = []
        for b, (toks, label) in enumerate(chunk):
            tokens[b, :len(toks)] = vocab.encode(toks)
            for t, tok in enumerate(toks):
                lex[b, t] = table.lookup(tok)
            lengths[b] = len(toks)
            labels[b] = label
            raw.append(toks)
        batches.append(Batch(tokens, lengths, lex, labels, raw))
    return batches
