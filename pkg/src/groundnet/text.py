"""Tokenization, vocabulary, phrase padding, and embedding tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError
from .rng import SplitMix64
from .tensor import Tensor, gather_rows

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
RESERVED = (PAD, START, END, UNK)


@dataclass
class Vocabulary:
    """Dense 0-based token index; the four reserved tokens always occupy 0..3."""

    token_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for i, tok in enumerate(RESERVED):
            if self.token_to_id.get(tok) != i:
                raise ContractError(f"reserved token {tok!r} must map to {i}")

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.token_to_id[UNK])

    def tokens(self) -> list[str]:
        """Tokens in index order."""
        inv = {i: t for t, i in self.token_to_id.items()}
        return [inv[i] for i in range(len(inv))]


@dataclass
class TokenizedPhrase:
    """Fixed-length id sequence; positions >= true_length are all <pad>."""

    token_ids: np.ndarray          # (t_max,) int64
    true_length: int               # includes start/end, excludes pads

    def __post_init__(self):
        if self.true_length < 2:
            raise ContractError("true_length < 2: start/end sentinels missing")


@dataclass
class EmbeddingTable:
    """|V| x D_w row-per-token matrix; trainable unless loaded from file."""

    matrix: np.ndarray
    trainable: bool
    random_rows: list[int] = field(default_factory=list)   # rows not copied from a file


def build_vocab(corpus: list[str], min_count: int = 1) -> Vocabulary:
    """Index tokens with frequency >= min_count (freq desc, then lexicographic)."""
    if not corpus:
        raise ContractError("build_vocab: empty corpus")
    counts: dict[str, int] = {}
    for phrase in corpus:
        for tok in phrase.lower().split():
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted((tok for tok, c in counts.items() if c >= min_count),
                  key=lambda tok: (-counts[tok], tok))
    mapping = {tok: i for i, tok in enumerate(RESERVED)}
    for tok in kept:
        if tok not in mapping:
            mapping[tok] = len(mapping)
    return Vocabulary(mapping)


def tokenize(phrase: str, vocab: Vocabulary, t_max: int) -> TokenizedPhrase:
    """Lowercase whitespace split, truncate to t_max-2 words, wrap and pad."""
    if t_max < 3:
        raise ContractError(f"t_max {t_max} < 3")
    words = phrase.lower().split()[: t_max - 2]
    ids = [vocab.id_of(START)] + [vocab.id_of(w) for w in words] + [vocab.id_of(END)]
    true_length = len(ids)
    ids.extend([vocab.id_of(PAD)] * (t_max - true_length))
    return TokenizedPhrase(np.array(ids, dtype=np.int64), true_length)


def detokenize(tokens: TokenizedPhrase, vocab: Vocabulary) -> str:
    """Words between the sentinels, joined by spaces."""
    inv = vocab.tokens()
    return " ".join(inv[i] for i in tokens.token_ids[1:tokens.true_length - 1])


def load_embeddings(path: str, vocab: Vocabulary, d_w: int, seed: int = 0) -> EmbeddingTable:
    """Read a plain-text table: one line per token, token then D_w reals.

    Rows for tokens found in the file are copied bit-exact; missing tokens
    and the reserved tokens are drawn from N(0, 0.01). Loaded tables are
    non-trainable.
    """
    file_rows: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != d_w + 1:
                raise ParseError(f"{path}:{lineno}: expected token + {d_w} values, "
                                 f"got {len(parts)} fields")
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: non-numeric value ({e})") from None
            file_rows[parts[0]] = vec
    return _assemble_table(vocab, d_w, file_rows, trainable=False, seed=seed)


def random_embeddings(vocab: Vocabulary, d_w: int, seed: int = 0) -> EmbeddingTable:
    """Fully random N(0, 0.01) table, trainable (learned-embedding variant)."""
    return _assemble_table(vocab, d_w, {}, trainable=True, seed=seed)


def _assemble_table(vocab: Vocabulary, d_w: int, file_rows: dict[str, np.ndarray],
                    trainable: bool, seed: int) -> EmbeddingTable:
    rng = SplitMix64(seed)
    matrix = np.zeros((len(vocab), d_w), dtype=np.float64)
    random_rows = []
    for idx, tok in enumerate(vocab.tokens()):
        if tok not in RESERVED and tok in file_rows:
            matrix[idx] = file_rows[tok]
        else:
            matrix[idx] = rng.normal(d_w, sigma=0.01)
            random_rows.append(idx)
    return EmbeddingTable(matrix, trainable=trainable, random_rows=random_rows)


def embed(tokens: TokenizedPhrase, table: Tensor) -> Tensor:
    """Look up token rows: (t_max, D_w); differentiable when the table is."""
    if int(tokens.token_ids.max()) >= table.shape[0]:
        raise ContractError("token id out of range for embedding table")
    return gather_rows(table, tokens.token_ids)
