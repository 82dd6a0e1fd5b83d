"""Sparsemax and row-sparse translation-probability matrices.

A translation matrix holds, for each foreign token, a sparse probability
distribution over source-language tokens. Rows come either from sparsemax
of dot products between aligned embedding spaces, from word-alignment
probabilities, or from a ground-truth dictionary. Special tokens never get
a row; they are handled separately at initialization time.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import NUM_SPECIALS, BpeCodes, UnigramTable, Vocabulary, apply_bpe
from .embeddings import EmbeddingMatrix

UNIGRAM_FLOOR = 1e-9


def sparsemax(z: np.ndarray) -> np.ndarray:
    """Euclidean projection of z onto the probability simplex (row-wise for 2-D).

    Sort-and-threshold: with z sorted descending, the support size is the
    largest k such that 1 + k*z_(k) > sum_{j<=k} z_(j); the threshold is
    tau = (sum_{j<=k} z_(j) - 1) / k and the output is max(z - tau, 0).
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("sparsemax requires finite input")
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    n = z.shape[1]
    u = -np.sort(-z, axis=1)
    cssv = np.cumsum(u, axis=1) - 1.0
    ks = np.arange(1, n + 1, dtype=np.float64)
    support = u * ks > cssv
    k = np.count_nonzero(support, axis=1)
    tau = cssv[np.arange(z.shape[0]), k - 1] / k
    out = np.maximum(z - tau[:, None], 0.0)
    return out[0] if squeeze else out


@dataclass
class TranslationMatrix:
    """Row-sparse stochastic matrix: row i lists (source index, weight)."""

    rows: list[list[tuple[int, float]]]

    def __post_init__(self) -> None:
        for i, row in enumerate(self.rows):
            if not row:
                continue
            idx = [j for j, _ in row]
            if any(a >= b for a, b in zip(idx, idx[1:])):
                raise ValueError(f"row {i}: source indices must be strictly increasing")
            total = math.fsum(w for _, w in row)
            if abs(total - 1.0) > 1e-6:
                raise ValueError(f"row {i}: weights sum to {total}, expected 1")
            if any(w <= 0 for _, w in row):
                raise ValueError(f"row {i}: weights must be positive")

    @property
    def coverage(self) -> list[bool]:
        return [bool(row) for row in self.rows]

    def __len__(self) -> int:
        return len(self.rows)


def _sparse_row(indices: np.ndarray, weights: np.ndarray) -> list[tuple[int, float]]:
    order = np.argsort(indices)
    return [(int(indices[k]), float(weights[k])) for k in order]


def translation_matrix_from_vectors(
    tgt_aligned: EmbeddingMatrix,
    src: EmbeddingMatrix,
    mode: str = "sparsemax",
    chunk: int = 512,
) -> TranslationMatrix:
    """Row i = sparsemax(tgt[i] . src') over non-special source tokens.

    Dot products accumulate in 64-bit. Target rows that are special tokens or
    exactly zero vectors (no upstream support) stay uncovered. `mode` may be
    "softmax" for the dense ablation variant.
    """
    if tgt_aligned.dim != src.dim:
        raise ValueError(f"dimension mismatch: {tgt_aligned.dim} vs {src.dim}")
    if mode not in ("sparsemax", "softmax"):
        raise ValueError(f"unknown mode: {mode!r}")
    src_data = src.data[NUM_SPECIALS:].astype(np.float64)
    n_tgt = len(tgt_aligned.vocab)
    rows: list[list[tuple[int, float]]] = [[] for _ in range(n_tgt)]
    for start in range(NUM_SPECIALS, n_tgt, chunk):
        stop = min(start + chunk, n_tgt)
        block = tgt_aligned.data[start:stop].astype(np.float64)
        nonzero = np.any(block != 0.0, axis=1)
        scores = block @ src_data.T
        if mode == "sparsemax":
            probs = sparsemax(scores)
        else:
            shifted = scores - scores.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            probs = e / e.sum(axis=1, keepdims=True)
        for r in range(stop - start):
            if not nonzero[r]:
                continue
            nz = np.nonzero(probs[r])[0]
            rows[start + r] = [(int(j) + NUM_SPECIALS, float(probs[r, j])) for j in nz]
    return TranslationMatrix(rows)


def dictionary_translation_matrix(
    pairs: list[tuple[int, int]], tgt_vocab: Vocabulary, src_vocab: Vocabulary
) -> TranslationMatrix:
    """One-hot rows from (tgt index, src index) ground-truth pairs."""
    rows: list[list[tuple[int, float]]] = [[] for _ in range(len(tgt_vocab))]
    for i, j in pairs:
        if not (NUM_SPECIALS <= i < len(tgt_vocab)):
            raise ValueError(f"target index {i} out of range")
        if not (NUM_SPECIALS <= j < len(src_vocab)):
            raise ValueError(f"source index {j} out of range")
        rows[i] = [(j, 1.0)]
    return TranslationMatrix(rows)


@dataclass
class SubwordVectorTable:
    """Subword vectors aggregated from word vectors, with contributor counts."""

    emb: EmbeddingMatrix
    support: np.ndarray  # per-subword number of contributing words

    def __post_init__(self) -> None:
        self.support = np.asarray(self.support, dtype=np.int64)
        if self.support.shape[0] != len(self.emb.vocab):
            raise ValueError("support length must match the subword vocabulary")


def subword_vectors(
    word_emb: EmbeddingMatrix,
    unigrams: UnigramTable,
    subword_vocab: Vocabulary,
    codes: BpeCodes,
) -> SubwordVectorTable:
    """Each subword vector is the unigram-weighted average of its words' vectors.

    A word contributes to every distinct subword in its BPE segmentation,
    weighted by its unigram probability (floored at 1e-9 for words missing
    from the table). Subwords with no contributing word keep a zero vector
    and support 0, to be replaced by the Gaussian fallback downstream.
    """
    d = word_emb.dim
    acc = np.zeros((len(subword_vocab), d), dtype=np.float64)
    norm = np.zeros(len(subword_vocab), dtype=np.float64)
    support = np.zeros(len(subword_vocab), dtype=np.int64)
    for i in range(NUM_SPECIALS, len(word_emb.vocab)):
        word = word_emb.vocab.tokens[i]
        weight = max(unigrams.get(word), UNIGRAM_FLOOR)
        pieces = set(apply_bpe(word, codes))
        for piece in pieces:
            j = subword_vocab.index.get(piece)
            if j is None or j < NUM_SPECIALS:
                continue
            acc[j] += weight * word_emb.data[i].astype(np.float64)
            norm[j] += weight
            support[j] += 1
    covered = support > 0
    acc[covered] /= norm[covered, None]
    emb = EmbeddingMatrix(subword_vocab, acc.astype(np.float32))
    return SubwordVectorTable(emb=emb, support=support)


@dataclass
class EntropyReport:
    """Sparsity diagnostics for a translation matrix."""

    n_rows: int
    n_covered: int
    mean_nonzeros: float
    median_nonzeros: float
    mean_entropy: float
    max_entropy: float
    histogram: dict[int, int] = field(default_factory=dict)


def row_entropy_report(tm: TranslationMatrix) -> EntropyReport:
    """Per-row nonzero counts and entropies, aggregated over covered rows."""
    counts = []
    entropies = []
    for row in tm.rows:
        if not row:
            continue
        counts.append(len(row))
        entropies.append(-math.fsum(w * math.log(w) for _, w in row if w > 0))
    if not counts:
        return EntropyReport(len(tm.rows), 0, 0.0, 0.0, 0.0, 0.0, {})
    return EntropyReport(
        n_rows=len(tm.rows),
        n_covered=len(counts),
        mean_nonzeros=float(np.mean(counts)),
        median_nonzeros=float(np.median(counts)),
        mean_entropy=float(np.mean(entropies)),
        max_entropy=float(np.max(entropies)),
        histogram=dict(sorted(Counter(counts).items())),
    )


def write_translation_matrix(
    tm: TranslationMatrix,
    tgt_vocab: Vocabulary,
    src_vocab: Vocabulary,
    path: str | Path,
) -> None:
    """Text format: 'tgt_token src1:w1 src2:w2 ...'; bare token if uncovered."""
    if len(tm.rows) != len(tgt_vocab):
        raise ValueError("translation matrix size does not match target vocabulary")
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in enumerate(tm.rows):
            entries = " ".join(f"{src_vocab.tokens[j]}:{w:.9g}" for j, w in row)
            fh.write(tgt_vocab.tokens[i] + (" " + entries if entries else "") + "\n")


def read_translation_matrix(
    path: str | Path, tgt_vocab: Vocabulary, src_vocab: Vocabulary
) -> TranslationMatrix:
    rows: list[list[tuple[int, float]]] = [[] for _ in range(len(tgt_vocab))]
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            token = parts[0]
            i = tgt_vocab.index.get(token)
            if i is None:
                raise ValueError(f"{path}: line {n}: unknown target token {token!r}")
            entries = []
            for part in parts[1:]:
                src_token, _, weight = part.rpartition(":")
                j = src_vocab.index.get(src_token)
                if j is None:
                    raise ValueError(
                        f"{path}: line {n}: unknown source token {src_token!r}"
                    )
                entries.append((j, float(weight)))
            entries.sort()
            rows[i] = entries
    return TranslationMatrix(rows)
