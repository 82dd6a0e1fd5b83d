"""Foreign embedding construction from a translation matrix and source table.

Covered tokens get the convex combination of source vectors given by their
translation-matrix row; uncovered tokens are drawn i.i.d. from N(0, 1/d^2)
(variance 1/d^2, i.e. sigma = 1/d). Special tokens copy the source model's
special rows. Randomness uses one counter-based stream per row, derived
from (seed, row index), so results are identical serial or parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import NUM_SPECIALS, Vocabulary
from .embeddings import EmbeddingMatrix
from .translation import TranslationMatrix


@dataclass
class InitReport:
    """Coverage accounting for one initialization (specials excluded)."""

    covered: int
    fallback: int

    @property
    def coverage_ratio(self) -> float:
        total = self.covered + self.fallback
        return self.covered / total if total else 0.0

    def summary(self) -> str:
        return (
            f"initialized {self.covered} tokens from translations, "
            f"{self.fallback} from the Gaussian fallback "
            f"(coverage {self.coverage_ratio:.1%})"
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "covered": self.covered,
                "fallback": self.fallback,
                "coverage_ratio": self.coverage_ratio,
            }
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def _row_rng(seed: int, row: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, row)))


def _gaussian_row(seed: int, row: int, d: int) -> np.ndarray:
    return _row_rng(seed, row).normal(0.0, 1.0 / d, size=d).astype(np.float32)


def init_foreign_embeddings(
    tm: TranslationMatrix,
    src_emb: EmbeddingMatrix,
    tgt_vocab: Vocabulary,
    seed: int,
) -> tuple[EmbeddingMatrix, InitReport]:
    """Build the foreign embedding table row by row.

    Covered row i becomes sum_j alpha_ij * src[j]; a one-hot row reproduces
    the source vector bit-exactly. Uncovered rows fall back to N(0, 1/d^2).
    """
    if len(tm.rows) != len(tgt_vocab):
        raise ValueError(
            f"translation matrix has {len(tm.rows)} rows for a vocabulary "
            f"of {len(tgt_vocab)} tokens"
        )
    d = src_emb.dim
    out = np.zeros((len(tgt_vocab), d), dtype=np.float32)
    out[:NUM_SPECIALS] = src_emb.data[:NUM_SPECIALS]
    covered = fallback = 0
    for i in range(NUM_SPECIALS, len(tgt_vocab)):
        row = tm.rows[i]
        if row:
            if row[-1][0] >= len(src_emb.vocab):
                raise ValueError(
                    f"row {i} references source index {row[-1][0]} beyond "
                    f"the source vocabulary"
                )
            acc = np.zeros(d, dtype=np.float64)
            for j, w in row:
                acc += w * src_emb.data[j].astype(np.float64)
            out[i] = acc.astype(np.float32)
            covered += 1
        else:
            out[i] = _gaussian_row(seed, i, d)
            fallback += 1
    return EmbeddingMatrix(tgt_vocab, out), InitReport(covered, fallback)


def init_foreign_bias(
    tm: TranslationMatrix, src_bias: np.ndarray, tgt_vocab: Vocabulary
) -> np.ndarray:
    """Foreign output bias: same convex combination as the embeddings.

    Uncovered tokens get a zero bias; specials copy the source special biases.
    """
    if len(tm.rows) != len(tgt_vocab):
        raise ValueError("translation matrix size does not match target vocabulary")
    src_bias = np.asarray(src_bias)
    out = np.zeros(len(tgt_vocab), dtype=src_bias.dtype)
    out[:NUM_SPECIALS] = src_bias[:NUM_SPECIALS]
    for i in range(NUM_SPECIALS, len(tgt_vocab)):
        for j, w in tm.rows[i]:
            out[i] += w * src_bias[j]
    return out


def random_init(tgt_vocab: Vocabulary, d: int, seed: int) -> EmbeddingMatrix:
    """Every row i.i.d. N(0, 1/d^2); the random-initialization baseline."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    out = np.empty((len(tgt_vocab), d), dtype=np.float32)
    for i in range(len(tgt_vocab)):
        out[i] = _gaussian_row(seed, i, d)
    return EmbeddingMatrix(tgt_vocab, out)
