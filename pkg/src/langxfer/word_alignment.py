"""Lexical translation probabilities p(english | foreign) from parallel data.

Two routes produce the same table shape: an internal IBM Model 1 EM aligner,
and a parser for external fast-align output ("i-j" pairs, foreign side run
as the source). A NULL english token absorbs unaligned foreign mass; it is
dropped (and rows renormalized) when building a translation matrix.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import ParallelCorpus, Vocabulary
from .translation import TranslationMatrix

NULL_ID = -1


@dataclass
class AlignmentModel:
    """Sparse table: foreign token id -> {english token id (or NULL_ID): prob}."""

    table: dict[int, dict[int, float]]
    iterations_run: int
    final_log_likelihood: float
    log_likelihoods: list[float] = field(default_factory=list)

    def check_rows(self, tol: float = 1e-6) -> None:
        for f, row in self.table.items():
            total = math.fsum(row.values())
            if abs(total - 1.0) > tol:
                raise ValueError(f"row for foreign id {f} sums to {total}")


def train_ibm1(
    corpus: ParallelCorpus, iterations: int = 10, prune: float = 1e-4
) -> AlignmentModel:
    """Estimate p(e|f) by IBM Model 1 EM with a uniform alignment prior.

    Each english sentence is augmented with a NULL token; every english token
    (NULL included) aligns to one foreign position. Initialization is uniform
    over co-occurring pairs only. After the final iteration, entries below
    `prune` are dropped and rows renormalized.
    """
    if not corpus.pairs:
        raise ValueError("cannot train an aligner on an empty corpus")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")

    cooc: dict[int, set[int]] = defaultdict(set)
    for fg, en in corpus.pairs:
        for f in fg:
            cooc[f].update(en)
            cooc[f].add(NULL_ID)
    table: dict[int, dict[int, float]] = {
        f: {e: 1.0 / len(es) for e in es} for f, es in cooc.items()
    }

    log_likelihoods: list[float] = []
    for _ in range(iterations):
        counts: dict[int, dict[int, float]] = defaultdict(lambda: defaultdict(float))
        ll = 0.0
        for fg, en in corpus.pairs:
            log_len = math.log(len(fg))
            for e in list(en) + [NULL_ID]:
                probs = [table[f][e] for f in fg]
                total = math.fsum(probs)
                ll += math.log(total) - log_len
                for f, p in zip(fg, probs):
                    counts[f][e] += p / total
        if log_likelihoods and ll < log_likelihoods[-1] - 1e-9:
            raise AssertionError(
                f"EM log-likelihood decreased: {log_likelihoods[-1]} -> {ll}"
            )
        log_likelihoods.append(ll)
        for f, row in counts.items():
            norm = math.fsum(row.values())
            table[f] = {e: c / norm for e, c in row.items()}

    for f, row in table.items():
        kept = {e: p for e, p in row.items() if p >= prune}
        if not kept:  # keep at least the strongest entry
            best = max(row.items(), key=lambda kv: (kv[1], -kv[0]))
            kept = {best[0]: best[1]}
        norm = math.fsum(kept.values())
        table[f] = {e: p / norm for e, p in kept.items()}

    model = AlignmentModel(
        table=table,
        iterations_run=iterations,
        final_log_likelihood=log_likelihoods[-1],
        log_likelihoods=log_likelihoods,
    )
    model.check_rows()
    return model


def parse_fastalign(
    alignments_path: str | Path, corpus: ParallelCorpus
) -> AlignmentModel:
    """Relative-frequency p(e|f) from fast-align output.

    One line per corpus pair; entries are "i-j" with i the 0-based foreign
    position and j the english position. Empty lines mean no alignments.
    """
    with open(alignments_path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if len(lines) != len(corpus.pairs):
        raise ValueError(
            f"{alignments_path}: {len(lines)} alignment lines for "
            f"{len(corpus.pairs)} sentence pairs"
        )
    pair_counts: dict[int, dict[int, float]] = defaultdict(lambda: defaultdict(float))
    totals: dict[int, float] = defaultdict(float)
    for n, (line, (fg, en)) in enumerate(zip(lines, corpus.pairs), 1):
        for entry in line.split():
            left, sep, right = entry.partition("-")
            if not sep or not left.isdigit() or not right.isdigit():
                raise ValueError(
                    f"{alignments_path}: line {n}: malformed entry {entry!r}"
                )
            i, j = int(left), int(right)
            if i >= len(fg) or j >= len(en):
                raise ValueError(
                    f"{alignments_path}: line {n}: index {entry} out of range "
                    f"for lengths {len(fg)}/{len(en)}"
                )
            pair_counts[fg[i]][en[j]] += 1.0
            totals[fg[i]] += 1.0
    table = {
        f: {e: c / totals[f] for e, c in row.items()}
        for f, row in pair_counts.items()
    }
    model = AlignmentModel(
        table=table,
        iterations_run=0,
        final_log_likelihood=float("nan"),
    )
    model.check_rows()
    return model


def translation_matrix_from_alignment(
    model: AlignmentModel, tgt_vocab: Vocabulary, src_vocab: Vocabulary
) -> TranslationMatrix:
    """Alignment probabilities as translation-matrix rows, NULL mass dropped."""
    rows: list[list[tuple[int, float]]] = [[] for _ in range(len(tgt_vocab))]
    for f, row in model.table.items():
        if not (0 <= f < len(tgt_vocab)):
            raise ValueError(f"foreign id {f} out of range for the target vocabulary")
        entries = [(e, p) for e, p in row.items() if e != NULL_ID]
        for e, _ in entries:
            if not (0 <= e < len(src_vocab)):
                raise ValueError(f"english id {e} out of range for the source vocabulary")
        mass = math.fsum(p for _, p in entries)
        if mass <= 0.0:
            continue  # only NULL mass: leave the row uncovered
        entries = [(e, p / mass) for e, p in entries]
        entries.sort()
        rows[f] = entries
    return TranslationMatrix(rows)


def subsample(corpus: ParallelCorpus, n: int, seed: int) -> ParallelCorpus:
    """Uniform sample of n pairs without replacement, original order kept."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n >= len(corpus.pairs):
        return ParallelCorpus(list(corpus.pairs), dropped=corpus.dropped)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(corpus.pairs), size=n, replace=False))
    return ParallelCorpus([corpus.pairs[i] for i in idx], dropped=corpus.dropped)
