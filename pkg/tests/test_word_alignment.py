import itertools
import math
from collections import defaultdict

import numpy as np
import pytest

from langxfer.corpus import NUM_SPECIALS, ParallelCorpus, Vocabulary
from langxfer.word_alignment import (
    NULL_ID,
    parse_fastalign,
    subsample,
    train_ibm1,
    translation_matrix_from_alignment,
)


def brute_force_ibm1(pairs, iterations):
    """Oracle EM: expected counts by explicit enumeration of every alignment
    function (each english token, NULL included, mapped to a foreign position),
    instead of the factorized per-token posterior."""
    cooc = defaultdict(set)
    for fg, en in pairs:
        for f in fg:
            cooc[f].update(en)
            cooc[f].add(NULL_ID)
    table = {f: {e: 1.0 / len(es) for e in es} for f, es in cooc.items()}
    for _ in range(iterations):
        counts = defaultdict(lambda: defaultdict(float))
        for fg, en in pairs:
            targets = list(en) + [NULL_ID]
            total = 0.0
            weights = {}
            for assignment in itertools.product(range(len(fg)), repeat=len(targets)):
                w = 1.0
                for j, i in enumerate(assignment):
                    w *= table[fg[i]][targets[j]] / len(fg)
                weights[assignment] = w
                total += w
            for assignment, w in weights.items():
                for j, i in enumerate(assignment):
                    counts[fg[i]][targets[j]] += w / total
        for f, row in counts.items():
            norm = math.fsum(row.values())
            table[f] = {e: c / norm for e, c in row.items()}
    return table


def ids(vocab, sentence):
    return [vocab.index[w] for w in sentence.split()]


class TestTrainIbm1:
    def setup_method(self):
        self.vf = Vocabulary.from_tokens(["le", "chien"])
        self.ve = Vocabulary.from_tokens(["the", "dog"])
        self.corpus = ParallelCorpus(
            [
                (ids(self.vf, "le chien"), ids(self.ve, "the dog")),
                (ids(self.vf, "le"), ids(self.ve, "the")),
            ]
        )

    def test_two_sentence_corpus_concentrates(self):
        # frozen from the enumeration oracle below: with the english-side
        # NULL absorbing one count per sentence, the raw fixed point is
        # t(the|le) -> 0.5 (NULL 0.5) and t(dog|chien) -> 2/3; after NULL
        # removal the rows concentrate on the correct translations
        model = train_ibm1(self.corpus, iterations=10, prune=0.0)
        tm = translation_matrix_from_alignment(model, self.vf, self.ve)
        le, chien = self.vf.index["le"], self.vf.index["chien"]
        the, dog = self.ve.index["the"], self.ve.index["dog"]
        row_le = dict(tm.rows[le])
        row_chien = dict(tm.rows[chien])
        assert row_le[the] > 0.9
        assert row_chien[dog] == pytest.approx(0.79789, abs=1e-4)
        assert max(row_le, key=row_le.get) == the
        assert max(row_chien, key=row_chien.get) == dog

    def test_matches_brute_force_enumeration_oracle(self):
        model = train_ibm1(self.corpus, iterations=10, prune=0.0)
        oracle = brute_force_ibm1(self.corpus.pairs, iterations=10)
        for f, row in oracle.items():
            for e, p in row.items():
                assert model.table[f].get(e, 0.0) == pytest.approx(p, abs=1e-9)

    def test_single_pair_closed_form(self):
        vf = Vocabulary.from_tokens(["a"])
        ve = Vocabulary.from_tokens(["x"])
        corpus = ParallelCorpus([(ids(vf, "a"), ids(ve, "x"))])
        model = train_ibm1(corpus, iterations=5, prune=0.0)
        row = model.table[vf.index["a"]]
        assert row[ve.index["x"]] >= 0.5
        assert row[ve.index["x"]] + row[NULL_ID] == pytest.approx(1.0, abs=1e-9)

    def test_one_iteration_rows_normalized(self):
        model = train_ibm1(self.corpus, iterations=1, prune=0.0)
        for row in model.table.values():
            assert math.fsum(row.values()) == pytest.approx(1.0, abs=1e-6)

    def test_log_likelihood_non_decreasing(self):
        rng = np.random.default_rng(0)
        vf = Vocabulary.from_tokens([f"f{i}" for i in range(12)])
        ve = Vocabulary.from_tokens([f"e{i}" for i in range(12)])
        pairs = []
        for _ in range(40):
            n = rng.integers(1, 6)
            fg = list(rng.integers(NUM_SPECIALS, len(vf), n))
            en = list(rng.integers(NUM_SPECIALS, len(ve), n))
            pairs.append(([int(x) for x in fg], [int(x) for x in en]))
        model = train_ibm1(ParallelCorpus(pairs), iterations=12, prune=0.0)
        diffs = np.diff(model.log_likelihoods)
        assert np.all(diffs >= -1e-9)

    def test_pruning_renormalizes(self):
        model = train_ibm1(self.corpus, iterations=3, prune=1e-2)
        for row in model.table.values():
            assert math.fsum(row.values()) == pytest.approx(1.0, abs=1e-6)
            assert all(p > 0 for p in row.values())

    def test_empty_corpus_raises(self):
        with pytest.raises(ValueError, match="empty"):
            train_ibm1(ParallelCorpus([]), iterations=1)

    def test_dictionary_generated_corpus_recovered(self):
        rng = np.random.default_rng(1)
        n_types = 60
        vf = Vocabulary.from_tokens([f"f{i}" for i in range(n_types)])
        ve = Vocabulary.from_tokens([f"e{i}" for i in range(n_types)])
        translation = {NUM_SPECIALS + i: NUM_SPECIALS + i for i in range(n_types)}
        pairs = []
        freq = defaultdict(int)
        for _ in range(800):
            length = rng.integers(3, 9)
            fg = [int(x) for x in rng.integers(NUM_SPECIALS, len(vf), length)]
            en = [translation[f] for f in fg]
            for f in fg:
                freq[f] += 1
            pairs.append((fg, en))
        model = train_ibm1(ParallelCorpus(pairs), iterations=10)
        tm = translation_matrix_from_alignment(model, vf, ve)
        checked = correct = 0
        for f, count in freq.items():
            if count < 5 or not tm.rows[f]:
                continue
            checked += 1
            best = max(tm.rows[f], key=lambda e: e[1])[0]
            correct += best == translation[f]
        assert checked > 0
        assert correct / checked >= 0.95


class TestParseFastalign:
    def _corpus(self):
        vf = Vocabulary.from_tokens(["a", "b"])
        ve = Vocabulary.from_tokens(["x", "y"])
        corpus = ParallelCorpus([(ids(vf, "a b"), ids(ve, "x y"))])
        return vf, ve, corpus

    def test_direct_counting(self, tmp_path):
        vf, ve, corpus = self._corpus()
        (tmp_path / "al.txt").write_text("0-0 1-1\n")
        model = parse_fastalign(tmp_path / "al.txt", corpus)
        assert model.table[vf.index["a"]][ve.index["x"]] == 1.0
        assert model.table[vf.index["b"]][ve.index["y"]] == 1.0

    def test_relative_frequency(self, tmp_path):
        vf = Vocabulary.from_tokens(["l"])
        ve = Vocabulary.from_tokens(["e1", "e2"])
        corpus = ParallelCorpus(
            [
                (ids(vf, "l"), ids(ve, "e1")),
                (ids(vf, "l"), ids(ve, "e1")),
                (ids(vf, "l"), ids(ve, "e2")),
            ]
        )
        (tmp_path / "al.txt").write_text("0-0\n0-0\n0-0\n")
        model = parse_fastalign(tmp_path / "al.txt", corpus)
        assert model.table[vf.index["l"]][ve.index["e1"]] == pytest.approx(2 / 3)

    def test_out_of_range_index(self, tmp_path):
        vf, ve, corpus = self._corpus()
        (tmp_path / "al.txt").write_text("0-0 5-1\n")
        with pytest.raises(ValueError, match="line 1"):
            parse_fastalign(tmp_path / "al.txt", corpus)

    def test_malformed_entry(self, tmp_path):
        vf, ve, corpus = self._corpus()
        (tmp_path / "al.txt").write_text("0-0 nonsense\n")
        with pytest.raises(ValueError, match="malformed"):
            parse_fastalign(tmp_path / "al.txt", corpus)

    def test_line_count_mismatch(self, tmp_path):
        vf, ve, corpus = self._corpus()
        (tmp_path / "al.txt").write_text("0-0\n1-1\n")
        with pytest.raises(ValueError, match="alignment lines"):
            parse_fastalign(tmp_path / "al.txt", corpus)

    def test_bijection_gives_one_hot_rows(self, tmp_path):
        rng = np.random.default_rng(2)
        n = 10
        vf = Vocabulary.from_tokens([f"f{i}" for i in range(n)])
        ve = Vocabulary.from_tokens([f"e{i}" for i in range(n)])
        perm = {NUM_SPECIALS + i: NUM_SPECIALS + int(p)
                for i, p in enumerate(rng.permutation(n))}
        pairs, lines = [], []
        for _ in range(30):
            length = int(rng.integers(2, 6))
            fg = [int(x) for x in rng.integers(NUM_SPECIALS, len(vf), length)]
            en = [perm[f] for f in fg]
            pairs.append((fg, en))
            lines.append(" ".join(f"{i}-{i}" for i in range(length)))
        (tmp_path / "al.txt").write_text("\n".join(lines) + "\n")
        model = parse_fastalign(tmp_path / "al.txt", ParallelCorpus(pairs))
        tm = translation_matrix_from_alignment(model, vf, ve)
        for f, row in enumerate(tm.rows):
            if row:
                assert row == [(perm[f], 1.0)]


class TestTranslationMatrixFromAlignment:
    def test_passthrough(self):
        from langxfer.word_alignment import AlignmentModel

        vf = Vocabulary.from_tokens(["le"])
        ve = Vocabulary.from_tokens(["the", "a"])
        model = AlignmentModel(
            table={vf.index["le"]: {ve.index["the"]: 0.9, ve.index["a"]: 0.1}},
            iterations_run=1,
            final_log_likelihood=0.0,
        )
        tm = translation_matrix_from_alignment(model, vf, ve)
        row = dict(tm.rows[vf.index["le"]])
        assert row[ve.index["the"]] == pytest.approx(0.9)

    def test_null_mass_dropped_and_renormalized(self):
        from langxfer.word_alignment import AlignmentModel

        vf = Vocabulary.from_tokens(["le"])
        ve = Vocabulary.from_tokens(["the"])
        model = AlignmentModel(
            table={vf.index["le"]: {NULL_ID: 0.4, ve.index["the"]: 0.6}},
            iterations_run=1,
            final_log_likelihood=0.0,
        )
        tm = translation_matrix_from_alignment(model, vf, ve)
        assert tm.rows[vf.index["le"]] == [(ve.index["the"], 1.0)]

    def test_unseen_token_uncovered(self):
        from langxfer.word_alignment import AlignmentModel

        vf = Vocabulary.from_tokens(["seen", "unseen"])
        ve = Vocabulary.from_tokens(["x"])
        model = AlignmentModel(
            table={vf.index["seen"]: {ve.index["x"]: 1.0}},
            iterations_run=1,
            final_log_likelihood=0.0,
        )
        tm = translation_matrix_from_alignment(model, vf, ve)
        assert tm.rows[vf.index["unseen"]] == []
        assert tm.coverage[vf.index["unseen"]] is False


class TestSubsample:
    def test_exact_two_million(self):
        pair = ([5], [5])
        corpus = ParallelCorpus([pair] * 2_200_000)
        sampled = subsample(corpus, 2_000_000, seed=0)
        assert len(sampled) == 2_000_000

    def test_whole_corpus_when_n_large(self):
        corpus = ParallelCorpus([([5], [6]), ([7], [8])])
        sampled = subsample(corpus, 10, seed=0)
        assert sampled.pairs == corpus.pairs

    def test_deterministic(self):
        corpus = ParallelCorpus([([i], [i]) for i in range(5, 100)])
        a = subsample(corpus, 10, seed=42)
        b = subsample(corpus, 10, seed=42)
        assert a.pairs == b.pairs
        c = subsample(corpus, 10, seed=43)
        assert c.pairs != a.pairs
