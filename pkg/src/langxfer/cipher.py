"""Synthetic cipher-language corpora with a known ground-truth dictionary.

An "english" corpus is sampled from a random bigram model over pseudo-words;
the cipher corpus applies a fixed word-to-word substitution to it. Because
the mapping is known exactly, transfer quality is checkable without any
human evaluation: a perfect initialization reproduces english behaviour on
the cipher side identically.

Noise options exercise the fallback paths: dictionary dropout hides a
fraction of the emitted dictionary, and split noise renders some cipher
words as two tokens (breaking one-to-one token alignment).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_CONSONANTS = list("bcdfghjklmnprstvz")
_VOWELS = list("aeiou")


@dataclass
class CipherFixture:
    en_train: list[str]
    en_heldout: list[str]
    fg_train: list[str]
    fg_heldout: list[str]
    dictionary: list[tuple[str, str]]  # (english word, cipher word), full truth
    noisy_dictionary: list[tuple[str, str]]  # after dropout; == dictionary if none
    seed: int
    meta: dict = field(default_factory=dict)


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        syllables = rng.integers(2, 4)
        w = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))]
            + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(syllables)
        )
        if w in taken:
            continue
        taken.add(w)
        words.append(w)
    return words


def generate_cipher_fixture(
    vocab_size: int,
    sentences: int,
    seed: int,
    heldout: int = 0,
    dict_dropout: float = 0.0,
    split_prob: float = 0.0,
    min_len: int = 4,
    max_len: int = 11,
    bigram_alpha: float = 0.25,
) -> CipherFixture:
    """Deterministic corpus bundle for the cipher-transfer experiment."""
    if vocab_size < 10:
        raise ValueError("vocab_size must be >= 10")
    if not 0.0 <= dict_dropout < 1.0:
        raise ValueError("dict_dropout must be in [0, 1)")
    rng = np.random.default_rng(seed)

    taken: set[str] = set()
    en_words = _pseudo_words(rng, vocab_size, taken)
    fg_words = _pseudo_words(rng, vocab_size, taken)
    dictionary = list(zip(en_words, fg_words))

    # deterministic per-word rendering on the cipher side
    split_flags = rng.random(vocab_size) < split_prob
    fg_render = {}
    for i, (en_w, fg_w) in enumerate(dictionary):
        if split_flags[i] and len(fg_w) >= 4:
            cut = int(rng.integers(2, len(fg_w) - 1))
            fg_render[en_w] = f"{fg_w[:cut]} {fg_w[cut:]}"
        else:
            fg_render[en_w] = fg_w

    init_probs = rng.dirichlet(np.full(vocab_size, 1.0))
    transitions = rng.dirichlet(np.full(vocab_size, bigram_alpha), size=vocab_size)

    def sample_sentence() -> list[str]:
        length = int(rng.integers(min_len, max_len + 1))
        idx = [int(rng.choice(vocab_size, p=init_probs))]
        for _ in range(length - 1):
            idx.append(int(rng.choice(vocab_size, p=transitions[idx[-1]])))
        return [en_words[i] for i in idx]

    en_all = [" ".join(sample_sentence()) for _ in range(sentences + heldout)]
    fg_all = [" ".join(fg_render[w] for w in line.split()) for line in en_all]

    if dict_dropout > 0.0:
        keep = rng.random(vocab_size) >= dict_dropout
        if not keep.any():
            keep[0] = True
        noisy = [pair for pair, k in zip(dictionary, keep) if k]
    else:
        noisy = list(dictionary)

    return CipherFixture(
        en_train=en_all[:sentences],
        en_heldout=en_all[sentences:],
        fg_train=fg_all[:sentences],
        fg_heldout=fg_all[sentences:],
        dictionary=dictionary,
        noisy_dictionary=noisy,
        seed=seed,
        meta={
            "vocab_size": vocab_size,
            "sentences": sentences,
            "heldout": heldout,
            "dict_dropout": dict_dropout,
            "split_prob": split_prob,
        },
    )


def write_fixture(fixture: CipherFixture, out_dir: str | Path) -> dict[str, str]:
    """Write the bundle; returns a name -> path map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    def write_lines(name: str, lines: list[str]) -> None:
        p = out / name
        p.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        paths[name] = str(p)

    write_lines("en_train.txt", fixture.en_train)
    write_lines("en_heldout.txt", fixture.en_heldout)
    write_lines("fg_train.txt", fixture.fg_train)
    write_lines("fg_heldout.txt", fixture.fg_heldout)
    write_lines(
        "dictionary.tsv", [f"{en}\t{fg}" for en, fg in fixture.dictionary]
    )
    write_lines(
        "noisy_dictionary.tsv", [f"{en}\t{fg}" for en, fg in fixture.noisy_dictionary]
    )
    meta_path = out / "meta.json"
    meta_path.write_text(
        json.dumps({"seed": fixture.seed, **fixture.meta}, indent=1) + "\n",
        encoding="utf-8",
    )
    paths["meta.json"] = str(meta_path)
    return paths
