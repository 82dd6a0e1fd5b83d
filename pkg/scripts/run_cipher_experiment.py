#!/usr/bin/env python3
"""End-to-end cipher-language transfer experiment.

Generates a synthetic cipher bundle, runs the full pipeline on it (vocab,
english pretraining, IBM Model 1 alignment, embedding initialization,
bilingual fine-tuning), and reports held-out losses. With --compare-random
the transfer is rerun from randomly initialized foreign embeddings so the
two initializations can be compared on the same pretrained model.

    python scripts/run_cipher_experiment.py --out-dir /tmp/cipher_exp \
        --compare-random
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from langxfer.cipher import generate_cipher_fixture, write_fixture
from langxfer.corpus import NUM_SPECIALS, Vocabulary
from langxfer.embeddings import EmbeddingMatrix
from langxfer.initializer import random_init
from langxfer.pipeline import PipelineConfig, run_all, write_config
from langxfer.tiny_mlm import load_checkpoint
from langxfer.trainer import run_transfer


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--vocab-size", type=int, default=60)
    parser.add_argument("--sentences", type=int, default=8000)
    parser.add_argument("--heldout", type=int, default=300)
    parser.add_argument("--seed", type=int, default=100)
    parser.add_argument("--dict-dropout", type=float, default=0.2)
    parser.add_argument("--bigram-alpha", type=float, default=0.08)
    parser.add_argument("--route", choices=("parallel", "dictionary"),
                        default="parallel")
    parser.add_argument("--compare-random", action="store_true",
                        help="also fine-tune from random foreign embeddings")
    args = parser.parse_args()

    out = Path(args.out_dir)
    fixture = generate_cipher_fixture(
        vocab_size=args.vocab_size, sentences=args.sentences, seed=args.seed,
        heldout=args.heldout, dict_dropout=args.dict_dropout,
        bigram_alpha=args.bigram_alpha,
    )
    paths = write_fixture(fixture, out / "bundle")
    print(f"bundle written to {out / 'bundle'}", file=sys.stderr)

    config = PipelineConfig(
        out_dir=str(out / "pipeline"),
        en_train=paths["en_train.txt"], en_heldout=paths["en_heldout.txt"],
        fg_train=paths["fg_train.txt"], fg_heldout=paths["fg_heldout.txt"],
        route=args.route, dictionary=paths["noisy_dictionary.tsv"],
        seed=args.seed,
    )
    write_config(config, out / "pipeline.cfg")
    summary = run_all(config)
    print(f"pipeline done; english retention delta "
          f"{summary['english_retention_delta']:+.4f} nats", file=sys.stderr)

    if args.compare_random:
        work = Path(summary["work_dir"])
        ck = work / "pretrain" / "checkpoints" / f"step_{config.pretrain_updates:07d}"
        model, _, _ = load_checkpoint(ck)
        vocab_fg = Vocabulary.load(work / "vocab_fg.txt")
        emb = random_init(vocab_fg, config.dim, args.seed + 1)
        data = emb.data.copy()
        data[:NUM_SPECIALS] = model.params["emb_en"][:NUM_SPECIALS]
        result = run_transfer(
            config.training_config(), model, EmbeddingMatrix(vocab_fg, data),
            np.load(work / "pack_en_train.npy"),
            np.load(work / "pack_fg_train.npy"),
            np.load(work / "pack_en_heldout.npy"),
            np.load(work / "pack_fg_heldout.npy"),
            out_dir=out / "random_init",
        )
        summary["random_init"] = {
            "foreign_loss_step0": result.evals[0][3],
            "foreign_loss_final": result.evals[-1][3],
        }
        summary["random_minus_vec_final_gap"] = (
            summary["random_init"]["foreign_loss_final"]
            - summary["foreign_loss_final"]
        )
        print(f"random-init final foreign loss "
              f"{summary['random_init']['foreign_loss_final']:.4f} vs "
              f"{summary['foreign_loss_final']:.4f} (vec init)", file=sys.stderr)

    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
