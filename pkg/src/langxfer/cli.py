"""Command-line entry points for each pipeline stage.

Every subcommand wraps one library operation, writes its artifact, and
prints a JSON summary to stdout (human-readable logs go to stderr). Exit
status is 0 on success; failures print a JSON error object with a
machine-readable code and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .cipher import generate_cipher_fixture, write_fixture
from .corpus import (
    BpeCodes,
    Tokenizer,
    Vocabulary,
    build_vocab,
    iter_lines,
    iter_tokens,
    learn_bpe,
    read_parallel,
    unigram_probs,
)
from .embeddings import (
    EmbeddingMatrix,
    align,
    identical_word_dictionary,
    load_vectors,
    procrustes,
    read_array,
    read_dictionary,
    save_vectors,
    write_array,
)
from .initializer import init_foreign_bias, init_foreign_embeddings
from .pipeline import (
    PipelineConfig,
    load_config,
    load_flat_dataclass,
    run_all,
    write_config,
)
from .tiny_mlm import ModelConfig, init_model, load_checkpoint
from .trainer import TrainingConfig, evaluate_mlm, pack_sequences, pretrain, run_transfer
from .translation import (
    read_translation_matrix,
    row_entropy_report,
    subword_vectors,
    translation_matrix_from_vectors,
    write_translation_matrix,
)
from .word_alignment import (
    parse_fastalign,
    subsample,
    train_ibm1,
    translation_matrix_from_alignment,
)


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _emit(payload: dict) -> int:
    print(json.dumps(payload, sort_keys=True))
    return 0


def _tokenizer(vocab_path: str, codes_path: str | None) -> Tokenizer:
    vocab = Vocabulary.load(vocab_path)
    codes = BpeCodes.load(codes_path) if codes_path else None
    return Tokenizer(vocab, codes)


def _pack_corpus(path: str, tok: Tokenizer, seq_len: int) -> np.ndarray:
    ids = [tok.encode_line(line) for line in iter_lines(path)]
    return pack_sequences([s for s in ids if s], seq_len)


def cmd_bpe(args) -> int:
    codes = learn_bpe(iter_lines(args.input), args.num_codes)
    codes.save(args.output)
    return _emit(
        {"merges": codes.num_codes, "exhausted": codes.exhausted, "output": args.output}
    )


def cmd_vocab(args) -> int:
    codes = BpeCodes.load(args.codes) if args.codes else None
    vocab = build_vocab(iter_tokens(args.input, codes), args.max_size)
    vocab.save(args.output)
    return _emit({"size": len(vocab), "output": args.output})


def cmd_align_vectors(args) -> int:
    fg = load_vectors(args.foreign_vectors, args.limit)
    en = load_vectors(args.english_vectors, args.limit)
    if args.dictionary:
        pairs = read_dictionary(args.dictionary, fg.vocab, en.vocab)
    else:
        pairs = identical_word_dictionary(fg.vocab, en.vocab)
    mapping = procrustes(fg, en, pairs, normalize=args.normalize)
    aligned = align(fg, mapping)
    save_vectors(aligned, args.output, format="text")
    return _emit(
        {
            "pairs": len(pairs),
            "residual": mapping.residual,
            "rank": mapping.rank,
            "output": args.output,
        }
    )


def _read_aligned_parallel(args) -> tuple:
    tok_fg = _tokenizer(args.foreign_vocab, args.foreign_codes)
    tok_en = _tokenizer(args.english_vocab, args.english_codes)
    if args.parallel:
        corpus = read_parallel(args.parallel, None, tok_fg, tok_en)
    else:
        corpus = read_parallel(args.foreign, args.english, tok_fg, tok_en)
    if corpus.dropped:
        _log(f"dropped {corpus.dropped} empty pairs")
    return corpus, tok_fg.vocab, tok_en.vocab


def cmd_ibm1(args) -> int:
    corpus, vocab_fg, vocab_en = _read_aligned_parallel(args)
    if args.subsample:
        corpus = subsample(corpus, args.subsample, args.seed)
    model = train_ibm1(corpus, args.iterations, args.prune)
    tm = translation_matrix_from_alignment(model, vocab_fg, vocab_en)
    write_translation_matrix(tm, vocab_fg, vocab_en, args.output)
    return _emit(
        {
            "pairs": len(corpus),
            "iterations": model.iterations_run,
            "final_log_likelihood": model.final_log_likelihood,
            "covered_rows": sum(tm.coverage),
            "output": args.output,
        }
    )


def cmd_parse_fastalign(args) -> int:
    corpus, vocab_fg, vocab_en = _read_aligned_parallel(args)
    model = parse_fastalign(args.alignments, corpus)
    tm = translation_matrix_from_alignment(model, vocab_fg, vocab_en)
    write_translation_matrix(tm, vocab_fg, vocab_en, args.output)
    return _emit(
        {"pairs": len(corpus), "covered_rows": sum(tm.coverage), "output": args.output}
    )


def cmd_subword_vectors(args) -> int:
    word_emb = load_vectors(args.vectors, args.limit)
    vocab = Vocabulary.load(args.vocab)
    codes = BpeCodes.load(args.codes)
    words = build_vocab(iter_tokens(args.corpus), max_size=1 << 30)
    unigrams = unigram_probs(iter_tokens(args.corpus), words)
    table = subword_vectors(word_emb, unigrams, vocab, codes)
    save_vectors(table.emb, args.output, format="text")
    return _emit(
        {
            "subwords": len(vocab),
            "covered": int(np.sum(table.support > 0)),
            "output": args.output,
        }
    )


def cmd_translation_matrix(args) -> int:
    fg = load_vectors(args.foreign_vectors)
    en = load_vectors(args.english_vectors)
    tm = translation_matrix_from_vectors(fg, en, mode=args.mode)
    write_translation_matrix(tm, fg.vocab, en.vocab, args.output)
    report = row_entropy_report(tm)
    return _emit(
        {
            "rows": report.n_rows,
            "covered": report.n_covered,
            "mean_nonzeros": report.mean_nonzeros,
            "mean_entropy": report.mean_entropy,
            "output": args.output,
        }
    )


def cmd_init_embeddings(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    vocab_fg = Vocabulary.load(args.foreign_vocab)
    vocab_en = model.vocab_en
    tm = read_translation_matrix(args.translation_matrix, vocab_fg, vocab_en)
    src_emb = EmbeddingMatrix(vocab_en, model.params["emb_en"])
    emb, report = init_foreign_embeddings(tm, src_emb, vocab_fg, args.seed)
    bias = init_foreign_bias(tm, model.params["out_bias_en"], vocab_fg)
    write_array(args.output_emb, emb.data, tokens=vocab_fg.tokens)
    write_array(args.output_bias, bias)
    _log(report.summary())
    return _emit(
        {
            "covered": report.covered,
            "fallback": report.fallback,
            "coverage_ratio": report.coverage_ratio,
            "output_emb": args.output_emb,
            "output_bias": args.output_bias,
        }
    )


def _training_config(args) -> TrainingConfig:
    if args.config:
        cfg = load_flat_dataclass(args.config, TrainingConfig)
    else:
        cfg = TrainingConfig()
    if args.updates is not None:
        cfg.total_updates = args.updates
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_pretrain(args) -> int:
    tok = _tokenizer(args.vocab, args.codes)
    cfg = _training_config(args)
    mcfg = ModelConfig(
        dim=args.dim, layers=args.layers, heads=args.heads,
        ffn_dim=args.ffn_dim, max_len=cfg.seq_len,
    )
    model = init_model(mcfg, tok.vocab, Vocabulary.from_tokens([]), cfg.seed)
    train = _pack_corpus(args.corpus, tok, cfg.seq_len)
    heldout = _pack_corpus(args.heldout, tok, cfg.seq_len) if args.heldout else None
    result = pretrain(cfg, model, train, heldout, out_dir=args.out_dir)
    final = result.metrics[-1]
    payload = {"updates": cfg.total_updates, "final_loss_en": final[2],
               "out_dir": args.out_dir}
    if result.evals:
        payload["eval_loss_en"] = result.evals[-1][1]
    return _emit(payload)


def cmd_transfer(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    cfg = _training_config(args)
    emb_data, tokens = read_array(args.init_emb)
    if tokens is None:
        raise ValueError(f"{args.init_emb}: missing token list in header")
    vocab_fg = Vocabulary(tokens)
    bias = read_array(args.init_bias)[0] if args.init_bias else None
    tok_en = Tokenizer(model.vocab_en, BpeCodes.load(args.codes_en) if args.codes_en else None)
    tok_fg = Tokenizer(vocab_fg, BpeCodes.load(args.codes_fg) if args.codes_fg else None)
    result = run_transfer(
        cfg,
        model,
        EmbeddingMatrix(vocab_fg, emb_data),
        _pack_corpus(args.en_train, tok_en, cfg.seq_len),
        _pack_corpus(args.fg_train, tok_fg, cfg.seq_len),
        _pack_corpus(args.en_heldout, tok_en, cfg.seq_len) if args.en_heldout else None,
        _pack_corpus(args.fg_heldout, tok_fg, cfg.seq_len) if args.fg_heldout else None,
        init_bias=bias,
        out_dir=args.out_dir,
    )
    final = result.metrics[-1]
    payload = {
        "updates": cfg.total_updates,
        "final_loss_en": final[2],
        "final_loss_fg": final[3],
        "out_dir": args.out_dir,
    }
    if result.evals:
        last = result.evals[-1]
        payload.update({"eval_loss_en": last[1], "eval_loss_fg": last[3]})
    return _emit(payload)


def cmd_eval(args) -> int:
    model, step, _ = load_checkpoint(args.checkpoint)
    vocab = model.vocab(args.language)
    tok = Tokenizer(vocab, BpeCodes.load(args.codes) if args.codes else None)
    rows = _pack_corpus(args.corpus, tok, model.cfg.max_len)
    loss, acc = evaluate_mlm(model, rows, args.language, args.seed, args.mask_prob)
    return _emit(
        {"step": step, "language": args.language, "loss": loss, "accuracy": acc}
    )


def cmd_cipher_fixture(args) -> int:
    fixture = generate_cipher_fixture(
        vocab_size=args.vocab_size,
        sentences=args.sentences,
        seed=args.seed,
        heldout=args.heldout,
        dict_dropout=args.dict_dropout,
        split_prob=args.split_prob,
    )
    paths = write_fixture(fixture, args.out_dir)
    out = Path(args.out_dir)
    config = PipelineConfig(
        out_dir=str(out / "pipeline"),
        en_train=paths["en_train.txt"],
        en_heldout=paths["en_heldout.txt"],
        fg_train=paths["fg_train.txt"],
        fg_heldout=paths["fg_heldout.txt"],
        route=args.route,
        dictionary=paths["noisy_dictionary.tsv"],
        seed=args.seed,
    )
    config_path = out / "pipeline.cfg"
    write_config(config, config_path)
    return _emit(
        {
            "out_dir": args.out_dir,
            "config": str(config_path),
            "dictionary_entries": len(fixture.dictionary),
            "sentences": len(fixture.en_train),
        }
    )


def cmd_run_all(args) -> int:
    config = load_config(args.config)
    summary = run_all(config)
    return _emit(summary)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="langxfer",
        description="Cross-lingual MLM transfer via sparse embedding initialization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bpe", help="learn BPE merge rules")
    p.add_argument("--input", required=True)
    p.add_argument("--num-codes", type=int, required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_bpe)

    p = sub.add_parser("vocab", help="build a frequency vocabulary")
    p.add_argument("--input", required=True)
    p.add_argument("--max-size", type=int, required=True)
    p.add_argument("--codes", default=None, help="BPE codes for subword tokens")
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_vocab)

    p = sub.add_parser("align-vectors", help="Procrustes-align foreign vectors into english space")
    p.add_argument("--foreign-vectors", required=True)
    p.add_argument("--english-vectors", required=True)
    p.add_argument("--dictionary", default=None, help="seed TSV: foreign<TAB>english")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--limit", type=int, default=50000)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_align_vectors)

    def add_parallel_args(p):
        p.add_argument("--foreign", default=None, help="foreign side, one sentence per line")
        p.add_argument("--english", default=None)
        p.add_argument("--parallel", default=None, help="single tab-separated file")
        p.add_argument("--foreign-vocab", required=True)
        p.add_argument("--english-vocab", required=True)
        p.add_argument("--foreign-codes", default=None)
        p.add_argument("--english-codes", default=None)

    p = sub.add_parser("ibm1", help="estimate p(english|foreign) by IBM Model 1 EM")
    add_parallel_args(p)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--prune", type=float, default=1e-4)
    p.add_argument("--subsample", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_ibm1)

    p = sub.add_parser("parse-fastalign", help="translation probabilities from fast-align output")
    add_parallel_args(p)
    p.add_argument("--alignments", required=True, help='file of "i-j" pairs, foreign as source')
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_parse_fastalign)

    p = sub.add_parser("subword-vectors", help="aggregate word vectors into subword vectors")
    p.add_argument("--vectors", required=True)
    p.add_argument("--corpus", required=True, help="monolingual text for unigram weights")
    p.add_argument("--vocab", required=True, help="subword vocabulary")
    p.add_argument("--codes", required=True)
    p.add_argument("--limit", type=int, default=50000)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_subword_vectors)

    p = sub.add_parser("translation-matrix", help="sparsemax translation matrix from aligned vectors")
    p.add_argument("--foreign-vectors", required=True, help="aligned foreign .vec")
    p.add_argument("--english-vectors", required=True)
    p.add_argument("--mode", choices=("sparsemax", "softmax"), default="sparsemax")
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_translation_matrix)

    p = sub.add_parser("init-embeddings", help="initialize foreign embeddings from a translation matrix")
    p.add_argument("--translation-matrix", required=True)
    p.add_argument("--checkpoint", required=True, help="pretrained english model")
    p.add_argument("--foreign-vocab", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-emb", required=True)
    p.add_argument("--output-bias", required=True)
    p.set_defaults(fn=cmd_init_embeddings)

    def add_training_args(p):
        p.add_argument("--config", default=None, help="flat key=value training config")
        p.add_argument("--updates", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("pretrain", help="pretrain the english masked LM")
    p.add_argument("--corpus", required=True)
    p.add_argument("--heldout", default=None)
    p.add_argument("--vocab", required=True)
    p.add_argument("--codes", default=None)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn-dim", type=int, default=256)
    p.add_argument("--out-dir", required=True)
    add_training_args(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("transfer", help="two-phase bilingual fine-tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--init-emb", required=True, help="binary foreign embeddings")
    p.add_argument("--init-bias", default=None)
    p.add_argument("--en-train", required=True)
    p.add_argument("--fg-train", required=True)
    p.add_argument("--en-heldout", default=None)
    p.add_argument("--fg-heldout", default=None)
    p.add_argument("--codes-en", default=None)
    p.add_argument("--codes-fg", default=None)
    p.add_argument("--out-dir", required=True)
    add_training_args(p)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("eval", help="held-out loss and accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--language", choices=("en", "fg"), required=True)
    p.add_argument("--codes", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-prob", type=float, default=0.15)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("cipher-fixture", help="generate a synthetic cipher-language bundle")
    p.add_argument("--vocab-size", type=int, default=120)
    p.add_argument("--sentences", type=int, default=3000)
    p.add_argument("--heldout", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dict-dropout", type=float, default=0.0)
    p.add_argument("--split-prob", type=float, default=0.0)
    p.add_argument("--route", choices=("parallel", "dictionary"), default="parallel")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_cipher_fixture)

    p = sub.add_parser("run-all", help="run every stage with content-hash caching")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_run_all)

    return parser


_ERROR_CODES = {
    FileNotFoundError: "not_found",
    ValueError: "invalid_input",
    FloatingPointError: "numeric_error",
    OSError: "io_error",
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, FloatingPointError) as exc:
        code = next(
            (c for t, c in _ERROR_CODES.items() if isinstance(exc, t)), "error"
        )
        print(
            json.dumps(
                {"status": "error", "stage": args.command, "code": code,
                 "message": str(exc)},
                sort_keys=True,
            )
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
