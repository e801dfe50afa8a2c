"""Command-line entry point: ``dmr {train,predict,eval-markers,analyze,probe,synth}``.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from . import analysis
from .checkpoint import Checkpoint, CheckpointError, history_digest, load_checkpoint, load_spec, save_checkpoint
from .corpus import CorpusError, generate_synthetic, load_corpus, split_indices, tokenize, write_corpus
from .em import TrainConfig, TrainingError, train
from .encoder import PackedPairs
from .model import packed_log_marginal, rank_descending
from .probe import (
    acc_at_k,
    eval_probe,
    extract_representations,
    few_shot_subsets,
    load_relation_dataset,
    train_probe,
)

log = logging.getLogger("dmr")

ACC_KS = (1, 3, 5, 10)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    defaults = TrainConfig()
    parser = _Parser(prog="dmr", description="Latent-sense discourse marker model.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a marker corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--heldout")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="write the per-iteration key=value history here")
    p.add_argument("--k", type=_positive_int, default=defaults.k)
    p.add_argument("--d", type=_positive_int, default=defaults.d)
    p.add_argument("--d-e", type=_positive_int, default=defaults.d_e)
    p.add_argument("--lr-psi", type=float, default=defaults.lr_psi)
    p.add_argument("--lr-phi", type=float, default=defaults.lr_phi)
    p.add_argument("--em-batch", type=_positive_int, default=defaults.em_batch_size)
    p.add_argument("--minibatch", type=_positive_int, default=defaults.minibatch_size)
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--phi-mode", choices=("gradient", "closed_form"), default=defaults.phi_update_mode)
    p.add_argument("--phi-smoothing", type=float, default=defaults.phi_smoothing)
    p.add_argument("--patience", type=int, default=defaults.patience,
                   help="held-out evaluations without improvement before stopping")
    p.add_argument("--min-delta", type=float, default=defaults.min_delta)
    p.add_argument("--min-token-count", type=_positive_int, default=1)

    p = sub.add_parser("predict", help="rank markers for sentence pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="TSV of s1<TAB>s2 (a third column is ignored)")
    p.add_argument("--top-k", type=_positive_int, default=5)
    p.add_argument("--out")

    p = sub.add_parser("eval-markers", help="ACC@k of marker prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)

    p = sub.add_parser("analyze", help="latent-space analysis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("mode", choices=("z2m", "m2z", "embed", "project", "confusion"))
    p.add_argument("--top-k", type=_positive_int, default=3)
    p.add_argument("--marker", help="marker name for m2z (default: every marker)")
    p.add_argument("--prior", choices=("uniform", "empirical"), default="uniform")
    p.add_argument("--corpus", help="corpus for the empirical prior or marker confusion")
    p.add_argument("--labels", help="relation TSV: confusion over probe predictions")
    p.add_argument("--top-m", type=_positive_int, default=3)
    p.add_argument("--n-entropy", type=_positive_int, default=20)
    p.add_argument("--probe-lr", type=float, default=0.1)
    p.add_argument("--probe-epochs", type=int, default=500)
    p.add_argument("--out")

    p = sub.add_parser("probe", help="linear relation probe on h_z")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labels", required=True, help="training relation TSV")
    p.add_argument("--test", help="evaluation relation TSV (default: hold out 20%% of --labels)")
    p.add_argument("--few-shot", type=_int_list, default=[])
    p.add_argument("--runs", type=_positive_int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--per-class-out", help="TSV of per-class F1")

    p = sub.add_parser("synth", help="sample a synthetic corpus from a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="corpus TSV")
    p.add_argument("--truth", help="one true latent id per line")
    p.add_argument("--relations-out", help="relation TSV labelled by the true latent sense")
    return parser


def _write_output(text: str, path: str | None, stdout: TextIO) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        stdout.write(text)


def cmd_train(args, stdout):
    config = TrainConfig(
        k=args.k, d=args.d, d_e=args.d_e, lr_psi=args.lr_psi, lr_phi=args.lr_phi,
        em_batch_size=args.em_batch, minibatch_size=args.minibatch, epochs=args.epochs,
        seed=args.seed, phi_update_mode=args.phi_mode, phi_smoothing=args.phi_smoothing,
        patience=args.patience, min_delta=args.min_delta,
    )
    corpus = load_corpus(args.corpus, min_token_count=args.min_token_count)
    heldout = None
    if args.heldout:
        heldout = load_corpus(args.heldout, corpus.token_vocab, corpus.marker_vocab)
    params, enc, history = train(config, corpus, heldout)
    save_checkpoint(args.out, Checkpoint(config, corpus.token_vocab, corpus.marker_vocab, enc, params,
                                         history_digest(history)))
    if args.history:
        Path(args.history).write_text(history.to_text(), encoding="utf-8")
    last = history.records[-1] if history.records else None
    stdout.write(f"iterations={len(history)}\n")
    if last is not None:
        stdout.write(f"final_batch_nll={last.nll_after:.17g}\n")
        if last.heldout_nll is not None:
            stdout.write(f"final_heldout_nll={last.heldout_nll:.17g}\n")
    return 0


def _read_pairs(path, token_vocab):
    pairs = []
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise CorpusError(f"{path}: line {lineno}: expected 2 or 3 tab-separated fields")
        s1, s2 = token_vocab.encode(tokenize(fields[0])), token_vocab.encode(tokenize(fields[1]))
        if not s1 or not s2:
            raise CorpusError(f"{path}: line {lineno}: empty sentence")
        pairs.append((s1, s2))
    if not pairs:
        raise CorpusError(f"{path}: empty file")
    return pairs


def cmd_predict(args, stdout):
    ckpt = load_checkpoint(args.checkpoint)
    n = len(ckpt.marker_vocab)
    if args.top_k > n:
        raise UsageError(f"--top-k must be at most the number of markers ({n})")
    pairs = _read_pairs(args.input, ckpt.token_vocab)
    probs = np.exp(packed_log_marginal(ckpt.params, ckpt.encoder, PackedPairs.from_pairs(pairs)))
    lines = ["index\trank\tmarker\tprobability"]
    for i, p in enumerate(probs):
        for rank, (m, prob) in enumerate(rank_descending(p, args.top_k), start=1):
            lines.append(f"{i}\t{rank}\t{ckpt.marker_vocab.id_to_label[m]}\t{prob:.17g}")
    _write_output("\n".join(lines) + "\n", args.out, stdout)
    return 0


def marker_rankings(ckpt: Checkpoint, corpus) -> tuple[np.ndarray, np.ndarray]:
    """Marginal marker distributions and full descending rankings for a corpus."""
    probs = np.exp(packed_log_marginal(ckpt.params, ckpt.encoder, PackedPairs.from_examples(corpus.examples)))
    ranked = np.argsort(-probs, axis=1, kind="stable")
    return probs, ranked


def cmd_eval_markers(args, stdout):
    ckpt = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus, ckpt.token_vocab, ckpt.marker_vocab)
    probs, ranked = marker_rankings(ckpt, corpus)
    gold = corpus.markers
    stdout.write(f"n={len(corpus)}\n")
    stdout.write(f"mean_nll={-np.mean(np.log(probs[np.arange(len(gold)), gold])):.17g}\n")
    for k in ACC_KS:
        stdout.write(f"acc@{k}={acc_at_k(ranked.tolist(), gold.tolist(), k):.17g}\n")
    return 0


def _fit_probe(ckpt, dataset, lr, epochs, seed):
    reps = extract_representations(ckpt.params, ckpt.encoder, dataset.pairs)
    return reps, train_probe(reps, dataset.labels, lr=lr, epochs=epochs, seed=seed,
                             n_classes=len(dataset.relation_vocab))


def cmd_analyze(args, stdout):
    ckpt = load_checkpoint(args.checkpoint)
    params, mv = ckpt.params, ckpt.marker_vocab
    lines = []
    if args.mode == "z2m":
        k = min(args.top_k, params.n_markers)
        for z in range(params.k):
            top = analysis.z2m_top_markers(params, z, k)
            lines.append("\t".join([str(z)] + [f"{mv.id_to_label[m]}:{p:.17g}" for m, p in top]))
    elif args.mode == "m2z":
        if args.prior == "empirical":
            if not args.corpus:
                raise UsageError("--prior empirical requires --corpus")
            corpus = load_corpus(args.corpus, ckpt.token_vocab, mv)
            prior = analysis.empirical_latent_prior(params, ckpt.encoder, corpus)
        else:
            prior = np.full(params.k, 1.0 / params.k)
        if args.marker is not None:
            if args.marker not in mv.label_to_id:
                raise CorpusError(f"unknown marker {args.marker!r}")
            markers = [mv.label_to_id[args.marker]]
        else:
            markers = range(params.n_markers)
        k = min(args.top_k, params.k)
        for m in markers:
            top = analysis.m2z_top_clusters(params, prior, m, k)
            lines.append("\t".join([mv.id_to_label[m]] + [f"z{z}:{s:.17g}" for z, s in top]))
    elif args.mode == "embed":
        emb = analysis.latent_embeddings(params, args.top_k)
        if args.out:
            analysis.write_embeddings(emb, args.out, mv)
            return 0
        lines = [f"{z}\t" + "\t".join(mv.id_to_label[m] for m in emb.labels[z]) for z in range(params.k)]
    elif args.mode == "project":
        coords = analysis.project_2d(params.w2)
        emb = analysis.latent_embeddings(params, 3)
        lines.append("z\tx\ty\ttop_markers")
        for z, (x, y) in enumerate(coords):
            lines.append(f"{z}\t{x:.17g}\t{y:.17g}\t{','.join(mv.id_to_label[m] for m in emb.labels[z])}")
    else:
        if args.labels:
            dataset = load_relation_dataset(args.labels, ckpt.token_vocab)
            reps, probe = _fit_probe(ckpt, dataset, args.probe_lr, args.probe_epochs, 0)
            dists = eval_probe(probe, reps, dataset.labels).distributions
            names = dataset.relation_vocab.id_to_label
        elif args.corpus:
            corpus = load_corpus(args.corpus, ckpt.token_vocab, mv)
            dists, _ = marker_rankings(ckpt, corpus)
            names = mv.id_to_label
        else:
            raise UsageError("confusion needs --labels or --corpus")
        cm = analysis.confusion_weights(list(dists), min(args.top_m, len(names)),
                                        min(args.n_entropy, len(dists)))
        lines.append("\t".join(["class"] + names))
        for name, row in zip(names, cm.weights):
            lines.append("\t".join([name] + [f"{x:.17g}" for x in row]))
    _write_output("\n".join(lines) + "\n", args.out, stdout)
    return 0


def cmd_probe(args, stdout):
    ckpt = load_checkpoint(args.checkpoint)
    data = load_relation_dataset(args.labels, ckpt.token_vocab)
    if args.test:
        train_set = data
        test_set = load_relation_dataset(args.test, ckpt.token_vocab, data.relation_vocab)
    else:
        tr, va, te = split_indices(len(data), (0.8, 0.1, 0.1), args.seed)
        train_set, test_set = data.subset(tr), data.subset(np.concatenate([va, te]))
    c = len(data.relation_vocab)
    test_reps = extract_representations(ckpt.params, ckpt.encoder, test_set.pairs)
    train_reps = extract_representations(ckpt.params, ckpt.encoder, train_set.pairs)

    def run(indices):
        probe = train_probe(train_reps[indices], [train_set.labels[i] for i in indices],
                            lr=args.lr, epochs=args.epochs, seed=args.seed, n_classes=c)
        return eval_probe(probe, test_reps, test_set.labels)

    report = run(np.arange(len(train_set)))
    stdout.write(f"n_train={len(train_set)}\nn_test={len(test_set)}\n")
    stdout.write(report.to_text())
    if args.few_shot:
        subsets = few_shot_subsets(train_set, args.few_shot, args.runs, args.seed)
        for size in args.few_shot:
            reports = [run(np.asarray(subsets[(size, r)])) for r in range(args.runs)]
            stdout.write(
                f"few_shot size={size} runs={args.runs} "
                f"accuracy={np.mean([r.accuracy for r in reports]):.17g} "
                f"macro_f1={np.mean([r.macro_f1 for r in reports]):.17g}\n"
            )
    if args.per_class_out:
        rows = ["relation\tf1"] + [f"{name}\t{f:.17g}" for name, f in
                                    zip(data.relation_vocab.id_to_label, report.per_class_f1)]
        Path(args.per_class_out).write_text("\n".join(rows) + "\n", encoding="utf-8")
    return 0


def cmd_synth(args, stdout):
    spec = load_spec(args.spec)
    corpus, zs = generate_synthetic(spec, args.n, args.seed)
    write_corpus(corpus, args.out)
    if args.truth:
        Path(args.truth).write_text("".join(f"{z}\n" for z in zs), encoding="utf-8")
    if args.relations_out:
        tv = corpus.token_vocab
        with open(args.relations_out, "w", encoding="utf-8", newline="\n") as fh:
            for ex, z in zip(corpus.examples, zs):
                fh.write(f"{' '.join(tv.decode(ex.s1))}\t{' '.join(tv.decode(ex.s2))}\tr{z}\n")
    stdout.write(f"examples={len(corpus)}\n")
    return 0


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "eval-markers": cmd_eval_markers,
    "analyze": cmd_analyze,
    "probe": cmd_probe,
    "synth": cmd_synth,
}


def run_command(argv: Sequence[str] | None = None, stdout: TextIO | None = None,
                stderr: TextIO | None = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=stderr)
        return COMMANDS[args.command](args, stdout)
    except UsageError as exc:
        stderr.write(f"{exc}\n")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (CorpusError, CheckpointError, TrainingError, ValueError, IndexError, OSError) as exc:
        stderr.write(f"dmr: error: {exc}\n")
        return 2


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
