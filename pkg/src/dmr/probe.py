"""Relation probe on the frozen bottleneck representation h_z, plus
marker ACC@k, accuracy / macro-F1 and stratified few-shot subsets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

from .corpus import CorpusError, LabelVocab, TokenVocab, _encode_pairs, _label_ids, read_triples
from .encoder import EncoderParams, PackedPairs, encode_packed, encode_pair
from .model import DmrParams, compute_hz


@dataclass
class RelationDataset:
    pairs: list[tuple[tuple[int, ...], tuple[int, ...]]]
    labels: list[int]
    relation_vocab: LabelVocab

    def __post_init__(self):
        if not self.pairs:
            raise CorpusError("relation dataset is empty")
        if len(self.pairs) != len(self.labels):
            raise CorpusError("pairs and labels are not aligned")
        c = len(self.relation_vocab)
        if any(not 0 <= y < c for y in self.labels):
            raise CorpusError("relation id out of range")

    def __len__(self) -> int:
        return len(self.pairs)

    def subset(self, indices: Sequence[int]) -> "RelationDataset":
        return RelationDataset([self.pairs[i] for i in indices], [self.labels[i] for i in indices],
                               self.relation_vocab)


def load_relation_dataset(
    path: str | Path, token_vocab: TokenVocab, relation_vocab: LabelVocab | None = None
) -> RelationDataset:
    """Read ``s1<TAB>s2<TAB>relation``; tokens outside ``token_vocab`` map to unk."""
    rows = read_triples(path)
    pairs = _encode_pairs(rows, path, token_vocab)
    labels, relation_vocab = _label_ids(rows, path, relation_vocab, "relation")
    return RelationDataset(pairs, labels, relation_vocab)


def extract_representation(params: DmrParams, enc: EncoderParams, s1, s2) -> np.ndarray:
    return compute_hz(params, encode_pair(enc, s1, s2))


def extract_representations(params: DmrParams, enc: EncoderParams, pairs) -> np.ndarray:
    h, _, _ = encode_packed(enc, PackedPairs.from_pairs(pairs))
    return compute_hz(params, h)


@dataclass
class ProbeParams:
    w: np.ndarray  # (C, d)
    b: np.ndarray  # (C,)

    @property
    def n_classes(self) -> int:
        return self.w.shape[0]


def probe_loss_and_grad(probe: ProbeParams, x: np.ndarray, y: np.ndarray) -> tuple[float, ProbeParams]:
    """Mean softmax cross-entropy and its gradient."""
    logp = log_softmax(x @ probe.w.T + probe.b, axis=1)
    n = len(y)
    loss = -float(logp[np.arange(n), y].sum()) / n
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    return loss, ProbeParams(delta.T @ x, delta.sum(axis=0))


def train_probe(
    reps,
    labels: Sequence[int],
    lr: float = 0.1,
    epochs: int = 500,
    seed: int = 0,
    n_classes: int | None = None,
) -> ProbeParams:
    """Full-batch gradient descent from a zero initialization.

    ``seed`` is accepted for interface symmetry; zero init plus full-batch
    updates leave nothing random.
    """
    x = np.asarray(reps, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("representations and labels are not aligned")
    c = n_classes if n_classes is not None else int(y.max()) + 1
    if c < 2 or len(np.unique(y)) < 2:
        raise ValueError("probe training needs at least two classes")
    probe = ProbeParams(np.zeros((c, x.shape[1])), np.zeros(c))
    for _ in range(epochs):
        _, g = probe_loss_and_grad(probe, x, y)
        probe.w -= lr * g.w
        probe.b -= lr * g.b
    return probe


def predict_distributions(probe: ProbeParams, reps) -> np.ndarray:
    x = np.asarray(reps, dtype=np.float64)
    return np.exp(log_softmax(x @ probe.w.T + probe.b, axis=1))


@dataclass
class ProbeReport:
    accuracy: float
    macro_f1: float
    per_class_f1: list[float]
    distributions: np.ndarray

    def to_text(self) -> str:
        return f"accuracy={self.accuracy:.17g}\nmacro_f1={self.macro_f1:.17g}\n"


def classification_metrics(pred, gold, n_classes: int) -> tuple[float, float, list[float]]:
    """(accuracy, macro-F1, per-class F1); every class counts toward the mean."""
    pred, gold = np.asarray(pred), np.asarray(gold)
    accuracy = float(np.mean(pred == gold))
    f1 = []
    for c in range(n_classes):
        tp = np.sum((pred == c) & (gold == c))
        fp = np.sum((pred == c) & (gold != c))
        fn = np.sum((pred != c) & (gold == c))
        f1.append(0.0 if tp == 0 else float(2 * tp / (2 * tp + fp + fn)))
    return accuracy, float(np.mean(f1)), f1


def eval_probe(probe: ProbeParams, reps, labels: Sequence[int]) -> ProbeReport:
    dists = predict_distributions(probe, reps)
    pred = np.argmax(dists, axis=1)  # first maximum wins ties
    acc, macro, per_class = classification_metrics(pred, labels, probe.n_classes)
    return ProbeReport(acc, macro, per_class, dists)


def acc_at_k(ranked_predictions: Sequence[Sequence[int]], gold: Sequence[int], k: int) -> float:
    """Fraction of examples whose gold id is among the first ``k`` ranked ids."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ranked_predictions) != len(gold):
        raise ValueError("predictions and gold are not aligned")
    if not gold:
        raise ValueError("no examples")
    hits = sum(1 for ranked, g in zip(ranked_predictions, gold) if g in list(ranked)[:k])
    return hits / len(gold)


def _stratified_order(labels: np.ndarray, rng: np.random.Generator) -> list[int]:
    """A shuffled ordering whose every prefix is close to proportional per class.

    Each next slot goes to the class with the largest unmet share
    ``p_c * (t + 1) - taken_c`` (lowest class id on ties) among classes with
    examples left.
    """
    perm = rng.permutation(len(labels))
    classes = np.unique(labels)
    queues = {c: [int(i) for i in perm if labels[i] == c] for c in classes}
    share = {c: len(queues[c]) / len(labels) for c in classes}
    taken = {c: 0 for c in classes}
    order = []
    for t in range(len(labels)):
        live = [c for c in classes if taken[c] < len(queues[c])]
        best = max(live, key=lambda c: (share[c] * (t + 1) - taken[c], -c))
        order.append(queues[best][taken[best]])
        taken[best] += 1
    return order


def few_shot_subsets(
    dataset: RelationDataset, sizes: Sequence[int], runs: int = 3, seed: int = 0
) -> dict[tuple[int, int], list[int]]:
    """Example indices for every (size, run).

    Run ``r`` shuffles under ``seed + r``; within a run, smaller subsets are
    prefixes of larger ones.
    """
    n = len(dataset)
    for s in sizes:
        if not 1 <= s <= n:
            raise ValueError(f"subset size {s} outside [1, {n}]")
    labels = np.asarray(dataset.labels)
    out = {}
    for run in range(runs):
        order = _stratified_order(labels, np.random.default_rng(seed + run))
        for s in sizes:
            out[(s, run)] = order[:s]
    return out
