"""Marker-annotated sentence-pair corpora: loading, vocabularies, splits and
synthetic generation with a known latent structure."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

UNK = "<unk>"


class CorpusError(ValueError):
    """Raised for malformed or inconsistent corpus data."""


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class TokenVocab:
    id_to_token: list[str]
    unk_id: int = 0
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise CorpusError("duplicate tokens in vocabulary")
        if not 0 <= self.unk_id < len(self.id_to_token):
            raise CorpusError(f"unk_id {self.unk_id} is not a valid id")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.token_to_id.get(t, self.unk_id) for t in tokens)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    @classmethod
    def build(cls, sentences: Iterator[list[str]], min_count: int = 1) -> "TokenVocab":
        """Vocabulary in first-occurrence order; rare tokens fold into ``<unk>``."""
        counts: Counter[str] = Counter()
        order: list[str] = []
        for sent in sentences:
            for tok in sent:
                if tok not in counts:
                    order.append(tok)
                counts[tok] += 1
        kept = [t for t in order if counts[t] >= min_count and t != UNK]
        return cls([UNK] + kept, unk_id=0)


@dataclass
class LabelVocab:
    """Closed label set (markers or relations) with contiguous ids."""

    id_to_label: list[str]
    label_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if not self.id_to_label:
            raise CorpusError("label vocabulary is empty")
        self.label_to_id = {m: i for i, m in enumerate(self.id_to_label)}
        if len(self.label_to_id) != len(self.id_to_label):
            raise CorpusError("duplicate labels in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_label)

    @property
    def size(self) -> int:
        return len(self.id_to_label)

    # marker-flavoured aliases
    @property
    def marker_to_id(self) -> dict[str, int]:
        return self.label_to_id

    @property
    def id_to_marker(self) -> list[str]:
        return self.id_to_label


MarkerVocab = LabelVocab


@dataclass(frozen=True)
class PairExample:
    s1: tuple[int, ...]
    s2: tuple[int, ...]
    marker: int


@dataclass
class Corpus:
    examples: list[PairExample]
    token_vocab: TokenVocab
    marker_vocab: LabelVocab

    def __post_init__(self):
        v, n = len(self.token_vocab), len(self.marker_vocab)
        for i, ex in enumerate(self.examples):
            if not ex.s1 or not ex.s2:
                raise CorpusError(f"example {i}: empty sentence")
            if not 0 <= ex.marker < n:
                raise CorpusError(f"example {i}: marker id {ex.marker} out of range")
            if max(ex.s1) >= v or max(ex.s2) >= v or min(ex.s1) < 0 or min(ex.s2) < 0:
                raise CorpusError(f"example {i}: token id out of range")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def markers(self) -> np.ndarray:
        return np.array([ex.marker for ex in self.examples], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus([self.examples[i] for i in indices], self.token_vocab, self.marker_vocab)


def read_triples(path: str | Path) -> list[tuple[int, str, str, str]]:
    """Parse a ``s1<TAB>s2<TAB>label`` file into (line number, s1, s2, label)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorpusError(f"{path}: empty file")
    rows = []
    for lineno, line in enumerate(lines, start=1):
        fields = line.split("\t")
        if len(fields) != 3:
            raise CorpusError(f"{path}: line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
        rows.append((lineno, fields[0], fields[1], fields[2].strip()))
    return rows


def _encode_pairs(rows, path, token_vocab: TokenVocab):
    pairs = []
    for lineno, s1, s2, _ in rows:
        t1, t2 = token_vocab.encode(tokenize(s1)), token_vocab.encode(tokenize(s2))
        if not t1 or not t2:
            raise CorpusError(f"{path}: line {lineno}: empty sentence")
        pairs.append((t1, t2))
    return pairs


def _label_ids(rows, path, vocab: LabelVocab | None, what: str):
    if vocab is None:
        vocab = LabelVocab(list(dict.fromkeys(r[3] for r in rows)))
    ids = []
    for lineno, _, _, label in rows:
        if label not in vocab.label_to_id:
            raise CorpusError(f"{path}: line {lineno}: unknown {what} {label!r}")
        ids.append(vocab.label_to_id[label])
    return ids, vocab


def load_corpus(
    path: str | Path,
    token_vocab: TokenVocab | None = None,
    marker_vocab: LabelVocab | None = None,
    min_token_count: int = 1,
) -> Corpus:
    rows = read_triples(path)
    if token_vocab is None:
        token_vocab = TokenVocab.build(
            (tok for r in rows for tok in (tokenize(r[1]), tokenize(r[2]))), min_token_count
        )
    pairs = _encode_pairs(rows, path, token_vocab)
    markers, marker_vocab = _label_ids(rows, path, marker_vocab, "marker")
    examples = [PairExample(s1, s2, m) for (s1, s2), m in zip(pairs, markers)]
    return Corpus(examples, token_vocab, marker_vocab)


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    tv, mv = corpus.token_vocab, corpus.marker_vocab
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in corpus.examples:
            fh.write(f"{' '.join(tv.decode(ex.s1))}\t{' '.join(tv.decode(ex.s2))}\t{mv.id_to_label[ex.marker]}\n")


def split_indices(n: int, ratios: Sequence[float], seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n == 0:
        raise CorpusError("cannot split an empty corpus")
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"ratios must be three positive fractions summing to 1, got {ratios}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = math.floor(ratios[1] * n)
    n_test = math.floor(ratios[2] * n)
    n_train = n - n_val - n_test
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def split_corpus(corpus: Corpus, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle under ``seed`` and cut into (train, validation, test).

    Validation and test get ``floor(ratio * n)`` examples; train takes the rest.
    """
    return tuple(corpus.subset(idx) for idx in split_indices(len(corpus), ratios, seed))


@dataclass
class SyntheticSpec:
    transition_true: np.ndarray      # (k_true, n_true), rows are p(m|z)
    latent_token_dists: np.ndarray   # (k_true, vocab), rows are p(token|z)
    latent_prior_weights: np.ndarray  # (k_true,)
    sentence_length_range: tuple[int, int] = (3, 8)

    def __post_init__(self):
        self.transition_true = np.asarray(self.transition_true, dtype=np.float64)
        self.latent_token_dists = np.asarray(self.latent_token_dists, dtype=np.float64)
        self.latent_prior_weights = np.asarray(self.latent_prior_weights, dtype=np.float64)
        self.sentence_length_range = tuple(int(x) for x in self.sentence_length_range)
        k = self.k_true
        if self.transition_true.ndim != 2 or self.latent_token_dists.shape[0] != k \
                or self.latent_prior_weights.shape != (k,):
            raise CorpusError("inconsistent latent counts in synthetic spec")
        for name, arr in (("transition_true", self.transition_true),
                          ("latent_token_dists", self.latent_token_dists),
                          ("latent_prior_weights", self.latent_prior_weights)):
            if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=-1) - 1.0) > 1e-12):
                raise CorpusError(f"{name} must hold probability vectors")
        lo, hi = self.sentence_length_range
        if not 1 <= lo <= hi:
            raise CorpusError(f"bad sentence_length_range {self.sentence_length_range}")

    @property
    def k_true(self) -> int:
        return self.transition_true.shape[0]

    @property
    def n_true(self) -> int:
        return self.transition_true.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.latent_token_dists.shape[1]

    def vocabs(self) -> tuple[TokenVocab, LabelVocab]:
        tokens = TokenVocab([UNK] + [f"w{j}" for j in range(self.vocab_size)], unk_id=0)
        markers = LabelVocab([f"m{j}" for j in range(self.n_true)])
        return tokens, markers


def separable_spec(
    k_true: int = 3,
    n_markers: int = 6,
    tokens_per_sense: int = 10,
    shared_tokens: int = 0,
    shared_mass: float = 0.0,
    transition_sharpness: float = 0.8,
    length_range: tuple[int, int] = (3, 8),
    seed: int = 0,
) -> SyntheticSpec:
    """A spec where each latent sense owns a disjoint block of tokens.

    ``shared_mass`` of every token distribution goes to a common pool of
    ``shared_tokens`` noise tokens. Each transition row puts
    ``transition_sharpness`` on one marker of its own and spreads the rest
    over a random Dirichlet draw.
    """
    rng = np.random.default_rng(seed)
    vocab = k_true * tokens_per_sense + shared_tokens
    dists = np.zeros((k_true, vocab))
    for z in range(k_true):
        own = rng.dirichlet(np.full(tokens_per_sense, 5.0))
        dists[z, z * tokens_per_sense:(z + 1) * tokens_per_sense] = (1.0 - shared_mass) * own
        if shared_tokens:
            dists[z, k_true * tokens_per_sense:] = shared_mass / shared_tokens
    dists /= dists.sum(axis=1, keepdims=True)
    trans = np.zeros((k_true, n_markers))
    for z in range(k_true):
        trans[z] = (1.0 - transition_sharpness) * rng.dirichlet(np.ones(n_markers))
        trans[z, z % n_markers] += transition_sharpness
    trans /= trans.sum(axis=1, keepdims=True)
    prior = np.full(k_true, 1.0 / k_true)
    return SyntheticSpec(trans, dists, prior, length_range)


def generate_synthetic(spec: SyntheticSpec, n: int, seed: int = 0) -> tuple[Corpus, list[int]]:
    """Sample ``n`` pairs: z ~ prior, tokens of both sentences ~ p(.|z), m ~ p(.|z)."""
    if n < 1:
        raise CorpusError("n must be at least 1")
    rng = np.random.default_rng(seed)
    k, v = spec.k_true, spec.vocab_size
    lo, hi = spec.sentence_length_range
    zs = rng.choice(k, size=n, p=spec.latent_prior_weights)
    lengths = rng.integers(lo, hi + 1, size=(n, 2))
    # inverse-CDF sampling keeps everything in a handful of vectorized draws
    token_cdf = np.cumsum(spec.latent_token_dists, axis=1)
    token_cdf[:, -1] = 1.0
    marker_cdf = np.cumsum(spec.transition_true, axis=1)
    marker_cdf[:, -1] = 1.0
    total = lengths.sum()
    owner_z = np.repeat(np.repeat(zs, 2), lengths.ravel())
    u_tok = rng.random(total)
    tokens = np.empty(total, dtype=np.int64)
    for z in range(k):
        sel = owner_z == z
        tokens[sel] = np.searchsorted(token_cdf[z], u_tok[sel], side="right")
    u_m = rng.random(n)
    markers = np.array([np.searchsorted(marker_cdf[z], u, side="right") for z, u in zip(zs, u_m)])
    tokens = np.minimum(tokens, v - 1) + 1  # shift past <unk>
    markers = np.minimum(markers, spec.n_true - 1)

    token_vocab, marker_vocab = spec.vocabs()
    offsets = np.concatenate([[0], np.cumsum(lengths.ravel())])
    examples = []
    for i in range(n):
        a, b, c = offsets[2 * i], offsets[2 * i + 1], offsets[2 * i + 2]
        examples.append(PairExample(tuple(tokens[a:b].tolist()), tuple(tokens[b:c].tolist()), int(markers[i])))
    return Corpus(examples, token_vocab, marker_vocab), zs.tolist()
