"""Bag-of-embeddings pair encoder.

Each sentence is the mean of its token embeddings; a pair becomes
``[a, b, |a - b|, a * b]``, a vector of width ``4 * d_e``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class EncoderParams:
    embeddings: np.ndarray  # (V, d_e)

    @property
    def d_e(self) -> int:
        return self.embeddings.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embeddings.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.embeddings.copy())


def init_encoder(vocab_size: int, d_e: int, rng: np.random.Generator) -> EncoderParams:
    return EncoderParams(rng.uniform(-0.1, 0.1, size=(vocab_size, d_e)))


@dataclass
class PairRepresentation:
    h: np.ndarray
    mean1: np.ndarray
    mean2: np.ndarray


def _check_ids(params: EncoderParams, ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("sentence is empty")
    if ids.min() < 0 or ids.max() >= params.vocab_size:
        raise IndexError(f"token id out of range for vocabulary of size {params.vocab_size}")
    return ids


def pair_features(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([a, b, np.abs(a - b), a * b], axis=-1)


def encode_pair(params: EncoderParams, s1: Sequence[int], s2: Sequence[int]) -> PairRepresentation:
    e = params.embeddings
    a = e[_check_ids(params, s1)].mean(axis=0)
    b = e[_check_ids(params, s2)].mean(axis=0)
    return PairRepresentation(pair_features(a, b), a, b)


def feature_backward(a: np.ndarray, b: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the two sentence means, given d(loss)/d(features)."""
    d = a.shape[-1]
    g1, g2, g3, g4 = (upstream[..., i * d:(i + 1) * d] for i in range(4))
    s = np.sign(a - b)  # sign(0) == 0 is the chosen subgradient
    return g1 + s * g3 + b * g4, g2 - s * g3 + a * g4


def encoder_backward(
    params: EncoderParams, s1: Sequence[int], s2: Sequence[int], upstream_grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sparse embedding gradient: (unique token ids, gradient rows)."""
    ids1, ids2 = _check_ids(params, s1), _check_ids(params, s2)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != (4 * params.d_e,):
        raise ValueError(f"upstream gradient must have length {4 * params.d_e}")
    e = params.embeddings
    da, db = feature_backward(e[ids1].mean(axis=0), e[ids2].mean(axis=0), upstream_grad)
    rows, inverse = np.unique(np.concatenate([ids1, ids2]), return_inverse=True)
    grads = np.zeros((rows.size, params.d_e))
    np.add.at(grads, inverse[:ids1.size], da / ids1.size)
    np.add.at(grads, inverse[ids1.size:], db / ids2.size)
    return rows, grads


@dataclass
class PackedPairs:
    """A batch of pairs flattened into token/owner/weight arrays.

    Token ``tokens1[j]`` belongs to example ``owner1[j]`` and contributes
    ``weight1[j] = 1 / len(s1)`` to that example's first sentence mean.
    """

    size: int
    tokens1: np.ndarray
    owner1: np.ndarray
    weight1: np.ndarray
    tokens2: np.ndarray
    owner2: np.ndarray
    weight2: np.ndarray

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> "PackedPairs":
        def pack(seqs):
            lengths = np.array([len(s) for s in seqs], dtype=np.int64)
            if np.any(lengths == 0):
                raise ValueError("sentence is empty")
            tokens = np.fromiter((t for s in seqs for t in s), dtype=np.int64, count=int(lengths.sum()))
            owner = np.repeat(np.arange(len(seqs)), lengths)
            return tokens, owner, np.repeat(1.0 / lengths, lengths)

        t1, o1, w1 = pack([p[0] for p in pairs])
        t2, o2, w2 = pack([p[1] for p in pairs])
        return cls(len(pairs), t1, o1, w1, t2, o2, w2)

    @classmethod
    def from_examples(cls, examples) -> "PackedPairs":
        return cls.from_pairs([(ex.s1, ex.s2) for ex in examples])


def _sentence_means(e: np.ndarray, tokens, owner, weight, size) -> np.ndarray:
    out = np.zeros((size, e.shape[1]))
    np.add.at(out, owner, e[tokens] * weight[:, None])
    return out


def encode_packed(params: EncoderParams, packed: PackedPairs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched ``encode_pair``: returns (H, means1, means2) with H of shape (B, 4 d_e)."""
    e = params.embeddings
    for tokens in (packed.tokens1, packed.tokens2):
        if tokens.size and (tokens.min() < 0 or tokens.max() >= params.vocab_size):
            raise IndexError(f"token id out of range for vocabulary of size {params.vocab_size}")
    a = _sentence_means(e, packed.tokens1, packed.owner1, packed.weight1, packed.size)
    b = _sentence_means(e, packed.tokens2, packed.owner2, packed.weight2, packed.size)
    return pair_features(a, b), a, b


def packed_backward(
    params: EncoderParams, packed: PackedPairs, a: np.ndarray, b: np.ndarray, upstream: np.ndarray
) -> np.ndarray:
    """Dense (V, d_e) embedding gradient for a batch, accumulated in token order."""
    da, db = feature_backward(a, b, upstream)
    grad = np.zeros_like(params.embeddings)
    np.add.at(grad, packed.tokens1, da[packed.owner1] * packed.weight1[:, None])
    np.add.at(grad, packed.tokens2, db[packed.owner2] * packed.weight2[:, None])
    return grad
