"""Latent-sense bottleneck between a sentence pair and its marker.

    h_z      = W1 h + b1
    p(z|s)   = softmax(W2 h_z + b2)
    p(m|z)   = softmax(phi)[z]
    p(m|s)   = sum_z p(z|s) p(m|z)

All probability arithmetic happens in log space.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp

from .corpus import Corpus
from .encoder import EncoderParams, PackedPairs, PairRepresentation, encode_packed, encode_pair


@dataclass
class DmrParams:
    w1: np.ndarray   # (d, 4 d_e)
    b1: np.ndarray   # (d,)
    w2: np.ndarray   # (K, d)
    b2: np.ndarray   # (K,)
    phi: np.ndarray  # (K, N) transition logits

    def __post_init__(self):
        d, k = self.w1.shape[0], self.w2.shape[0]
        expected = {"b1": (d,), "w2": (k, d), "b2": (k,), "phi": (k, self.phi.shape[-1])}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.phi.ndim != 2 or k < 1 or self.phi.shape[1] < 1:
            raise ValueError("phi must be a non-empty K x N matrix")

    @property
    def k(self) -> int:
        return self.w2.shape[0]

    @property
    def d(self) -> int:
        return self.w1.shape[0]

    @property
    def n_markers(self) -> int:
        return self.phi.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    def copy(self) -> "DmrParams":
        return DmrParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, f.name))) for f in fields(self))


def init_params(k: int, d: int, d_e: int, n_markers: int, rng: np.random.Generator) -> DmrParams:
    return DmrParams(
        w1=rng.uniform(-0.1, 0.1, size=(d, 4 * d_e)),
        b1=np.zeros(d),
        w2=rng.uniform(-0.1, 0.1, size=(k, d)),
        b2=np.zeros(k),
        phi=np.zeros((k, n_markers)),
    )


def _as_h(h) -> np.ndarray:
    return h.h if isinstance(h, PairRepresentation) else np.asarray(h, dtype=np.float64)


def compute_hz(params: DmrParams, h) -> np.ndarray:
    """Bottleneck projection; accepts one representation or a (B, 4 d_e) batch."""
    h = _as_h(h)
    if h.shape[-1] != params.input_dim:
        raise ValueError(f"representation has width {h.shape[-1]}, W1 expects {params.input_dim}")
    return h @ params.w1.T + params.b1


def latent_log_distribution(params: DmrParams, hz: np.ndarray) -> np.ndarray:
    return log_softmax(hz @ params.w2.T + params.b2, axis=-1)


def latent_distribution(params: DmrParams, hz: np.ndarray) -> np.ndarray:
    return np.exp(latent_log_distribution(params, hz))


def log_transition_matrix(params: DmrParams) -> np.ndarray:
    return log_softmax(params.phi, axis=1)


def transition_matrix(params: DmrParams) -> np.ndarray:
    """Row-stochastic (K, N) matrix of p(m|z)."""
    return np.exp(log_transition_matrix(params))


def log_marginal_marker(params: DmrParams, h) -> np.ndarray:
    log_pz = latent_log_distribution(params, compute_hz(params, h))
    log_pm_z = log_transition_matrix(params)
    return logsumexp(log_pz[..., :, None] + log_pm_z, axis=-2)


def marginal_marker(params: DmrParams, h) -> np.ndarray:
    return np.exp(log_marginal_marker(params, h))


def log_posterior_from(log_pz: np.ndarray, log_pm_z: np.ndarray, markers) -> np.ndarray:
    """log q(z) for batched log p(z|s) (B, K) and observed markers (B,)."""
    joint = log_pz + log_pm_z[:, markers].T
    norm = logsumexp(joint, axis=-1, keepdims=True)
    if np.any(np.isneginf(norm)):
        raise ValueError("observed marker has zero probability under the current parameters")
    return joint - norm


def posterior(params: DmrParams, h, m: int) -> np.ndarray:
    """q(z) = p(z|s1,s2) p(m|z) / p(m|s1,s2)."""
    if not 0 <= m < params.n_markers:
        raise IndexError(f"marker id {m} out of range")
    log_pz = latent_log_distribution(params, compute_hz(params, h))
    return np.exp(log_posterior_from(log_pz[None, :], log_transition_matrix(params), [m])[0])


def packed_log_marginal(params: DmrParams, enc: EncoderParams, packed: PackedPairs) -> np.ndarray:
    h, _, _ = encode_packed(enc, packed)
    return log_marginal_marker(params, h)


def example_log_likelihoods(params: DmrParams, enc: EncoderParams, examples) -> np.ndarray:
    packed = PackedPairs.from_examples(examples)
    log_pm = packed_log_marginal(params, enc, packed)
    markers = np.array([ex.marker for ex in examples])
    ll = log_pm[np.arange(len(examples)), markers]
    if np.any(np.isneginf(ll)):
        raise ValueError("an observed marker has zero probability")
    return ll


def corpus_log_likelihood(params: DmrParams, enc: EncoderParams, corpus: Corpus) -> float:
    """Mean log p(m|s1,s2) over the corpus, in nats per example."""
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    return float(np.mean(example_log_likelihoods(params, enc, corpus.examples)))


def rank_descending(p: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Top-k (id, prob) pairs; equal probabilities keep ascending id order."""
    order = np.argsort(-p, kind="stable")[:k]
    return [(int(i), float(p[i])) for i in order]


def predict_topk_markers(
    params: DmrParams, enc: EncoderParams, s1: Sequence[int], s2: Sequence[int], k: int
) -> list[tuple[int, float]]:
    if not 1 <= k <= params.n_markers:
        raise ValueError(f"k must be in [1, {params.n_markers}], got {k}")
    return rank_descending(marginal_marker(params, encode_pair(enc, s1, s2)), k)
