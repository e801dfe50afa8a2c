"""Interpretability tools for a trained bottleneck: z->marker and marker->z
rankings, latent-sense embeddings with a PCA projection, prediction entropy
and the pairwise confusion matrix over high-entropy predictions."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, LabelVocab
from .encoder import EncoderParams, PackedPairs, encode_packed
from .model import DmrParams, compute_hz, latent_distribution, rank_descending, transition_matrix


def z2m_top_markers(params: DmrParams, z: int, k: int) -> list[tuple[int, float]]:
    if not 0 <= z < params.k:
        raise IndexError(f"latent id {z} out of range")
    if not 1 <= k <= params.n_markers:
        raise ValueError(f"k must be in [1, {params.n_markers}]")
    return rank_descending(transition_matrix(params)[z], k)


def m2z_top_clusters(
    params: DmrParams, latent_prior: np.ndarray, m: int, k: int
) -> list[tuple[int, float]]:
    """Latent senses ranked by responsibility prior(z) p(m|z), normalized over z."""
    if not 0 <= m < params.n_markers:
        raise IndexError(f"marker id {m} out of range")
    if not 1 <= k <= params.k:
        raise ValueError(f"k must be in [1, {params.k}]")
    latent_prior = np.asarray(latent_prior, dtype=np.float64)
    if latent_prior.shape != (params.k,) or np.any(latent_prior < 0) or abs(latent_prior.sum() - 1) > 1e-9:
        raise ValueError("latent_prior must be a probability vector of length K")
    scores = latent_prior * transition_matrix(params)[:, m]
    total = scores.sum()
    if total <= 0:
        raise ValueError(f"marker {m} has zero responsibility under every latent sense")
    return rank_descending(scores / total, k)


def empirical_latent_prior(params: DmrParams, enc: EncoderParams, corpus: Corpus) -> np.ndarray:
    """Mean of p(z|s1,s2) over the corpus."""
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    h, _, _ = encode_packed(enc, PackedPairs.from_examples(corpus.examples))
    return latent_distribution(params, compute_hz(params, h)).mean(axis=0)


@dataclass
class LatentEmbeddingSet:
    vectors: np.ndarray      # (K, d): rows of W2
    labels: list[list[int]]  # top markers per latent sense


def latent_embeddings(params: DmrParams, top_labels: int = 3) -> LatentEmbeddingSet:
    top_labels = min(top_labels, params.n_markers)
    labels = [[m for m, _ in z2m_top_markers(params, z, top_labels)] for z in range(params.k)]
    return LatentEmbeddingSet(params.w2.copy(), labels)


def write_embeddings(emb: LatentEmbeddingSet, path: str | Path, marker_vocab: LabelVocab | None = None) -> None:
    """TSV: ``z, label1..labelL, v0..v{d-1}``; labels are marker names when a vocab is given."""
    n_labels = len(emb.labels[0]) if emb.labels else 0
    header = ["z"] + [f"label{i + 1}" for i in range(n_labels)] + [f"v{j}" for j in range(emb.vectors.shape[1])]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for z, (row, labels) in enumerate(zip(emb.vectors, emb.labels)):
            names = [marker_vocab.id_to_label[m] if marker_vocab else str(m) for m in labels]
            fh.write("\t".join([str(z)] + names + [f"{x:.17g}" for x in row]) + "\n")


def read_embeddings(path: str | Path, marker_vocab: LabelVocab | None = None) -> LatentEmbeddingSet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    n_labels = sum(1 for h in header if h.startswith("label"))
    vectors, labels = [], []
    for line in lines[1:]:
        fields = line.split("\t")
        raw = fields[1:1 + n_labels]
        labels.append([marker_vocab.label_to_id[x] if marker_vocab else int(x) for x in raw])
        vectors.append([float(x) for x in fields[1 + n_labels:]])
    return LatentEmbeddingSet(np.array(vectors, dtype=np.float64), labels)


def write_matrix(matrix: np.ndarray, path: str | Path, header: Sequence[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            fh.write("\t".join(header) + "\n")
        for row in np.atleast_2d(matrix):
            fh.write("\t".join(f"{x:.17g}" for x in row) + "\n")


def _top_eigenvector(cov: np.ndarray, iters: int, tol: float) -> tuple[np.ndarray, float]:
    v = np.random.default_rng(0).standard_normal(cov.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w /= norm
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    return v, float(v @ cov @ v)


def _orient(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    return -v if nz.size and v[nz[0]] < 0 else v


def principal_directions(
    embeddings: np.ndarray, n_components: int = 2, iters: int = 500, tol: float = 1e-10
) -> np.ndarray:
    """Top principal directions of the rows, by power iteration with deflation."""
    x = np.asarray(embeddings, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    if np.trace(cov) <= 0:
        raise ValueError("embeddings have zero variance")
    dirs = []
    for _ in range(n_components):
        v, lam = _top_eigenvector(cov, iters, tol)
        if lam <= 1e-14 * np.trace(cov):
            # remaining variance is numerically zero: any orthogonal direction projects to 0
            v = np.zeros(x.shape[1])
        dirs.append(_orient(v))
        cov = cov - lam * np.outer(v, v)
    return np.array(dirs)


def project_2d(embeddings: np.ndarray) -> np.ndarray:
    """(K, 2) coordinates of the centered rows on their first two principal directions."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two embedding rows")
    dirs = principal_directions(x, 2)
    return (x - x.mean(axis=0)) @ dirs.T


def prediction_entropy(dist) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(dist, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


@dataclass
class ConfusionMatrix:
    weights: np.ndarray      # (C, C), symmetric, zero diagonal
    example_ids: list[int]   # inputs that contributed, by decreasing entropy


def confusion_weights(
    dists: Sequence[np.ndarray],
    top_m: int = 3,
    n_top_entropy: int = 20,
    mask: Sequence[np.ndarray] | None = None,
) -> ConfusionMatrix:
    """Accumulate p(r_i) p(r_j) over class pairs among the top predictions
    of the highest-entropy distributions.

    ``mask[e][c] == False`` drops class ``c`` from example ``e``'s top set.
    """
    dists = [np.asarray(d, dtype=np.float64) for d in dists]
    if not dists:
        return ConfusionMatrix(np.zeros((0, 0)), [])
    c = dists[0].shape[0]
    if not 1 <= top_m <= c:
        raise ValueError(f"top_m must be in [1, {c}]")
    if not 0 <= n_top_entropy <= len(dists):
        raise ValueError("n_top_entropy exceeds the number of distributions")
    entropies = np.array([prediction_entropy(d) for d in dists])
    chosen = np.argsort(-entropies, kind="stable")[:n_top_entropy]
    weights = np.zeros((c, c))
    for e in chosen:
        p = dists[e]
        top = np.argsort(-p, kind="stable")[:top_m]
        if mask is not None:
            top = [t for t in top if mask[e][t]]
        for a in range(len(top)):
            for b in range(a + 1, len(top)):
                i, j = top[a], top[b]
                w = p[i] * p[j]
                weights[i, j] += w
                weights[j, i] += w
    return ConfusionMatrix(weights, [int(e) for e in chosen])
