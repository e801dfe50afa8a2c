"""Mini-batch EM training.

Each EM iteration freezes posteriors q(z|s1,s2,m) for a batch, sweeps the
batch once updating the encoder and latent head against the frozen
transition logits, then updates the transition logits against the new
latent head, either by gradient descent on the marginal NLL or by the exact
closed-form maximizer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp

from .corpus import Corpus, PairExample
from .encoder import EncoderParams, PackedPairs, encode_packed, init_encoder, packed_backward
from .model import (
    DmrParams,
    example_log_likelihoods,
    init_params,
    latent_log_distribution,
    log_posterior_from,
    log_transition_matrix,
)

log = logging.getLogger(__name__)

PHI_MODES = ("gradient", "closed_form")
# log of the smallest positive double; keeps closed-form phi finite when a count is zero
LOG_FLOOR = float(np.log(np.finfo(np.float64).tiny))


class TrainingError(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        if iteration is not None:
            message = f"EM iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration


@dataclass
class TrainConfig:
    k: int = 30
    d: int = 32
    d_e: int = 32
    lr_psi: float = 3e-5
    lr_phi: float = 1e-2
    em_batch_size: int = 500
    minibatch_size: int = 50
    epochs: int = 3
    seed: int = 0
    phi_update_mode: str = "gradient"
    phi_smoothing: float = 1e-3
    heldout_every: int = 1
    patience: int = 3
    min_delta: float = 1e-4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("k", "d", "d_e", "em_batch_size", "minibatch_size", "heldout_every", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_psi < 0 or self.lr_phi < 0:
            raise ValueError("learning rates must be non-negative")
        if self.minibatch_size > self.em_batch_size:
            raise ValueError("minibatch_size must not exceed em_batch_size")
        if self.phi_update_mode not in PHI_MODES:
            raise ValueError(f"phi_update_mode must be one of {PHI_MODES}")
        if self.phi_smoothing < 0:
            raise ValueError("phi_smoothing must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IterationRecord:
    iteration: int
    epoch: int
    batch_size: int
    nll_before: float
    nll_after: float
    psi_loss: float
    phi_loss: float
    heldout_nll: float | None = None


@dataclass
class TrainHistory:
    records: list[IterationRecord] = field(default_factory=list)
    initial_heldout_nll: float | None = None
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.records)

    def heldout_curve(self) -> list[float]:
        return [r.heldout_nll for r in self.records if r.heldout_nll is not None]

    def to_text(self) -> str:
        """One ``key=value`` line per EM iteration; floats carry 17 significant digits."""
        lines = []
        for r in self.records:
            parts = []
            for key, value in asdict(r).items():
                if value is None:
                    continue
                parts.append(f"{key}={value:.17g}" if isinstance(value, float) else f"{key}={value}")
            lines.append(" ".join(parts))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_text(cls, text: str) -> "TrainHistory":
        records = []
        for line in text.splitlines():
            if not line.strip():
                continue
            kv = dict(item.split("=", 1) for item in line.split())
            records.append(IterationRecord(
                iteration=int(kv["iteration"]),
                epoch=int(kv["epoch"]),
                batch_size=int(kv["batch_size"]),
                nll_before=float(kv["nll_before"]),
                nll_after=float(kv["nll_after"]),
                psi_loss=float(kv["psi_loss"]),
                phi_loss=float(kv["phi_loss"]),
                heldout_nll=float(kv["heldout_nll"]) if "heldout_nll" in kv else None,
            ))
        return cls(records)


def _markers(batch: Sequence[PairExample]) -> np.ndarray:
    return np.array([ex.marker for ex in batch], dtype=np.int64)


def _latent_logs(params: DmrParams, enc: EncoderParams, packed: PackedPairs) -> np.ndarray:
    h, _, _ = encode_packed(enc, packed)
    return latent_log_distribution(params, h @ params.w1.T + params.b1)


def e_step(params: DmrParams, enc: EncoderParams, batch: Sequence[PairExample]) -> np.ndarray:
    """Posteriors q(z|s1,s2,m) for every example, shape (B, K)."""
    if not batch:
        raise ValueError("batch is empty")
    log_pz = _latent_logs(params, enc, PackedPairs.from_examples(batch))
    return np.exp(log_posterior_from(log_pz, log_transition_matrix(params), _markers(batch)))


@dataclass
class PsiGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    embeddings: np.ndarray


def psi_loss_and_grads(
    params: DmrParams,
    enc: EncoderParams,
    packed: PackedPairs,
    markers: np.ndarray,
    posteriors: np.ndarray,
) -> tuple[float, PsiGrads]:
    """Expected complete-data NLL under frozen posteriors, and its gradient in psi.

    loss = -mean_i sum_z q_i(z) [log p(z|s_i) + log p(m_i|z)]

    This differs from KL(q || p(m, z|s)) only by the entropy of q, so the
    gradients coincide.
    """
    h, a, b = encode_packed(enc, packed)
    hz = h @ params.w1.T + params.b1
    log_pz = log_softmax(hz @ params.w2.T + params.b2, axis=1)
    log_pm_z = log_transition_matrix(params)[:, markers].T
    n = packed.size
    loss = -float(np.sum(posteriors * (log_pz + log_pm_z))) / n

    dlogits = (np.exp(log_pz) * posteriors.sum(axis=1, keepdims=True) - posteriors) / n
    dhz = dlogits @ params.w2
    dh = dhz @ params.w1
    grads = PsiGrads(
        w1=dhz.T @ h,
        b1=dhz.sum(axis=0),
        w2=dlogits.T @ hz,
        b2=dlogits.sum(axis=0),
        embeddings=packed_backward(enc, packed, a, b, dh),
    )
    return loss, grads


def _minibatches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def psi_step(
    params: DmrParams,
    enc: EncoderParams,
    batch: Sequence[PairExample],
    posteriors: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    iteration: int | None = None,
) -> tuple[DmrParams, EncoderParams, float]:
    """One shuffled mini-batch sweep of gradient descent on the psi loss.

    Returns new parameter objects; ``phi`` is carried over untouched. The
    loss is the size-weighted mean of the mini-batch losses seen during the
    sweep.
    """
    if len(posteriors) != len(batch):
        raise ValueError("posteriors are not aligned with the batch")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    params, enc = params.copy(), enc.copy()
    markers = _markers(batch)
    total = 0.0
    for idx in _minibatches(len(batch), config.minibatch_size, rng):
        packed = PackedPairs.from_examples([batch[i] for i in idx])
        loss, g = psi_loss_and_grads(params, enc, packed, markers[idx], posteriors[idx])
        if not math.isfinite(loss):
            raise TrainingError("non-finite psi loss", iteration)
        lr = config.lr_psi
        params.w1 -= lr * g.w1
        params.b1 -= lr * g.b1
        params.w2 -= lr * g.w2
        params.b2 -= lr * g.b2
        enc.embeddings -= lr * g.embeddings
        total += loss * len(idx)
    return params, enc, total / len(batch)


def phi_loss_and_grad(phi: np.ndarray, log_pz: np.ndarray, markers: np.ndarray) -> tuple[float, np.ndarray]:
    """Marginal NLL -mean log sum_z p(z|s) p(m|z) and its gradient in phi."""
    log_pm_z = log_softmax(phi, axis=1)
    joint = log_pz + log_pm_z[:, markers].T
    norm = logsumexp(joint, axis=1, keepdims=True)
    n = len(markers)
    loss = -float(np.sum(norm)) / n
    resp = np.exp(joint - norm)  # (B, K)
    observed = np.zeros_like(phi)
    np.add.at(observed.T, markers, resp)
    grad = (resp.sum(axis=0)[:, None] * np.exp(log_pm_z) - observed) / n
    return loss, grad


def phi_step_gradient(
    params: DmrParams,
    enc: EncoderParams,
    batch: Sequence[PairExample],
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    iteration: int | None = None,
) -> tuple[np.ndarray, float]:
    """Mini-batch gradient descent on the marginal NLL w.r.t. phi only."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    log_pz = _latent_logs(params, enc, PackedPairs.from_examples(batch))
    markers = _markers(batch)
    phi = params.phi.copy()
    total = 0.0
    for idx in _minibatches(len(batch), config.minibatch_size, rng):
        loss, grad = phi_loss_and_grad(phi, log_pz[idx], markers[idx])
        if not math.isfinite(loss):
            raise TrainingError("non-finite phi loss", iteration)
        phi -= config.lr_phi * grad
        total += loss * len(idx)
    return phi, total / len(batch)


def phi_step_closed_form(
    batch: Sequence[PairExample], posteriors: np.ndarray, phi: np.ndarray, smoothing: float
) -> np.ndarray:
    """Exact maximizer of sum_i sum_z q_i(z) log p(m_i|z) over the rows of p(m|z).

    p(m|z) is proportional to ``smoothing + sum_{i: m_i = m} q_i(z)``; the
    returned logits are the logs of those rows (zero entries clamp to the log
    of the smallest positive double).
    """
    if len(posteriors) != len(batch):
        raise ValueError("posteriors are not aligned with the batch")
    counts = np.full(phi.shape, float(smoothing))
    np.add.at(counts.T, _markers(batch), posteriors)
    mass = counts.sum(axis=1, keepdims=True)
    if np.any(mass <= 0):
        empty = np.flatnonzero(mass[:, 0] <= 0).tolist()
        raise ValueError(f"latent senses {empty} have zero mass and no smoothing")
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(counts / mass), LOG_FLOOR)


def initialize(config: TrainConfig, vocab_size: int, n_markers: int) -> tuple[DmrParams, EncoderParams]:
    rng = np.random.default_rng(config.seed)
    enc = init_encoder(vocab_size, config.d_e, rng)
    params = init_params(config.k, config.d, config.d_e, n_markers, rng)
    return params, enc


def _mean_nll(params, enc, examples) -> float:
    return -float(np.mean(example_log_likelihoods(params, enc, examples)))


def train(
    config: TrainConfig,
    corpus: Corpus,
    heldout: Corpus | None = None,
    callback: Callable[[IterationRecord], None] | None = None,
) -> tuple[DmrParams, EncoderParams, TrainHistory]:
    """Run EM for ``config.epochs`` passes over shuffled EM batches.

    Stops early once the held-out NLL has failed to improve by
    ``config.min_delta`` for ``config.patience`` consecutive evaluations.
    """
    config.validate()
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    n_markers = len(corpus.marker_vocab)
    params, enc = initialize(config, len(corpus.token_vocab), n_markers)
    rng = np.random.default_rng([config.seed, 1])
    history = TrainHistory()
    if heldout is not None and len(heldout):
        history.initial_heldout_nll = _mean_nll(params, enc, heldout.examples)
    best = history.initial_heldout_nll if history.initial_heldout_nll is not None else math.inf
    stale = 0
    iteration = 0
    examples = corpus.examples

    for epoch in range(config.epochs):
        perm = rng.permutation(len(examples))
        for start in range(0, len(examples), config.em_batch_size):
            batch = [examples[i] for i in perm[start:start + config.em_batch_size]]
            try:
                nll_before = _mean_nll(params, enc, batch)
                posteriors = e_step(params, enc, batch)
            except ValueError as exc:
                raise TrainingError(str(exc), iteration) from exc
            if not math.isfinite(nll_before):
                raise TrainingError("non-finite NLL", iteration)

            params_new, enc, psi_loss = psi_step(params, enc, batch, posteriors, config, rng, iteration)
            if config.phi_update_mode == "gradient":
                phi, phi_loss = phi_step_gradient(params_new, enc, batch, config, rng, iteration)
            else:
                phi = phi_step_closed_form(batch, posteriors, params.phi, config.phi_smoothing)
                phi_loss = math.nan
            params_new.phi = phi
            params = params_new
            nll_after = _mean_nll(params, enc, batch)
            if config.phi_update_mode == "closed_form":
                phi_loss = nll_after
            if not (math.isfinite(nll_after) and params.all_finite()):
                raise TrainingError("parameters or NLL became non-finite", iteration)

            record = IterationRecord(iteration, epoch, len(batch), nll_before, nll_after, psi_loss, phi_loss)
            stop = False
            if heldout is not None and len(heldout) and (iteration + 1) % config.heldout_every == 0:
                record.heldout_nll = _mean_nll(params, enc, heldout.examples)
                if record.heldout_nll < best - config.min_delta:
                    best, stale = record.heldout_nll, 0
                else:
                    stale += 1
                    stop = stale >= config.patience
            history.records.append(record)
            log.debug("iter %d epoch %d nll %.5f -> %.5f", iteration, epoch, nll_before, nll_after)
            if callback is not None:
                callback(record)
            iteration += 1
            if stop:
                history.stopped_early = True
                return params, enc, history
    return params, enc, history
