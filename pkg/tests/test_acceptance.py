"""End-to-end acceptance checks.

Each test prints one ``[PASS]``/``[FAIL]`` line naming its criterion and the
measured quantity, then asserts. The lines are repeated in the session
summary; ``pytest -s`` also shows them inline.
"""

import io
import math
import time

import numpy as np
import pytest

from dmr.analysis import confusion_weights, z2m_top_markers
from dmr.checkpoint import Checkpoint, history_digest, load_checkpoint, save_checkpoint, save_spec
from dmr.cli import run_command
from dmr.corpus import generate_synthetic, separable_spec
from dmr.em import TrainConfig, e_step, phi_loss_and_grad, psi_loss_and_grads, train
from dmr.encoder import PackedPairs, encode_pair, encoder_backward
from dmr.gradcheck import numerical_gradient, relative_error
from dmr.model import (
    compute_hz,
    latent_distribution,
    latent_log_distribution,
    marginal_marker,
    posterior,
    predict_topk_markers,
    transition_matrix,
)
from dmr.probe import ProbeParams, eval_probe, extract_representations, probe_loss_and_grad, train_probe

from conftest import ACCEPTANCE_LINES, random_encoder, random_examples, random_params

SEEDS = (0, 1, 2)
RECOVERY_CONFIG = dict(k=3, d=16, d_e=16, lr_psi=1.0, lr_phi=0.01, em_batch_size=500,
                       minibatch_size=50, epochs=3, phi_update_mode="closed_form")


def report(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def greedy_match(learned, true):
    """Pair learned rows with true rows by repeatedly taking the smallest TV."""
    tv = 0.5 * np.abs(learned[:, None, :] - true[None, :, :]).sum(axis=2)
    mapping, used_l, used_t = {}, set(), set()
    for flat in np.argsort(tv, axis=None, kind="stable"):
        i, j = divmod(int(flat), tv.shape[1])
        if i not in used_l and j not in used_t:
            mapping[j] = i
            used_l.add(i)
            used_t.add(j)
    return mapping, tv


@pytest.fixture(scope="module")
def recovered():
    """One trained K=3 model per seed on the separable synthetic task."""
    spec = separable_spec(k_true=3, n_markers=6, seed=0)
    runs = []
    start = time.perf_counter()
    for seed in SEEDS:
        corpus, _ = generate_synthetic(spec, 20000, seed=seed)
        params, enc, history = train(TrainConfig(seed=seed, **RECOVERY_CONFIG), corpus)
        runs.append((params, enc, history, corpus))
    return spec, runs, time.perf_counter() - start


def test_mixture_oracle_equivalence():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        k, n = (int(x) for x in rng.integers(1, 9, size=2))
        p = random_params(rng, k, n, scale=float(rng.uniform(0.1, 5.0)))
        h = rng.normal(size=p.input_dim)
        hz = p.w1 @ h + p.b1
        logits = p.w2 @ hz + p.b2
        pz = [math.exp(v - max(logits)) for v in logits]
        pz = [v / sum(pz) for v in pz]
        rows = []
        for z in range(k):
            e = [math.exp(v - max(p.phi[z])) for v in p.phi[z]]
            rows.append([v / sum(e) for v in e])
        explicit = [sum(pz[z] * rows[z][m] for z in range(k)) for m in range(n)]
        worst = max(worst, float(np.max(np.abs(marginal_marker(p, h) - explicit))))
    elapsed = time.perf_counter() - start
    ok = report(1, worst <= 1e-12 and elapsed < 5, f"max |diff| {worst:.2e} (<= 1e-12), {elapsed:.2f}s (< 5s)")
    assert ok


def test_bayes_consistency():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        k, n = (int(x) for x in rng.integers(1, 9, size=2))
        p = random_params(rng, k, n, scale=float(rng.uniform(0.1, 5.0)))
        h = rng.normal(size=p.input_dim)
        m = int(rng.integers(n))
        lhs = posterior(p, h, m) * marginal_marker(p, h)[m]
        rhs = latent_distribution(p, compute_hz(p, h)) * transition_matrix(p)[:, m]
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    elapsed = time.perf_counter() - start
    ok = report(2, worst <= 1e-10 and elapsed < 5, f"max |diff| {worst:.2e} (<= 1e-10), {elapsed:.2f}s (< 5s)")
    assert ok


def _kink_free(enc, pairs, margin=1e-3):
    return all(np.all(np.abs(r.mean1 - r.mean2) > margin) for r in (encode_pair(enc, a, b) for a, b in pairs))


def _check_config(rng):
    """Finite-difference errors for every trainable block on one random config."""
    k, n, d, d_e = (int(x) for x in rng.integers(1, 6, size=4))
    vocab = int(rng.integers(3, 10))
    p = random_params(rng, k, n, d=d, d_e=d_e, scale=0.7)
    enc = random_encoder(rng, vocab, d_e)
    batch = random_examples(rng, int(rng.integers(1, 6)), vocab, n)
    if not _kink_free(enc, [(ex.s1, ex.s2) for ex in batch]):
        return None
    errs = {}

    ex = batch[0]
    upstream = rng.normal(size=4 * d_e)
    rows, grads = encoder_backward(enc, ex.s1, ex.s2, upstream)
    dense = np.zeros_like(enc.embeddings)
    dense[rows] = grads
    errs["encoder"] = relative_error(dense, numerical_gradient(
        lambda: float(encode_pair(enc, ex.s1, ex.s2).h @ upstream), enc.embeddings))

    q = e_step(p, enc, batch)
    packed = PackedPairs.from_examples(batch)
    markers = np.array([e.marker for e in batch])
    _, g = psi_loss_and_grads(p, enc, packed, markers, q)
    f = lambda: psi_loss_and_grads(p, enc, packed, markers, q)[0]
    errs["psi"] = max(relative_error(getattr(g, name), numerical_gradient(f, getattr(p, name)))
                      for name in ("w1", "b1", "w2", "b2"))
    errs["psi/embeddings"] = relative_error(g.embeddings, numerical_gradient(f, enc.embeddings))

    log_pz = np.stack([latent_log_distribution(p, compute_hz(p, encode_pair(enc, e.s1, e.s2).h))
                       for e in batch])
    phi = p.phi.copy()
    _, g_phi = phi_loss_and_grad(phi, log_pz, markers)
    errs["phi"] = relative_error(g_phi, numerical_gradient(lambda: phi_loss_and_grad(phi, log_pz, markers)[0], phi))

    c = int(rng.integers(2, 5))
    probe = ProbeParams(rng.normal(size=(c, d)), rng.normal(size=c))
    x, y = rng.normal(size=(6, d)), rng.integers(0, c, 6)
    _, gp = probe_loss_and_grad(probe, x, y)
    fp = lambda: probe_loss_and_grad(probe, x, y)[0]
    errs["probe"] = max(relative_error(gp.w, numerical_gradient(fp, probe.w)),
                        relative_error(gp.b, numerical_gradient(fp, probe.b)))
    return errs


def test_gradient_suite():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst = {}
    checked = 0
    while checked < 60:
        errs = _check_config(rng)
        if errs is None:
            continue
        for name, e in errs.items():
            worst[name] = max(worst.get(name, 0.0), e)
        checked += 1
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    ok = report(3, top <= 1e-4 and elapsed < 60, f"{checked} configs, worst rel err {detail} (<= 1e-4), {elapsed:.1f}s")
    assert ok


def test_em_monotonicity():
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    spec = separable_spec(k_true=3, n_markers=5, tokens_per_sense=4, shared_tokens=3, shared_mass=0.3, seed=4)
    corpus, _ = generate_synthetic(spec, 200, seed=int(rng.integers(1000)))
    cfg = TrainConfig(k=4, d=6, d_e=4, lr_psi=0.0, em_batch_size=200, minibatch_size=50, epochs=30,
                      phi_update_mode="closed_form", phi_smoothing=0.0, seed=4)
    _, _, history = train(cfg, corpus)
    nll = [history.records[0].nll_before] + [r.nll_after for r in history.records]
    rises = [b - a for a, b in zip(nll, nll[1:])]
    elapsed = time.perf_counter() - start
    ok = len(history.records) == 30 and max(rises) <= 1e-10 and elapsed < 30
    ok = report(4, ok, f"30 iterations, NLL {nll[0]:.4f} -> {nll[-1]:.4f}, largest rise {max(rises):.2e} "
                       f"(<= 1e-10), {elapsed:.1f}s")
    assert ok


def test_latent_recovery(recovered):
    spec, runs, elapsed = recovered
    passed = 0
    details = []
    for seed, (params, _, _, _) in zip(SEEDS, runs):
        mapping, tv = greedy_match(transition_matrix(params), spec.transition_true)
        worst = max(tv[mapping[j], j] for j in range(3))
        passed += worst <= 0.15
        details.append(f"seed {seed} max row TV {worst:.3f}")
    ok = report(5, passed >= 2 and elapsed < 600,
                f"{'; '.join(details)} (<= 0.15 on >= 2 of 3), {elapsed:.1f}s")
    assert ok


def _probe_f1(spec, k, seed):
    corpus, _ = generate_synthetic(spec, 20000, seed=seed)
    cfg = TrainConfig(k=k, d=16, d_e=16, lr_psi=1.0, lr_phi=1.0, em_batch_size=500, minibatch_size=50,
                      epochs=3, seed=seed)
    params, enc, _ = train(cfg, corpus)
    rel, z = generate_synthetic(spec, 2000, seed=100 + seed)
    reps = extract_representations(params, enc, [(ex.s1, ex.s2) for ex in rel.examples])
    probe = train_probe(reps[:1000], z[:1000], n_classes=3)
    return eval_probe(probe, reps[1000:], z[1000:]).macro_f1


def test_bottleneck_effect():
    spec = separable_spec(k_true=3, n_markers=6, seed=0)
    start = time.perf_counter()
    gaps = []
    for seed in SEEDS:
        full, degenerate = _probe_f1(spec, 3, seed), _probe_f1(spec, 1, seed)
        gaps.append((full, degenerate))
    elapsed = time.perf_counter() - start
    ok = all(f - g >= 0.2 for f, g in gaps) and elapsed < 600
    detail = "; ".join(f"seed {s} K=3 {f:.3f} K=1 {g:.3f}" for s, (f, g) in zip(SEEDS, gaps))
    ok = report(6, ok, f"{detail} (gap >= 0.2 on every seed), {elapsed:.1f}s")
    assert ok


def _run(*argv):
    out, err = io.StringIO(), io.StringIO()
    return run_command([str(a) for a in argv], out, err), out.getvalue(), err.getvalue()


def test_acc_at_k_monotone(recovered, tmp_path):
    spec, runs, _ = recovered
    params, enc, history, corpus = runs[0]
    ckpt = Checkpoint(TrainConfig(seed=0, **RECOVERY_CONFIG), corpus.token_vocab, corpus.marker_vocab, enc,
                      params, history_digest(history))
    save_checkpoint(tmp_path / "m.ckpt", ckpt)
    save_spec(tmp_path / "spec.json", spec)
    start = time.perf_counter()
    assert _run("synth", "--spec", tmp_path / "spec.json", "--n", 2000, "--seed", 7,
                "--out", tmp_path / "eval.tsv")[0] == 0
    code, out, _ = _run("eval-markers", "--checkpoint", tmp_path / "m.ckpt", "--corpus", tmp_path / "eval.tsv")
    elapsed = time.perf_counter() - start
    vals = dict(line.split("=") for line in out.splitlines())
    accs = [float(vals[f"acc@{k}"]) for k in (1, 3, 5, 10)]
    ok = code == 0 and accs[0] <= accs[1] <= accs[2] <= accs[3] <= 1.0 and elapsed < 10
    ok = report(7, ok, "ACC@1/3/5/10 = " + " <= ".join(f"{a:.4f}" for a in accs) + f" <= 1, {elapsed:.2f}s")
    assert ok


def test_determinism_and_persistence(tmp_path):
    start = time.perf_counter()
    save_spec(tmp_path / "spec.json", separable_spec(seed=0))
    assert _run("synth", "--spec", tmp_path / "spec.json", "--n", 2000, "--seed", 5,
                "--out", tmp_path / "train.tsv")[0] == 0
    args = ["train", "--corpus", tmp_path / "train.tsv", "--k", 3, "--d", 8, "--d-e", 8, "--lr-psi", 1.0,
            "--lr-phi", 1.0, "--em-batch", 200, "--minibatch", 25, "--epochs", 2, "--seed", 9]
    codes = [_run(*args, "--out", tmp_path / f"{tag}.ckpt", "--history", tmp_path / f"{tag}.hist")[0]
             for tag in ("a", "b")]
    same = all((tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()
               for ext in (".ckpt", ".hist"))

    ckpt = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "c.ckpt", ckpt)
    again = load_checkpoint(tmp_path / "c.ckpt")
    rng = np.random.default_rng(8)
    v = len(ckpt.token_vocab)
    exact = 0
    for _ in range(20):
        s1 = rng.integers(0, v, rng.integers(1, 9)).tolist()
        s2 = rng.integers(0, v, rng.integers(1, 9)).tolist()
        h1, h2 = encode_pair(ckpt.encoder, s1, s2).h, encode_pair(again.encoder, s1, s2).h
        exact += (marginal_marker(ckpt.params, h1).tobytes() == marginal_marker(again.params, h2).tobytes()
                  and predict_topk_markers(ckpt.params, ckpt.encoder, s1, s2, 6)
                  == predict_topk_markers(again.params, again.encoder, s1, s2, 6))
    elapsed = time.perf_counter() - start
    ok = codes == [0, 0] and same and exact == 20 and elapsed < 120
    ok = report(8, ok, f"repeated train byte-identical: {same}; {exact}/20 round-trip predictions bit-exact, "
                       f"{elapsed:.1f}s")
    assert ok


def test_analysis_pipeline(recovered):
    spec, runs, _ = recovered
    start = time.perf_counter()
    true_top = np.argmax(spec.transition_true, axis=1)
    details = []
    all_ok = True
    for seed, (params, _, _, _) in zip(SEEDS, runs):
        mapping, _ = greedy_match(transition_matrix(params), spec.transition_true)
        hits = sum(z2m_top_markers(params, mapping[j], 1)[0][0] == true_top[j] for j in range(3))
        all_ok &= hits >= 2
        details.append(f"seed {seed} {hits}/3")
    cm = confusion_weights([np.array([0.5, 0.5])], top_m=2, n_top_entropy=1)
    hand = np.array_equal(cm.weights, [[0.0, 0.25], [0.25, 0.0]])
    elapsed = time.perf_counter() - start
    ok = report(9, all_ok and hand and elapsed < 60,
                f"z2m top-1 matches true argmax: {', '.join(details)} (>= 2 of 3); "
                f"confusion on (0.5, 0.5) exact: {hand}, {elapsed:.2f}s")
    assert ok
