"""Probing h_z for relations, with and without the bottleneck.

Relation labels here are the hidden senses themselves. A linear probe on
the projection h_z separates them once EM has shaped it; with a single
latent sense nothing pushes h_z to carry the distinction.
"""
# %%
from dmr.corpus import generate_synthetic, separable_spec
from dmr.em import TrainConfig, train
from dmr.probe import RelationDataset, eval_probe, extract_representations, few_shot_subsets, train_probe
from dmr.corpus import LabelVocab

spec = separable_spec(k_true=3, n_markers=6, seed=0)
corpus, _ = generate_synthetic(spec, 20000, seed=0)
rel, senses = generate_synthetic(spec, 2000, seed=100)
pairs = [(ex.s1, ex.s2) for ex in rel.examples]
dataset = RelationDataset(pairs, list(senses), LabelVocab(["r0", "r1", "r2"]))


def probe_scores(k):
    config = TrainConfig(k=k, d=16, d_e=16, lr_psi=1.0, lr_phi=1.0, em_batch_size=500, minibatch_size=50,
                         epochs=3)
    params, enc, _ = train(config, corpus)
    reps = extract_representations(params, enc, pairs)
    probe = train_probe(reps[:1000], senses[:1000], n_classes=3)
    return reps, eval_probe(probe, reps[1000:], senses[1000:])


# %% Full probe: K=3 against the degenerate K=1
reps, full = probe_scores(3)
_, flat = probe_scores(1)
print(f"K=3: accuracy {full.accuracy:.3f}, macro-F1 {full.macro_f1:.3f}")
print(f"K=1: accuracy {flat.accuracy:.3f}, macro-F1 {flat.macro_f1:.3f}")

# %% Few-shot curve on the K=3 representations; subsets are nested per run
train_part = dataset.subset(range(1000))
subsets = few_shot_subsets(train_part, [15, 60, 240], runs=3, seed=0)
for size in (15, 60, 240):
    scores = []
    for run in range(3):
        idx = subsets[(size, run)]
        probe = train_probe(reps[idx], [senses[i] for i in idx], n_classes=3)
        scores.append(eval_probe(probe, reps[1000:], senses[1000:]).macro_f1)
    print(f"{size:>4} examples: macro-F1 per run", [round(s, 3) for s in scores])
