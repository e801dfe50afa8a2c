"""The latent-sense embedding space and relation confusion.

Rows of w2 embed the senses. We export them with their top markers,
project them to 2-D, and build an entanglement matrix from the most
uncertain probe predictions.
"""
# %%
import tempfile
from pathlib import Path

import numpy as np

from dmr.analysis import confusion_weights, latent_embeddings, project_2d, write_embeddings
from dmr.corpus import generate_synthetic, separable_spec
from dmr.em import TrainConfig, train
from dmr.probe import extract_representations, predict_distributions, train_probe

spec = separable_spec(k_true=3, n_markers=8, seed=2)
corpus, _ = generate_synthetic(spec, 20000, seed=0)
params, enc, _ = train(TrainConfig(k=6, d=16, d_e=16, lr_psi=1.0, lr_phi=1.0, em_batch_size=500,
                                   minibatch_size=50, epochs=3), corpus)

# %% Export and project
emb = latent_embeddings(params, top_labels=3)
out = Path(tempfile.mkdtemp()) / "senses.tsv"
write_embeddings(emb, out, corpus.marker_vocab)
print(out.read_text().splitlines()[0][:60], "...")
for z, (x, y) in enumerate(project_2d(emb.vectors)):
    labels = [corpus.marker_vocab.id_to_label[m] for m in emb.labels[z]]
    print(f"z{z}: ({x:+.3f}, {y:+.3f})  {labels}")

# %% Confusion over the 20 least certain probe predictions
rel, senses = generate_synthetic(spec, 1000, seed=50)
reps = extract_representations(params, enc, [(ex.s1, ex.s2) for ex in rel.examples])
probe = train_probe(reps[:200], senses[:200], n_classes=3)
dists = list(predict_distributions(probe, reps[200:]))
cm = confusion_weights(dists, top_m=3, n_top_entropy=20)
np.set_printoptions(precision=4, suppress=True)
print(cm.weights)

# A two-way coin flip contributes exactly one product
print(confusion_weights([np.array([0.5, 0.5])], top_m=2, n_top_entropy=1).weights)
