"""Recovering the hidden senses.

The synthetic generator has a true sense-to-marker table. After training,
the learned rows should match it up to a relabelling of the senses; the
z2m and m2z views read the same table from either side.
"""
# %%
import numpy as np

from dmr.analysis import empirical_latent_prior, m2z_top_clusters, z2m_top_markers
from dmr.corpus import generate_synthetic, separable_spec
from dmr.em import TrainConfig, train
from dmr.model import transition_matrix

np.set_printoptions(precision=3, suppress=True)

spec = separable_spec(k_true=3, n_markers=6, seed=0)
corpus, truth = generate_synthetic(spec, 20000, seed=1)
config = TrainConfig(k=3, d=16, d_e=16, lr_psi=1.0, em_batch_size=500, minibatch_size=50, epochs=3,
                     phi_update_mode="closed_form", seed=1)
params, enc, _ = train(config, corpus)

# %% Align learned senses to true ones by total variation
learned = transition_matrix(params)
tv = 0.5 * np.abs(learned[:, None, :] - spec.transition_true[None, :, :]).sum(axis=2)
print("TV(learned row, true row):\n", tv)
match = tv.argmin(axis=0)
print("true sense -> learned sense:", match.tolist())
print("row TV after matching:", tv[match, np.arange(3)])

# %% z2m: which markers does each learned sense emit?
names = corpus.marker_vocab.id_to_label
for z in range(params.k):
    print(f"z{z}:", ", ".join(f"{names[m]} {p:.2f}" for m, p in z2m_top_markers(params, z, 2)))

# %% m2z: which senses explain a marker? The prior is the corpus average of p(z|s)
prior = empirical_latent_prior(params, enc, corpus)
print("empirical prior:", prior)
for m in range(3):
    print(f"{names[m]}:", ", ".join(f"z{z} {r:.2f}" for z, r in m2z_top_clusters(params, prior, m, 2)))
