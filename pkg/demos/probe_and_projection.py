"""Linear probe, confusion matrix and a 2-D view of trained embeddings.

Run: python demos/probe_and_projection.py
"""

import numpy as np

from srctrace.batching import SamplerConfig
from srctrace.evaluation import ProbeConfig, linear_probe, project_2d
from srctrace.network import init_model
from srctrace.synthgen import SynthSpec, generate
from srctrace.trainer import TrainConfig, embed, train

spec = SynthSpec(n_classes=10, dim=32, samples_per_class=60, cluster_spread=0.15, seed=2,
                 nuisance_dim=16, nuisance_scale=1.0)
train_set, dev_set, _ = generate(spec)

# A linear classifier can already undo the nuisance rotation on raw features;
# what training buys is cosine geometry, which the probe does not need.
print("probe on raw features  ", linear_probe(dev_set, ProbeConfig(seed=2)).accuracy)

cfg = TrainConfig(epochs=60, peak_lr=1e-2, warmup_epochs=6, eval_interval=20, loss="aamsoftmax", seed=2)
model, _ = train(init_model([32, 64, 16], seed=2, normalize_output=True), train_set, dev_set, cfg,
                 SamplerConfig(mode="random", batch_size=64, seed=2))
dev_emb = embed(model, dev_set)

res = linear_probe(dev_emb, ProbeConfig(seed=2))
print("probe on embeddings    ", res.accuracy, f"({res.n_train} train / {res.n_heldout} held out)")
print("confusion matrix (rows = true class):")
print(res.confusion)

# First two principal components; each class should form its own blob.
xy = project_2d(dev_emb)
for c, name in enumerate(dev_emb.class_names):
    centre = xy[dev_emb.labels == c].mean(axis=0)
    print(f"{name}  centre ({centre[0]:+.3f}, {centre[1]:+.3f})")
