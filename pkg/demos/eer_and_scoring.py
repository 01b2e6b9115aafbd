"""All-pairs cosine scoring and equal error rate.

Run: python demos/eer_and_scoring.py
"""

import numpy as np

from srctrace import TrialScores, compute_eer_exact, compute_eer_histogram, score_all_pairs
from srctrace.synthgen import SynthSpec, generate

# Three target and three non-target trials. At threshold 0.6 one target is
# rejected and one non-target accepted, so both error rates are 1/3.
small = TrialScores([0.9, 0.8, 0.4], [0.6, 0.2, 0.1])
print("toy EER", compute_eer_exact(small))

# Score every unordered pair of a synthetic set. Same-class pairs are targets.
_, dev, _ = generate(SynthSpec(n_classes=8, dim=16, samples_per_class=20, cluster_spread=0.3, seed=0))
scores = score_all_pairs(dev, block_size=64)
print("pairs", scores.n_target, "target /", scores.n_nontarget, "non-target")
print("exact EER     ", compute_eer_exact(scores)[0])

# The histogram path never holds every score at once; it lands within a bin width.
print("histogram EER ", compute_eer_histogram(scores, bins=100_000))

# Scores are identical for any block size or thread count.
again = score_all_pairs(dev, block_size=7, threads=4)
print("bit-identical ", np.array_equal(np.sort(again.target_scores), np.sort(scores.target_scores)))
