"""Alignment error equals expected drift, checked by exact enumeration.

A finite world has images with probabilities, a projector table, an encoder and
a decoder. A generator that samples latents from the encoder's conditional,
given the condition, pays alignment error equal to the autoencoder's expected
condition drift. Both sides are computed with Fractions, so they agree exactly.

    python demos/discrete_worlds.py
"""

from fractions import Fraction as F

import numpy as np

from driftbench.synthetic import DiscreteWorld, alignment_error_exact, expected_drift_exact, random_world, \
    theorem_gap_trials

# Two images share latent 0 (many-to-one encoder); the decoder returns image 0.
world = DiscreteWorld(
    probs=[F(1, 2), F(1, 4), F(1, 4)],
    conditions=[(0, 0), (2, 0), (0, 3)],
    encoder=[0, 0, 1],
    decoder=[0, 2],
)
print("hand-built world: alignment", alignment_error_exact(world), "drift", expected_drift_exact(world))

rng = np.random.default_rng(7)
w = random_world(rng)
support = sum(1 for p in w.probs if p)
print(f"random world, {support} data images + {len(w.probs) - support} decoder-only:", alignment_error_exact(w), "==", expected_drift_exact(w))

gap, mismatches = theorem_gap_trials(1000, seed=0)
print(f"1000 random worlds: max |gap| = {gap:.1e}, exact mismatches = {mismatches}")
