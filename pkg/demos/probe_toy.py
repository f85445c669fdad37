"""Can the latent alone predict the edge map?

Latents here are 16x average-pooled images; targets are canny edges of the
full-resolution image. A small decoder trained on the latents beats the best
constant predictor by a wide Dice margin, so this toy latent keeps edge
information. Takes about a minute on a laptop CPU.

    python demos/probe_toy.py
"""

from driftbench.probe import ProbeDecoder, ProbeTrainConfig, best_constant_dice, split_by_hash, \
    toy_edge_dataset, train_probe

data = toy_edge_dataset(n=400, side=64, seed=0, blob_prob=0.25)
cfg = ProbeTrainConfig(lr=3e-3, batch_size=16, max_epochs=20, patience=10)
decoder = ProbeDecoder(data.latents.shape[1], "none")
result = train_probe(data, decoder, cfg, "edges")
_, _, test = split_by_hash(data.ids)
print(f"epochs run {result.epochs_run}, best epoch {result.best_epoch}")
print(f"test Dice {result.test_dice:.3f} vs best constant {best_constant_dice(data.targets[test]):.3f}")
print(f"binarized edge L1 {result.test_metric:.4f}")
