"""
Train with branches, deploy merged
==================================

A tiny bars classifier (horizontal vs vertical) trained with batch-stat BN,
then evaluated with the block folded into one conv.
"""

from erohprf.demo import TrainConfig, generate_dataset, merge_and_compare, train

ds = generate_dataset(n=512, noise=0.1, seed=7)
cfg = TrainConfig(epochs=20, seed=7)
model = train(cfg, ds, log=print)

x, y = ds.split("test")
print(merge_and_compare(model, x, y))
