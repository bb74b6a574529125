"""
Merging a multi-branch block into one convolution
==================================================

Fifteen conv+BN branches (three scales, five shapes each) collapse into a
single 7x7 kernel that gives the same output.
"""

import numpy as np

from erohprf import HPRFBConfig, forward_inference, forward_train, init_weights, reparameterize
from erohprf.gradcheck import random_bn_weights

config = HPRFBConfig(scales=(3, 5, 7), in_channels=3, out_channels=4)
for scale, t in config.branch_keys()[:5]:
    print(scale, t.value)  # canonical branch order

# random BN statistics so the fold actually does something
weights = random_bn_weights(init_weights(config, seed=0), seed=1)
for b in weights.branches[:5]:
    print(b.scale, b.rf_type.value, b.kernel.shape)

merged = reparameterize(weights)
print("merged kernel", merged.kernel.shape, "bias", merged.bias.shape)

x = np.random.default_rng(2).uniform(-1, 1, size=(2, 3, 12, 12))
y_branches = forward_train(x, weights)
y_merged = forward_inference(x, merged)
print("max |difference|", np.abs(y_branches - y_merged).max())

# the centre of the merged kernel is where every branch overlaps
print(np.round(merged.kernel[0, 0], 3))
