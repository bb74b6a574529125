"""
Checking the backward pass
==========================
"""

import numpy as np

from erohprf import HPRFBConfig, backward, init_weights
from erohprf.gradcheck import check_block, random_bn_weights

config = HPRFBConfig(in_channels=2, out_channels=2, groups=2)
weights = random_bn_weights(init_weights(config, seed=3), seed=4)
rng = np.random.default_rng(5)
x = rng.uniform(-1, 1, size=(1, 2, 7, 7))
delta = rng.normal(size=(1, 2, 7, 7))

grads = backward(x, weights, delta)
print(len(grads.d_kernel), "kernel gradients, one per branch")
print("d_input", grads.d_input.shape)

print(check_block(weights, x, delta))  # relative errors vs central differences
