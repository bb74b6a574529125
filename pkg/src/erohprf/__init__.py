"""Heterogeneous pyramid receptive-field convolution block and its reparameterization."""

from .block import (
    BranchParams,
    GradientBundle,
    HPRFBConfig,
    HPRFBWeights,
    RFType,
    backward,
    branch_kernel_shape,
    forward_inference,
    forward_train,
    init_weights,
)
from .checkpoint import read_checkpoint, write_checkpoint
from .reparam import (
    MergedConv,
    count_macs,
    count_params,
    fold_bn,
    merge_bag,
    merge_pyramid,
    reparameterize,
    verify_equivalence,
)
from .tensor import BNParams, ConvGeometry

__version__ = "0.1.0"
