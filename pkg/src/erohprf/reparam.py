"""Two-stage structural reparameterization of an HPRFB into one convolution.

Stage one folds each branch's frozen BN into its kernel and bias and sums the
zero-padded branches of one scale into an ``i x i`` kernel.  Stage two pads
every per-scale kernel to the largest scale ``K`` and sums them.  Both stages
rely only on linearity of convolution in its kernel and bias, so the merged
``K x K`` conv reproduces the training-form output up to rounding.

Merging is done in float64 whatever the input precision; the result is cast
back to the precision of the source weights.
"""

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .block import RFType, branch_kernel_shape, forward_inference, forward_train
from .errors import ConfigError, NumericError
from .tensor import ConvGeometry, output_shape, pad_kernel

__all__ = [
    "FoldedBranch",
    "MergedBag",
    "MergedConv",
    "EquivalenceReport",
    "fold_bn",
    "merge_bag",
    "merge_pyramid",
    "reparameterize",
    "count_params",
    "count_macs",
    "conv_macs",
    "verify_equivalence",
]

_TYPE_ORDER = {t: n for n, t in enumerate(RFType)}


@dataclass(frozen=True)
class FoldedBranch:
    scale: int
    rf_type: RFType
    kernel: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class MergedBag:
    scale: int
    kernel: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class MergedConv:
    """Single ``K x K`` convolution equivalent to a whole bag."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    groups: int = 1

    @property
    def kernel_size(self):
        return self.kernel.shape[2]

    @property
    def geometry(self):
        k = self.kernel_size
        return ConvGeometry(stride=self.stride, pad_h=k // 2, pad_w=k // 2, groups=self.groups)

    @property
    def in_channels(self):
        return self.kernel.shape[1] * self.groups

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    def astype(self, dtype):
        return MergedConv(self.kernel.astype(dtype), self.bias.astype(dtype), self.stride, self.groups)


def fold_bn(branch):
    """Absorb a branch's frozen BN into its conv: ``gamma*W/std`` and ``gamma*(B-mean)/std + beta``."""
    bn = branch.bn
    var = np.asarray(bn.var, dtype=np.float64)
    if not np.all(var + bn.eps > 0):
        raise NumericError(f"branch ({branch.scale}, {branch.rf_type.value}): variance + eps must be positive")
    a = np.asarray(bn.gamma, dtype=np.float64) / np.sqrt(var + bn.eps)
    kernel = np.asarray(branch.kernel, dtype=np.float64) * a[:, None, None, None]
    bias = (np.asarray(branch.bias, dtype=np.float64) - np.asarray(bn.mean, dtype=np.float64)) * a
    bias = bias + np.asarray(bn.beta, dtype=np.float64)
    return FoldedBranch(branch.scale, branch.rf_type, kernel, bias)


def merge_bag(folded):
    """Sum the centred, zero-padded folded branches of one scale."""
    folded = list(folded)
    if not folded:
        raise ConfigError("merge_bag needs at least one branch")
    scales = {f.scale for f in folded}
    if len(scales) != 1:
        raise ConfigError(f"merge_bag got branches from several scales: {sorted(scales)}")
    (scale,) = scales
    outs = {f.kernel.shape[0] for f in folded}
    if len(outs) != 1:
        raise ConfigError(f"branches disagree on output channels: {sorted(outs)}")
    folded.sort(key=lambda f: _TYPE_ORDER[RFType(f.rf_type)])
    kernel = None
    bias = None
    for f in folded:
        if f.kernel.shape[2:] != branch_kernel_shape(scale, f.rf_type):
            raise ConfigError(f"branch ({scale}, {RFType(f.rf_type).value}) has kernel {f.kernel.shape[2:]}")
        k = pad_kernel(np.asarray(f.kernel, dtype=np.float64), scale, scale)
        b = np.asarray(f.bias, dtype=np.float64)
        kernel = k if kernel is None else kernel + k
        bias = b if bias is None else bias + b
    return MergedBag(scale, kernel, bias)


def merge_pyramid(bags, stride=1, groups=1, out_channels=None, group_in_channels=None):
    """Pad every per-scale kernel to the largest scale and sum.

    An empty ``bags`` gives a ``1 x 1`` zero kernel; its channel shape must then
    be supplied through ``out_channels`` and ``group_in_channels``.
    """
    bags = sorted(bags, key=lambda b: b.scale)
    if not bags:
        cout = out_channels or 1
        cg = group_in_channels or 1
        return MergedConv(np.zeros((cout, cg, 1, 1)), np.zeros(cout), stride, groups)
    scales = [b.scale for b in bags]
    if len(set(scales)) != len(scales):
        raise ConfigError(f"duplicate scales in pyramid: {scales}")
    k = scales[-1]
    kernel = np.zeros(bags[-1].kernel.shape[:2] + (k, k))
    bias = np.zeros(bags[-1].kernel.shape[0])
    for b in bags:
        kernel = kernel + pad_kernel(np.asarray(b.kernel, dtype=np.float64), k, k)
        bias = bias + np.asarray(b.bias, dtype=np.float64)
    return MergedConv(kernel, bias, stride, groups)


def reparameterize(weights):
    """Fold BN, merge each scale's bag, then merge the pyramid."""
    cfg = weights.config
    by_scale = defaultdict(list)
    for b in weights.branches:
        by_scale[b.scale].append(fold_bn(b))
    bags = [merge_bag(by_scale[s]) for s in cfg.scales]
    merged = merge_pyramid(bags, stride=cfg.stride, groups=cfg.groups)
    dtype = weights.branches[0].kernel.dtype
    return merged.astype(dtype)


def count_params(config, form="train"):
    """Learnable and BN-state parameter count of the block.

    ``train``: every branch's kernel and bias plus four BN values per channel.
    ``inference``: the merged ``K x K`` kernel plus its bias.
    """
    cout, cg = config.out_channels, config.group_in_channels
    if form == "inference":
        return cout * cg * config.kernel_size**2 + cout
    if form != "train":
        raise ValueError(f"form must be 'train' or 'inference', got {form!r}")
    total = 0
    for scale, t in config.branch_keys():
        kh, kw = branch_kernel_shape(scale, t)
        total += cout * cg * kh * kw + cout + 4 * cout
    return total


def conv_macs(out_channels, group_in_channels, kernel_hw, output_hw):
    """``C_out * H_out * W_out * C_in/groups * K_h * K_w`` for one image."""
    return out_channels * output_hw[0] * output_hw[1] * group_in_channels * kernel_hw[0] * kernel_hw[1]


def count_macs(config, form, input_hw):
    """Multiply-accumulates for one image of spatial size ``input_hw``.

    Each conv costs ``C_out * H_out * W_out * C_in/groups * K_h * K_w``.  The
    training form also pays 2 ops per output element for every branch's BN.
    """
    cout, cg = config.out_channels, config.group_in_channels
    k = config.kernel_size
    geom = ConvGeometry(stride=config.stride, pad_h=k // 2, pad_w=k // 2, groups=config.groups)
    ho, wo = output_shape(input_hw, (k, k), geom)
    if form == "inference":
        return conv_macs(cout, cg, (k, k), (ho, wo))
    if form != "train":
        raise ValueError(f"form must be 'train' or 'inference', got {form!r}")
    total = 0
    for scale, t in config.branch_keys():
        total += conv_macs(cout, cg, branch_kernel_shape(scale, t), (ho, wo)) + 2 * cout * ho * wo
    return total


@dataclass
class EquivalenceReport:
    max_abs_err: float
    tol: float
    passed: bool
    trial_errors: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}: max |train - merged| = {self.max_abs_err:.3e} over {len(self.trial_errors)} trials (tol {self.tol:.1e})"


def verify_equivalence(weights, trials=16, seed=0, tol=1e-9, merged=None, batch=2, hw=(12, 12), dtype=None):
    """Compare training and merged forms on seeded uniform ``[-1, 1]`` inputs.

    ``merged`` defaults to ``reparameterize(weights)``; pass one explicitly to
    check a stored or modified merge.  ``dtype`` casts weights, merge and
    inputs before running both forms.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if merged is None:
        merged = reparameterize(weights)
    if dtype is not None:
        weights = weights.astype(dtype)
        merged = merged.astype(dtype)
    else:
        dtype = weights.branches[0].kernel.dtype
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(trials):
        x = rng.uniform(-1.0, 1.0, size=(batch, weights.config.in_channels) + tuple(hw)).astype(dtype)
        y_train = forward_train(x, weights)
        y_merged = forward_inference(x, merged)
        errors.append(float(np.max(np.abs(y_train - y_merged))))
    worst = max(errors)
    return EquivalenceReport(worst, tol, bool(worst <= tol), errors)
