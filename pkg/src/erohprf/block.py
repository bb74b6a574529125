"""Heterogeneous pyramid receptive-field bag (HPRFB).

The training-form block is a sum of parallel ``conv -> BN`` branches, one per
(scale, receptive-field type) pair.  For a scale ``i`` the five types are

* ``VC``  vertical coordination, ``i x 1``
* ``HC``  horizontal coordination, ``1 x i``
* ``VR``  vertical rectangle, ``i x (i - 2)``
* ``HR``  horizontal rectangle, ``(i - 2) x i``
* ``S``   square, ``i x i``

Each branch is padded by half its kernel extent on each axis, so every branch
produces exactly the same output grid as a ``K x K`` convolution padded by
``K // 2`` (``K`` the largest scale).  That alignment is what lets
:mod:`erohprf.reparam` fold the whole bag into one convolution.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError, ShapeError
from .tensor import (
    BNParams,
    ConvGeometry,
    batchnorm_inference,
    conv2d_backward_input,
    conv2d_backward_weight,
    conv2d_forward,
)

__all__ = [
    "RFType",
    "HPRFBConfig",
    "BranchParams",
    "HPRFBWeights",
    "GradientBundle",
    "branch_kernel_shape",
    "branch_geometry",
    "init_weights",
    "forward_train",
    "forward_inference",
    "backward",
]


class RFType(enum.Enum):
    VC = "VC"
    HC = "HC"
    VR = "VR"
    HR = "HR"
    S = "S"

    @classmethod
    def parse(cls, names):
        """``"VC,HC"`` or an iterable of names -> tuple of types in canonical order."""
        if isinstance(names, str):
            names = [n for n in names.replace(" ", "").split(",") if n]
        try:
            wanted = {cls(n.upper()) if isinstance(n, str) else cls(n) for n in names}
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return tuple(t for t in cls if t in wanted)


ALL_TYPES = tuple(RFType)


def branch_kernel_shape(scale, rf_type):
    """Kernel ``(K_h, K_w)`` of the branch with the given scale and type."""
    if not isinstance(scale, (int, np.integer)) or scale < 3 or scale % 2 == 0:
        raise GeometryError(f"scale must be an odd integer >= 3, got {scale!r}")
    rf_type = RFType(rf_type)
    i = int(scale)
    return {
        RFType.VC: (i, 1),
        RFType.HC: (1, i),
        RFType.VR: (i, i - 2),
        RFType.HR: (i - 2, i),
        RFType.S: (i, i),
    }[rf_type]


@dataclass(frozen=True)
class HPRFBConfig:
    scales: tuple = (3, 5, 7)
    rf_types: tuple = ALL_TYPES
    in_channels: int = 1
    out_channels: int = 1
    groups: int = 1
    stride: int = 1
    bn_eps: float = 1e-5

    def __post_init__(self):
        scales = tuple(sorted(int(s) for s in self.scales))
        if not scales:
            raise ConfigError("at least one scale is required")
        if len(set(scales)) != len(scales):
            raise ConfigError(f"duplicate scales in {self.scales}")
        for s in scales:
            if s < 3 or s % 2 == 0:
                raise ConfigError(f"scales must be odd and >= 3, got {s}")
        object.__setattr__(self, "scales", scales)
        types = RFType.parse(self.rf_types)
        if not types:
            raise ConfigError("at least one RF type is required")
        object.__setattr__(self, "rf_types", types)
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if self.stride < 1:
            raise ConfigError(f"stride must be positive, got {self.stride}")
        if not self.bn_eps > 0:
            raise ConfigError(f"bn_eps must be positive, got {self.bn_eps}")

    @property
    def kernel_size(self):
        """Side of the merged square kernel (the largest scale)."""
        return self.scales[-1]

    @property
    def group_in_channels(self):
        return self.in_channels // self.groups

    def branch_keys(self):
        """(scale, type) pairs in the fixed evaluation order: scale ascending, then VC, HC, VR, HR, S."""
        return [(i, t) for i in self.scales for t in self.rf_types]

    def to_dict(self):
        return {
            "scales": list(self.scales),
            "rf_types": [t.value for t in self.rf_types],
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "groups": self.groups,
            "stride": self.stride,
            "bn_eps": self.bn_eps,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            scales=tuple(d["scales"]),
            rf_types=tuple(d["rf_types"]),
            in_channels=int(d["in_channels"]),
            out_channels=int(d["out_channels"]),
            groups=int(d["groups"]),
            stride=int(d["stride"]),
            bn_eps=float(d["bn_eps"]),
        )


def branch_geometry(config, scale, rf_type):
    """Geometry of one branch: half-kernel padding so it aligns with the merged conv."""
    kh, kw = branch_kernel_shape(scale, rf_type)
    return ConvGeometry(stride=config.stride, pad_h=kh // 2, pad_w=kw // 2, groups=config.groups)


@dataclass(frozen=True)
class BranchParams:
    scale: int
    rf_type: RFType
    kernel: np.ndarray
    bias: np.ndarray
    bn: BNParams

    def __post_init__(self):
        object.__setattr__(self, "rf_type", RFType(self.rf_type))
        kh, kw = branch_kernel_shape(self.scale, self.rf_type)
        k = np.asarray(self.kernel)
        if k.ndim != 4 or k.shape[2:] != (kh, kw):
            raise ShapeError(
                f"branch ({self.scale}, {self.rf_type.value}) needs a {kh}x{kw} kernel, got shape {k.shape}"
            )
        if np.shape(self.bias) != (k.shape[0],):
            raise ShapeError(f"bias shape {np.shape(self.bias)} does not match {k.shape[0]} output channels")
        if self.bn.channels != k.shape[0]:
            raise ShapeError(f"BN has {self.bn.channels} channels, kernel has {k.shape[0]} outputs")

    @property
    def key(self):
        return self.scale, self.rf_type


@dataclass(frozen=True)
class HPRFBWeights:
    config: HPRFBConfig
    branches: tuple

    def __post_init__(self):
        branches = tuple(self.branches)
        object.__setattr__(self, "branches", branches)
        expected = self.config.branch_keys()
        got = [b.key for b in branches]
        if got != expected:
            raise ConfigError(
                "branches must cover every (scale, type) pair exactly once in canonical order; "
                f"expected {[(i, t.value) for i, t in expected]}, got {[(i, t.value) for i, t in got]}"
            )
        cfg = self.config
        for b in branches:
            if b.kernel.shape[:2] != (cfg.out_channels, cfg.group_in_channels):
                raise ShapeError(
                    f"branch ({b.scale}, {b.rf_type.value}) kernel shape {b.kernel.shape} "
                    f"does not match config channels ({cfg.out_channels}, {cfg.group_in_channels})"
                )

    def branch(self, scale, rf_type):
        key = (scale, RFType(rf_type))
        for b in self.branches:
            if b.key == key:
                return b
        raise KeyError(key)

    def astype(self, dtype):
        """Copy with every array cast to ``dtype``."""
        def cast(b):
            bn = BNParams(
                mean=b.bn.mean.astype(dtype),
                var=b.bn.var.astype(dtype),
                gamma=b.bn.gamma.astype(dtype),
                beta=b.bn.beta.astype(dtype),
                eps=b.bn.eps,
            )
            return BranchParams(b.scale, b.rf_type, b.kernel.astype(dtype), b.bias.astype(dtype), bn)

        return HPRFBWeights(self.config, tuple(cast(b) for b in self.branches))


@dataclass
class GradientBundle:
    """Loss gradients of one backward pass; per-branch lists follow ``weights.branches``."""

    d_input: np.ndarray
    d_kernel: list = field(default_factory=list)
    d_bias: list = field(default_factory=list)
    d_gamma: list = field(default_factory=list)
    d_beta: list = field(default_factory=list)


def init_weights(config, seed=0, dtype=np.float64):
    """Fan-in scaled uniform kernels, zero biases and identity BN statistics.

    Kernel entries are drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` with
    ``fan_in = C_in/groups * K_h * K_w`` of the branch, in branch order.
    """
    rng = np.random.default_rng(seed)
    cout, cg = config.out_channels, config.group_in_channels
    branches = []
    for scale, t in config.branch_keys():
        kh, kw = branch_kernel_shape(scale, t)
        bound = 1.0 / np.sqrt(cg * kh * kw)
        kernel = rng.uniform(-bound, bound, size=(cout, cg, kh, kw)).astype(dtype)
        branches.append(
            BranchParams(
                scale=scale,
                rf_type=t,
                kernel=kernel,
                bias=np.zeros(cout, dtype),
                bn=BNParams.identity(cout, eps=config.bn_eps, dtype=dtype),
            )
        )
    return HPRFBWeights(config, tuple(branches))


def _check_input(x, config):
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ShapeError(f"input shape {x.shape} does not have {config.in_channels} channels")
    return x


def forward_train(x, weights):
    """Training-form output: the sum over branches of ``BN(conv(x))``."""
    cfg = weights.config
    x = _check_input(x, cfg)
    out = None
    for b in weights.branches:
        y = conv2d_forward(x, b.kernel, b.bias, branch_geometry(cfg, b.scale, b.rf_type))
        y = batchnorm_inference(y, b.bn)
        out = y if out is None else out + y
    return out


def forward_inference(x, merged):
    """Inference-form output: one ``K x K`` convolution with the merged kernel."""
    x = np.asarray(x)
    return conv2d_forward(x, merged.kernel, merged.bias, merged.geometry)


def backward(x, weights, delta):
    """Analytic gradients of the training-form block under frozen BN statistics.

    With ``a = gamma / sqrt(var + eps)`` per branch, the error reaching a
    branch's convolution is ``a * delta``; each branch's kernel and bias
    gradients depend on that branch alone.  ``d_gamma`` uses the normalised
    pre-affine activations and ``d_beta`` is ``delta`` summed per channel.
    """
    cfg = weights.config
    x = _check_input(x, cfg)
    delta = np.asarray(delta)
    d_input = np.zeros(x.shape, dtype=np.result_type(x, delta))
    bundle = GradientBundle(d_input=d_input)
    for b in weights.branches:
        geom = branch_geometry(cfg, b.scale, b.rf_type)
        z = conv2d_forward(x, b.kernel, b.bias, geom)
        if delta.shape != z.shape:
            raise ShapeError(f"delta shape {delta.shape} does not match output shape {z.shape}")
        inv_std = 1.0 / np.sqrt(b.bn.var + b.bn.eps)
        a = b.bn.gamma * inv_std
        d_z = delta * a[None, :, None, None]
        d_k, d_b = conv2d_backward_weight(x, d_z, geom, b.kernel.shape)
        bundle.d_input += conv2d_backward_input(d_z, b.kernel, geom, x.shape)
        bundle.d_kernel.append(d_k)
        bundle.d_bias.append(d_b)
        z_hat = (z - b.bn.mean[None, :, None, None]) * inv_std[None, :, None, None]
        bundle.d_gamma.append((delta * z_hat).sum(axis=(0, 2, 3)))
        bundle.d_beta.append(delta.sum(axis=(0, 2, 3)))
    return bundle
