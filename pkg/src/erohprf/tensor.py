"""Direct NCHW convolution, frozen batch norm and kernel padding.

Feature maps are plain ``numpy`` arrays of shape ``(N, C, H, W)`` and kernels
are ``(C_out, C_in // groups, K_h, K_w)``.  Everything here is a pure function
of its inputs.

The convolution loops over kernel offsets (row-major, ``kh`` then ``kw``) and
contracts the group-local input channels at each offset, so the order of the
floating point reduction is fixed for every output pixel.
"""

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, NumericError, ShapeError

__all__ = [
    "ConvGeometry",
    "BNParams",
    "output_shape",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
    "batchnorm_inference",
    "pad_kernel",
]


@dataclass(frozen=True)
class ConvGeometry:
    """Stride, zero padding and channel grouping of a 2-D convolution.

    Dilation is always 1 and the stride is shared by both spatial axes.
    """

    stride: int = 1
    pad_h: int = 0
    pad_w: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise GeometryError(f"stride must be positive, got {self.stride}")
        if self.pad_h < 0 or self.pad_w < 0:
            raise GeometryError(f"padding must be non-negative, got ({self.pad_h}, {self.pad_w})")
        if self.groups < 1:
            raise GeometryError(f"groups must be positive, got {self.groups}")


@dataclass(frozen=True)
class BNParams:
    """Frozen batch-norm statistics and affine parameters, one entry per channel."""

    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        n = np.shape(self.mean)
        for name in ("var", "gamma", "beta"):
            if np.shape(getattr(self, name)) != n or len(n) != 1:
                raise ShapeError(f"BN {name} has shape {np.shape(getattr(self, name))}, expected {n}")
        if not np.all(np.asarray(self.var) + self.eps > 0):
            raise NumericError("BN variance + eps must be positive on every channel")

    @property
    def channels(self):
        return len(self.mean)

    def scale(self):
        """Per-channel multiplier ``gamma / sqrt(var + eps)``."""
        return np.asarray(self.gamma) / np.sqrt(np.asarray(self.var) + self.eps)

    @classmethod
    def identity(cls, channels, eps=1e-5, dtype=np.float64):
        """Statistics of a freshly initialised layer (mean 0, var 1, gamma 1, beta 0)."""
        return cls(
            mean=np.zeros(channels, dtype),
            var=np.ones(channels, dtype),
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            eps=eps,
        )


def output_shape(input_hw, kernel_hw, geometry):
    """Spatial output size ``floor((H + 2 p - K) / s) + 1`` for each axis."""
    h, w = input_hw
    kh, kw = kernel_hw
    s = geometry.stride
    span_h = h + 2 * geometry.pad_h - kh
    span_w = w + 2 * geometry.pad_w - kw
    if span_h < 0 or span_w < 0:
        raise GeometryError(
            f"kernel {kh}x{kw} does not fit input {h}x{w} with padding "
            f"({geometry.pad_h}, {geometry.pad_w})"
        )
    return span_h // s + 1, span_w // s + 1


def _check4(a, name):
    a = np.asarray(a)
    if a.ndim != 4:
        raise ShapeError(f"{name} must be 4-D, got shape {a.shape}")
    if min(a.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {a.shape}")
    return a


def _layout(x_shape, k_shape, geometry):
    n, cin, h, w = x_shape
    cout, cg, kh, kw = k_shape
    g = geometry.groups
    if cin % g or cout % g:
        raise ShapeError(f"groups={g} must divide C_in={cin} and C_out={cout}")
    if cin != g * cg:
        raise ShapeError(f"input has {cin} channels but kernel expects {g} x {cg}")
    ho, wo = output_shape((h, w), (kh, kw), geometry)
    return n, g, cg, cout // g, ho, wo


def _padded(x, geometry):
    ph, pw = geometry.pad_h, geometry.pad_w
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_forward(x, kernel, bias=None, geometry=ConvGeometry()):
    """Zero-padded, strided, grouped cross-correlation plus per-channel bias.

    ``out[n, o, h, w] = bias[o] + sum_{kh, kw, c} x[n, c, h*s - p_h + kh, w*s - p_w + kw] * k[o, c, kh, kw]``
    with ``c`` running over the input channels of ``o``'s group.
    """
    x = _check4(x, "input")
    kernel = _check4(kernel, "kernel")
    n, g, cg, og, ho, wo = _layout(x.shape, kernel.shape, geometry)
    cout, _, kh_size, kw_size = kernel.shape
    s = geometry.stride
    dtype = np.result_type(x, kernel)

    xp = _padded(x, geometry).reshape(n, g, cg, x.shape[2] + 2 * geometry.pad_h, -1)
    wg = kernel.reshape(g, og, cg, kh_size, kw_size)
    out = np.zeros((n, g, og, ho * wo), dtype=dtype)
    for kh in range(kh_size):
        for kw in range(kw_size):
            patch = xp[:, :, :, kh : kh + s * (ho - 1) + 1 : s, kw : kw + s * (wo - 1) + 1 : s]
            out += wg[None, :, :, :, kh, kw] @ patch.reshape(n, g, cg, ho * wo)
    out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
        out += bias[None, :, None, None]
    return out


def conv2d_backward_input(delta, kernel, geometry, input_shape):
    """Gradient of a loss with respect to the convolution input.

    ``delta`` is the loss gradient with respect to the forward output and
    ``input_shape`` the full ``(N, C, H, W)`` of the forward input.  This is the
    exact transpose of :func:`conv2d_forward` (bias excluded).
    """
    delta = _check4(delta, "delta")
    kernel = _check4(kernel, "kernel")
    input_shape = tuple(int(d) for d in input_shape)
    n, g, cg, og, ho, wo = _layout(input_shape, kernel.shape, geometry)
    if delta.shape != (n, kernel.shape[0], ho, wo):
        raise ShapeError(f"delta shape {delta.shape} does not match forward output {(n, kernel.shape[0], ho, wo)}")
    _, _, kh_size, kw_size = kernel.shape
    s = geometry.stride
    h, w = input_shape[2:]
    ph, pw = geometry.pad_h, geometry.pad_w

    wt = kernel.reshape(g, og, cg, kh_size, kw_size).swapaxes(1, 2)
    dg = delta.reshape(n, g, og, ho * wo)
    dxp = np.zeros((n, g, cg, h + 2 * ph, w + 2 * pw), dtype=np.result_type(delta, kernel))
    for kh in range(kh_size):
        for kw in range(kw_size):
            contrib = wt[None, :, :, :, kh, kw] @ dg
            dxp[:, :, :, kh : kh + s * (ho - 1) + 1 : s, kw : kw + s * (wo - 1) + 1 : s] += contrib.reshape(
                n, g, cg, ho, wo
            )
    return dxp[:, :, :, ph : ph + h, pw : pw + w].reshape(input_shape)


def conv2d_backward_weight(x, delta, geometry, kernel_shape):
    """Gradients with respect to the kernel and the bias.

    Returns ``(d_kernel, d_bias)``; the kernel gradient is the strided
    cross-correlation of the padded input with ``delta`` and the bias gradient
    is ``delta`` summed over batch and space per output channel.
    """
    x = _check4(x, "input")
    delta = _check4(delta, "delta")
    kernel_shape = tuple(int(d) for d in kernel_shape)
    if len(kernel_shape) != 4:
        raise ShapeError(f"kernel shape must have 4 entries, got {kernel_shape}")
    n, g, cg, og, ho, wo = _layout(x.shape, kernel_shape, geometry)
    cout, _, kh_size, kw_size = kernel_shape
    if delta.shape != (n, cout, ho, wo):
        raise ShapeError(f"delta shape {delta.shape} does not match forward output {(n, cout, ho, wo)}")
    s = geometry.stride
    p = ho * wo

    xp = _padded(x, geometry).reshape(n, g, cg, x.shape[2] + 2 * geometry.pad_h, -1)
    # (G, O_g, N*P) against (G, N*P, C_g)
    dg = delta.reshape(n, g, og, p).transpose(1, 2, 0, 3).reshape(g, og, n * p)
    dk = np.zeros((g, og, cg, kh_size, kw_size), dtype=np.result_type(x, delta))
    for kh in range(kh_size):
        for kw in range(kw_size):
            patch = xp[:, :, :, kh : kh + s * (ho - 1) + 1 : s, kw : kw + s * (wo - 1) + 1 : s]
            patch = patch.reshape(n, g, cg, p).transpose(1, 0, 3, 2).reshape(g, n * p, cg)
            dk[..., kh, kw] = dg @ patch
    d_bias = delta.sum(axis=(0, 2, 3))
    return dk.reshape(kernel_shape), d_bias


def batchnorm_inference(x, bn):
    """Per-channel ``(x - mean) * gamma / sqrt(var + eps) + beta``."""
    x = _check4(x, "input")
    if bn.channels != x.shape[1]:
        raise ShapeError(f"BN has {bn.channels} channels, input has {x.shape[1]}")
    c = (slice(None), None, None)
    return (x - np.asarray(bn.mean)[c]) * bn.scale()[c] + np.asarray(bn.beta)[c]


def pad_kernel(kernel, target_h, target_w):
    """Embed ``kernel`` at the centre of a zero ``target_h x target_w`` kernel."""
    kernel = _check4(kernel, "kernel")
    kh, kw = kernel.shape[2:]
    dh, dw = target_h - kh, target_w - kw
    if dh < 0 or dw < 0:
        raise GeometryError(f"cannot pad {kh}x{kw} kernel down to {target_h}x{target_w}")
    if dh % 2 or dw % 2:
        raise GeometryError(f"padding {kh}x{kw} to {target_h}x{target_w} is not symmetric")
    if dh == 0 and dw == 0:
        return kernel.copy()
    return np.pad(kernel, ((0, 0), (0, 0), (dh // 2, dh // 2), (dw // 2, dw // 2)))
