"""Desk-scale end-to-end demo: train a tiny HPRFB classifier, merge it, compare.

Network: ``HPRFB -> ReLU -> global average pool -> linear -> softmax`` on
synthetic 16x16 bar images (class 0 horizontal bar, class 1 vertical bar).
During training each branch's BN uses batch statistics and updates running
statistics; the trained block is returned with those running statistics
frozen in, ready for :func:`erohprf.reparam.reparameterize`.
"""

from dataclasses import dataclass, field

import numpy as np

from .block import BranchParams, HPRFBConfig, HPRFBWeights, backward as block_backward
from .block import branch_geometry, forward_inference, forward_train, init_weights
from .errors import TrainingError
from .metrics import PredictionSet
from .reparam import count_macs, count_params, reparameterize
from .tensor import BNParams, conv2d_backward_input, conv2d_backward_weight, conv2d_forward

__all__ = [
    "SyntheticDataset",
    "TrainConfig",
    "TrainedModel",
    "MergeReport",
    "generate_dataset",
    "init_network",
    "network_params",
    "train",
    "merge_and_compare",
    "network_loss",
    "network_gradients",
]

IMAGE_SIZE = 16


@dataclass
class SyntheticDataset:
    images: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def split(self, name):
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]
        return self.images[idx], self.labels[idx]


def generate_dataset(n=512, noise=0.1, seed=0, split=(0.7, 0.15, 0.15)):
    """Balanced bars dataset: ``n // 2`` horizontal and ``n // 2`` vertical bars.

    Each image holds one full-length bar of intensity 1 at a random row or
    column plus ``U(-noise, noise)`` pixel noise.  Samples are shuffled and
    split train/val/test with the same seed.
    """
    if n < 2 or n % 2:
        raise ValueError(f"n must be a positive even number, got {n}")
    if not 0 <= noise < 1:
        raise ValueError(f"noise must lie in [0, 1), got {noise}")
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    images = np.zeros((n, 1, IMAGE_SIZE, IMAGE_SIZE))
    pos = rng.integers(1, IMAGE_SIZE - 1, size=n)
    for s in range(n):
        if labels[s] == 0:
            images[s, 0, pos[s], :] = 1.0
        else:
            images[s, 0, :, pos[s]] = 1.0
    images += rng.uniform(-noise, noise, size=images.shape)
    order = rng.permutation(n)
    images, labels = images[order], labels[order]
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    idx = np.arange(n)
    return SyntheticDataset(images, labels, idx[:n_train], idx[n_train : n_train + n_val], idx[n_train + n_val :])


@dataclass
class TrainConfig:
    """SGD with momentum, L2 weight decay and step learning-rate decay.

    The rate is divided by ``lr_decay`` every ``decay_every`` epochs.
    """

    lr: float = 0.05
    lr_decay: float = 5.0
    decay_every: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-5
    epochs: int = 20
    batch_size: int = 32
    seed: int = 7
    channels: int = 8
    scales: tuple = (3, 5, 7)
    rf_types: tuple = ("VC", "HC", "VR", "HR", "S")
    bn_momentum: float = 0.1

    def lr_at(self, epoch):
        return self.lr / self.lr_decay ** (epoch // self.decay_every)

    def block_config(self):
        return HPRFBConfig(scales=self.scales, rf_types=self.rf_types, in_channels=1, out_channels=self.channels)


@dataclass
class TrainedModel:
    weights: HPRFBWeights
    head_w: np.ndarray
    head_b: np.ndarray
    init_loss: float = float("nan")
    epoch_losses: list = field(default_factory=list)

    def logits(self, x, merged=None):
        """Eval-mode logits; with ``merged`` the block runs as a single conv."""
        y = forward_train(x, self.weights) if merged is None else forward_inference(x, merged)
        pooled = np.maximum(y, 0.0).mean(axis=(2, 3))
        return pooled @ self.head_w.T + self.head_b

    def predictions(self, x, labels, merged=None):
        return PredictionSet(softmax(self.logits(x, merged)), labels)


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


# -- parameters are carried as a flat dict of arrays while training ----------


def network_params(weights, head_w, head_b):
    p = {"head_w": head_w, "head_b": head_b}
    for n, b in enumerate(weights.branches):
        p[f"k{n}"] = b.kernel
        p[f"b{n}"] = b.bias
        p[f"g{n}"] = b.bn.gamma
        p[f"t{n}"] = b.bn.beta
    return p


def _weights_from(config, params, means, variances):
    branches = []
    for n, (scale, t) in enumerate(config.branch_keys()):
        bn = BNParams(mean=means[n], var=variances[n], gamma=params[f"g{n}"], beta=params[f"t{n}"], eps=config.bn_eps)
        branches.append(BranchParams(scale, t, params[f"k{n}"], params[f"b{n}"], bn))
    return HPRFBWeights(config, tuple(branches))


def _block_batch_forward(x, config, params):
    """Sum of branches with BN on batch statistics; returns output and per-branch caches."""
    out = None
    caches = []
    for n, (scale, t) in enumerate(config.branch_keys()):
        geom = branch_geometry(config, scale, t)
        z = conv2d_forward(x, params[f"k{n}"], params[f"b{n}"], geom)
        mean = z.mean(axis=(0, 2, 3))
        var = z.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + config.bn_eps)
        z_hat = (z - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = z_hat * params[f"g{n}"][None, :, None, None] + params[f"t{n}"][None, :, None, None]
        out = y if out is None else out + y
        caches.append((geom, z_hat, inv_std, mean, var))
    return out, caches


def _block_batch_backward(x, config, params, caches, d_out, grads):
    for n, (geom, z_hat, inv_std, _, _) in enumerate(caches):
        m = z_hat.shape[0] * z_hat.shape[2] * z_hat.shape[3]
        grads[f"g{n}"] = (d_out * z_hat).sum(axis=(0, 2, 3))
        grads[f"t{n}"] = d_out.sum(axis=(0, 2, 3))
        d_hat = d_out * params[f"g{n}"][None, :, None, None]
        d_z = (
            m * d_hat
            - d_hat.sum(axis=(0, 2, 3))[None, :, None, None]
            - z_hat * (d_hat * z_hat).sum(axis=(0, 2, 3))[None, :, None, None]
        ) * (inv_std / m)[None, :, None, None]
        grads[f"k{n}"], grads[f"b{n}"] = conv2d_backward_weight(x, d_z, geom, params[f"k{n}"].shape)
        d_x = conv2d_backward_input(d_z, params[f"k{n}"], geom, x.shape)
        grads["input"] = d_x if "input" not in grads else grads["input"] + d_x


def _head(y, params):
    a = np.maximum(y, 0.0)
    pooled = a.mean(axis=(2, 3))
    logits = pooled @ params["head_w"].T + params["head_b"]
    return logits, pooled


def network_loss(x, labels, config, params, batch_stats=True, frozen=None):
    """Mean cross-entropy of the full network.

    ``batch_stats=True`` normalises with the batch's own statistics (training
    mode); otherwise ``frozen`` must be an :class:`HPRFBWeights` whose BN
    statistics are used, with kernels and affine values taken from ``params``.
    """
    if batch_stats:
        y, _ = _block_batch_forward(x, config, params)
    else:
        w = _weights_from(config, params, [b.bn.mean for b in frozen.branches], [b.bn.var for b in frozen.branches])
        y = forward_train(x, w)
    logits, _ = _head(y, params)
    return _cross_entropy(logits, labels)


def network_gradients(x, labels, config, params, batch_stats=True, frozen=None):
    """Loss and analytic gradients for every entry of ``params`` plus ``"input"``.

    Returns ``(loss, grads, caches)``; ``caches`` carries the batch statistics
    used in training mode (empty in frozen mode).
    """
    if batch_stats:
        y, caches = _block_batch_forward(x, config, params)
        w = None
    else:
        w = _weights_from(config, params, [b.bn.mean for b in frozen.branches], [b.bn.var for b in frozen.branches])
        y = forward_train(x, w)
        caches = []
    logits, pooled = _head(y, params)
    loss = _cross_entropy(logits, labels)

    d_logits = softmax(logits)
    d_logits[np.arange(len(labels)), labels] -= 1.0
    d_logits /= len(labels)
    grads = {"head_w": d_logits.T @ pooled, "head_b": d_logits.sum(axis=0)}
    d_pooled = d_logits @ params["head_w"]
    hw = y.shape[2] * y.shape[3]
    d_y = np.broadcast_to(d_pooled[:, :, None, None] / hw, y.shape) * (y > 0)

    if batch_stats:
        _block_batch_backward(x, config, params, caches, d_y, grads)
    else:
        bundle = block_backward(x, w, d_y)
        grads["input"] = bundle.d_input
        for n in range(len(w.branches)):
            grads[f"k{n}"] = bundle.d_kernel[n]
            grads[f"b{n}"] = bundle.d_bias[n]
            grads[f"g{n}"] = bundle.d_gamma[n]
            grads[f"t{n}"] = bundle.d_beta[n]
    return loss, grads, caches


def init_network(cfg, seed=None):
    """Initial block weights and a fan-in scaled linear head."""
    seed = cfg.seed if seed is None else seed
    block_cfg = cfg.block_config()
    weights = init_weights(block_cfg, seed=seed)
    rng = np.random.default_rng([seed, 1])
    bound = 1.0 / np.sqrt(cfg.channels)
    head_w = rng.uniform(-bound, bound, size=(2, cfg.channels))
    return weights, head_w, np.zeros(2)


def train(cfg, dataset, log=None):
    """Minibatch SGD on the dataset's training split.

    Returns a :class:`TrainedModel` whose BN layers hold the running
    statistics.  ``init_loss`` and ``epoch_losses`` are full training-split
    losses in training mode, measured before the first epoch and after each.
    """
    block_cfg = cfg.block_config()
    weights, head_w, head_b = init_network(cfg)
    params = {k: v.copy() for k, v in network_params(weights, head_w, head_b).items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    n_branches = len(block_cfg.branch_keys())
    run_mean = [np.zeros(block_cfg.out_channels) for _ in range(n_branches)]
    run_var = [np.ones(block_cfg.out_channels) for _ in range(n_branches)]

    x_train, y_train = dataset.split("train")
    rng = np.random.default_rng([cfg.seed, 2])
    init_loss = network_loss(x_train, y_train, block_cfg, params)
    losses = []
    mom = cfg.bn_momentum
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(y_train))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads, caches = network_gradients(x_train[idx], y_train[idx], block_cfg, params)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch + 1}", epoch=epoch + 1)
            for n, (_, _, _, mean, var) in enumerate(caches):
                run_mean[n] = (1 - mom) * run_mean[n] + mom * mean
                run_var[n] = (1 - mom) * run_var[n] + mom * var
            for k, p in params.items():
                g = grads[k] + cfg.weight_decay * p
                velocity[k] = cfg.momentum * velocity[k] + g
                params[k] = p - lr * velocity[k]
        epoch_loss = network_loss(x_train, y_train, block_cfg, params)
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"non-finite loss after epoch {epoch + 1}", epoch=epoch + 1)
        losses.append(epoch_loss)
        if log is not None:
            log(f"epoch {epoch + 1:3d}  lr {lr:.2e}  loss {epoch_loss:.4f}")

    weights = _weights_from(block_cfg, params, run_mean, run_var)
    return TrainedModel(weights, params["head_w"], params["head_b"], init_loss, losses)


@dataclass
class MergeReport:
    max_abs_logit_err: float
    argmax_agreement: float
    accuracy_train_form: float
    accuracy_merged: float
    params_train: int
    params_inference: int
    macs_train: int
    macs_inference: int
    tol: float = 1e-9

    @property
    def passed(self):
        return self.max_abs_logit_err <= self.tol and self.argmax_agreement == 1.0

    def __str__(self):
        return "\n".join(
            [
                f"test accuracy (multi-branch) : {self.accuracy_train_form:.4f}",
                f"test accuracy (merged)       : {self.accuracy_merged:.4f}",
                f"max |logit difference|       : {self.max_abs_logit_err:.3e} (tol {self.tol:.0e})",
                f"argmax agreement             : {100 * self.argmax_agreement:.1f}%",
                f"params  train / inference    : {self.params_train} / {self.params_inference}",
                f"MACs    train / inference    : {self.macs_train} / {self.macs_inference}",
                f"merge check                  : {'PASS' if self.passed else 'FAIL'}",
            ]
        )


def merge_and_compare(model, x, labels, tol=1e-9):
    """Run the test images through both block forms and compare logits and predictions."""
    merged = reparameterize(model.weights)
    logits_a = model.logits(x)
    logits_b = model.logits(x, merged)
    pred_a = logits_a.argmax(axis=1)
    pred_b = logits_b.argmax(axis=1)
    cfg = model.weights.config
    hw = x.shape[2:]
    return MergeReport(
        max_abs_logit_err=float(np.max(np.abs(logits_a - logits_b))),
        argmax_agreement=float(np.mean(pred_a == pred_b)),
        accuracy_train_form=float(np.mean(pred_a == labels)),
        accuracy_merged=float(np.mean(pred_b == labels)),
        params_train=count_params(cfg, "train"),
        params_inference=count_params(cfg, "inference"),
        macs_train=count_macs(cfg, "train", hw),
        macs_inference=count_macs(cfg, "inference", hw),
        tol=tol,
    )
