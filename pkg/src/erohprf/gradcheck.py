"""Central finite-difference checks of the analytic gradients."""

import numpy as np

from .block import HPRFBWeights, BranchParams, backward, forward_train
from .tensor import BNParams

__all__ = ["numerical_gradient", "relative_error", "random_bn_weights", "check_block", "check_network"]


def numerical_gradient(f, arr, h=1e-5):
    """Central difference of scalar ``f()`` with respect to every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + h
        f_plus = f()
        arr[i] = orig - h
        f_minus = f()
        arr[i] = orig
        grad[i] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    a = np.concatenate([np.ravel(v) for v in analytic]) if isinstance(analytic, list) else np.ravel(analytic)
    n = np.concatenate([np.ravel(v) for v in numeric]) if isinstance(numeric, list) else np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def random_bn_weights(weights, seed=0):
    """Copy of ``weights`` with random conv biases and non-trivial BN statistics."""
    rng = np.random.default_rng(seed)
    branches = []
    for b in weights.branches:
        c = b.bias.shape[0]
        bn = BNParams(
            mean=rng.normal(0.0, 0.3, c),
            var=rng.uniform(0.5, 2.0, c),
            gamma=rng.uniform(0.5, 1.5, c),
            beta=rng.normal(0.0, 0.3, c),
            eps=b.bn.eps,
        )
        branches.append(BranchParams(b.scale, b.rf_type, b.kernel.copy(), rng.normal(0.0, 0.3, c), bn))
    return HPRFBWeights(weights.config, tuple(branches))


def check_block(weights, x, delta, h=1e-5):
    """Relative error per parameter class of :func:`erohprf.block.backward`.

    The loss is ``sum(forward_train(x) * delta)`` so ``delta`` is its output
    gradient.  Arrays inside ``weights`` are perturbed in place and restored.
    """
    x = np.array(x, dtype=np.float64)
    bundle = backward(x, weights, delta)

    def loss():
        return float(np.sum(forward_train(x, weights) * delta))

    numeric = {"kernel": [], "bias": [], "gamma": [], "beta": []}
    for b in weights.branches:
        numeric["kernel"].append(numerical_gradient(loss, b.kernel, h))
        numeric["bias"].append(numerical_gradient(loss, b.bias, h))
        numeric["gamma"].append(numerical_gradient(loss, b.bn.gamma, h))
        numeric["beta"].append(numerical_gradient(loss, b.bn.beta, h))
    d_x = numerical_gradient(loss, x, h)
    return {
        "kernel": relative_error(bundle.d_kernel, numeric["kernel"]),
        "bias": relative_error(bundle.d_bias, numeric["bias"]),
        "gamma": relative_error(bundle.d_gamma, numeric["gamma"]),
        "beta": relative_error(bundle.d_beta, numeric["beta"]),
        "input": relative_error(bundle.d_input, d_x),
    }


def check_network(x, labels, config, params, h=1e-5, batch_stats=True, frozen=None):
    """Relative error per parameter class through the demo network and its softmax-CE loss."""
    from .demo import network_gradients, network_loss

    x = np.array(x, dtype=np.float64)
    _, grads, _ = network_gradients(x, labels, config, params, batch_stats, frozen)

    def loss():
        return network_loss(x, labels, config, params, batch_stats, frozen)

    classes = {"kernel": "k", "bias": "b", "gamma": "g", "beta": "t", "head": "head"}
    out = {}
    for name, prefix in classes.items():
        keys = [k for k in params if k.startswith(prefix) and (prefix == "head" or k[1:].isdigit())]
        analytic = [grads[k] for k in keys]
        numeric = [numerical_gradient(loss, params[k], h) for k in keys]
        if name == "bias" and batch_stats:
            # batch statistics cancel a constant shift, so the exact gradient is 0
            out["bias_abs"] = float(max(np.max(np.abs(v)) for v in analytic + numeric))
            continue
        out[name] = relative_error(analytic, numeric)
    out["input"] = relative_error(grads["input"], numerical_gradient(loss, x, h))
    return out
