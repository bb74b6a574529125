"""Cost accounting and wall-clock latency of the two block forms."""

import time
from dataclasses import dataclass

import numpy as np

from .block import forward_inference, forward_train, init_weights
from .reparam import count_macs, count_params, reparameterize

__all__ = ["CostReport", "cost_report", "measure_latency"]


@dataclass
class CostReport:
    params_train: int
    params_inference: int
    macs_train: int
    macs_inference: int
    latency_train: float = None
    latency_inference: float = None

    def lines(self):
        out = [
            f"params  train {self.params_train:>12d}   inference {self.params_inference:>12d}",
            f"MACs    train {self.macs_train:>12d}   inference {self.macs_inference:>12d}",
        ]
        if self.latency_train is not None:
            out.append(
                f"latency train {1e3 * self.latency_train:>10.3f}ms   inference {1e3 * self.latency_inference:>10.3f}ms"
                "   (median per image)"
            )
        return out


def cost_report(config, hw):
    return CostReport(
        params_train=count_params(config, "train"),
        params_inference=count_params(config, "inference"),
        macs_train=count_macs(config, "train", hw),
        macs_inference=count_macs(config, "inference", hw),
    )


def measure_latency(config, hw, runs=100, seed=0, dtype=np.float32):
    """Median seconds per single-image forward of the multi-branch and merged forms.

    The two forms are timed alternately so slow drift in machine load hits
    both equally.
    """
    weights = init_weights(config, seed=seed).astype(dtype)
    merged = reparameterize(weights)
    x = np.random.default_rng(seed).uniform(-1, 1, size=(1, config.in_channels) + tuple(hw)).astype(dtype)
    forward_train(x, weights)
    forward_inference(x, merged)
    t_train, t_merged = [], []
    for _ in range(runs):
        t0 = time.perf_counter()
        forward_train(x, weights)
        t1 = time.perf_counter()
        forward_inference(x, merged)
        t2 = time.perf_counter()
        t_train.append(t1 - t0)
        t_merged.append(t2 - t1)
    return float(np.median(t_train)), float(np.median(t_merged))
