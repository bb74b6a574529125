import numpy as np
import pytest

from erohprf import demo
from erohprf.demo import TrainConfig, generate_dataset, init_network, merge_and_compare, network_params, train
from erohprf.errors import TrainingError
from erohprf.gradcheck import check_network, random_bn_weights
from erohprf.tensor import conv2d_forward

SMALL = dict(channels=2, scales=(3, 5), rf_types=("VC", "HC", "S"), batch_size=16)


class TestDataset:
    def test_balanced(self):
        ds = generate_dataset()
        assert ds.images.shape == (512, 1, 16, 16)
        assert np.bincount(ds.labels).tolist() == [256, 256]

    def test_split_sizes_partition(self):
        ds = generate_dataset(n=100)
        idx = np.concatenate([ds.train_idx, ds.val_idx, ds.test_idx])
        assert sorted(idx.tolist()) == list(range(100))
        assert (len(ds.train_idx), len(ds.val_idx), len(ds.test_idx)) == (70, 15, 15)

    def test_deterministic(self):
        a, b = generate_dataset(seed=3), generate_dataset(seed=3)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.images, generate_dataset(seed=4).images)

    def test_bar_orientation(self):
        ds = generate_dataset(n=20, noise=0.0)
        for img, y in zip(ds.images[:, 0], ds.labels):
            full = img.sum(axis=1) if y == 0 else img.sum(axis=0)
            assert full.max() == 16.0 and full.sum() == 16.0

    def test_noise_free_separable_by_edge_filters(self):
        ds = generate_dataset(n=64, noise=0.0, seed=5)
        vert = np.array([-1.0, 2.0, -1.0]).reshape(1, 1, 3, 1)
        horiz = vert.reshape(1, 1, 1, 3)
        score = conv2d_forward(ds.images, vert).max(axis=(1, 2, 3)) - conv2d_forward(ds.images, horiz).max(axis=(1, 2, 3))
        assert np.all((score > 0) == (ds.labels == 0))

    @pytest.mark.parametrize("n, noise", [(0, 0.1), (7, 0.1), (10, 1.0), (10, -0.1)])
    def test_invalid(self, n, noise):
        with pytest.raises(ValueError):
            generate_dataset(n=n, noise=noise)


def test_lr_schedule():
    cfg = TrainConfig()
    assert [cfg.lr_at(e) for e in (0, 7, 8, 16)] == pytest.approx([0.05, 0.05, 0.01, 0.002])


class TestTraining:
    def test_deterministic(self):
        ds = generate_dataset(n=64, seed=1)
        cfg = TrainConfig(epochs=2, **SMALL)
        a, b = train(cfg, ds), train(cfg, ds)
        assert a.epoch_losses == b.epoch_losses
        assert np.array_equal(a.head_w, b.head_w)

    def test_zero_lr_freezes_learnables(self):
        ds = generate_dataset(n=64, seed=1)
        cfg = TrainConfig(epochs=3, lr=0.0, **SMALL)
        model = train(cfg, ds)
        w0, hw0, hb0 = init_network(cfg)
        assert np.array_equal(model.head_w, hw0) and np.array_equal(model.head_b, hb0)
        for a, b in zip(model.weights.branches, w0.branches):
            assert np.array_equal(a.kernel, b.kernel) and np.array_equal(a.bias, b.bias)
            assert np.array_equal(a.bn.gamma, b.bn.gamma) and np.array_equal(a.bn.beta, b.bn.beta)

    def test_first_epoch_reduces_loss(self):
        ds = generate_dataset(seed=7)
        model = train(TrainConfig(epochs=1), ds)
        assert model.epoch_losses[0] < model.init_loss

    def test_log_lines(self):
        lines = []
        train(TrainConfig(epochs=2, **SMALL), generate_dataset(n=32), log=lines.append)
        assert len(lines) == 2 and lines[0].startswith("epoch   1")

    def test_divergence_raises(self, monkeypatch):
        real = demo.network_gradients

        def poisoned(*args, **kwargs):
            loss, grads, caches = real(*args, **kwargs)
            return float("nan"), grads, caches

        monkeypatch.setattr(demo, "network_gradients", poisoned)
        with pytest.raises(TrainingError) as info:
            train(TrainConfig(epochs=3, **SMALL), generate_dataset(n=32))
        assert info.value.epoch == 1

    def test_merge_agreement_untrained(self):
        cfg = TrainConfig(**SMALL)
        w, hw, hb = init_network(cfg)
        model = demo.TrainedModel(random_bn_weights(w, seed=3), hw, hb)
        x, y = generate_dataset(n=40).split("test")
        report = merge_and_compare(model, x, y)
        assert report.passed and report.max_abs_logit_err <= 1e-9
        assert report.params_inference <= report.params_train and report.macs_inference <= report.macs_train
        assert "PASS" in str(report)


class TestNetworkGradients:
    def setup_method(self):
        cfg = TrainConfig(**SMALL)
        w, hw, hb = init_network(cfg, seed=9)
        self.config = cfg.block_config()
        self.frozen = random_bn_weights(w, seed=10)
        self.params = {k: v.copy() for k, v in network_params(self.frozen, hw, hb).items()}
        x, y = generate_dataset(n=8, seed=11).split("train")
        self.x, self.y = x[:, :, :8, :8], y

    def test_batch_stats_mode(self):
        r = check_network(self.x, self.y, self.config, self.params)
        assert r["bias_abs"] < 1e-9
        for k in ("kernel", "gamma", "beta", "head", "input"):
            assert r[k] < 1e-4, (k, r[k])

    def test_frozen_mode(self):
        r = check_network(self.x, self.y, self.config, self.params, batch_stats=False, frozen=self.frozen)
        for k in ("kernel", "bias", "gamma", "beta", "head", "input"):
            assert r[k] < 1e-4, (k, r[k])
