import numpy as np
import pytest

from erohprf.block import (
    BranchParams,
    HPRFBConfig,
    HPRFBWeights,
    RFType,
    backward,
    branch_geometry,
    branch_kernel_shape,
    forward_inference,
    forward_train,
    init_weights,
)
from erohprf.errors import ConfigError, GeometryError, ShapeError
from erohprf.gradcheck import check_block, random_bn_weights
from erohprf.reparam import MergedConv
from erohprf.tensor import BNParams, ConvGeometry, conv2d_backward_input, conv2d_backward_weight, conv2d_forward, pad_kernel

from oracles import conv_loops, shape_rule


def unit_bn(c=1):
    # var + eps == 1 exactly, so gamma / sqrt(var + eps) == 1 exactly
    return BNParams(np.zeros(c), np.full(c, 0.75), np.ones(c), np.zeros(c), eps=0.25)


def make_weights(config, kernels, bias=0.0):
    branches = []
    for scale, t in config.branch_keys():
        k = np.asarray(kernels[(scale, t.value)], dtype=np.float64)
        k = k.reshape((config.out_channels, config.group_in_channels) + branch_kernel_shape(scale, t))
        branches.append(BranchParams(scale, t, k, np.full(config.out_channels, bias), unit_bn(config.out_channels)))
    return HPRFBWeights(config, tuple(branches))


class TestShapes:
    @pytest.mark.parametrize("scale, t, want", [(5, "VR", (5, 3)), (3, "VC", (3, 1)), (7, "S", (7, 7)), (7, "HR", (5, 7)), (9, "HC", (1, 9))])
    def test_branch_kernel_shape(self, scale, t, want):
        assert branch_kernel_shape(scale, t) == want

    @pytest.mark.parametrize("scale", [1, 2, 4, 0, -3])
    def test_invalid_scale(self, scale):
        with pytest.raises(GeometryError):
            branch_kernel_shape(scale, "S")

    def test_all_types_match_rule(self):
        for i in (3, 5, 7, 9, 11):
            for t in RFType:
                assert branch_kernel_shape(i, t) == shape_rule(i, t.value)

    def test_branch_geometry_aligns_with_merged(self):
        cfg = HPRFBConfig(stride=2)
        for scale, t in cfg.branch_keys():
            g = branch_geometry(cfg, scale, t)
            kh, kw = branch_kernel_shape(scale, t)
            assert (g.pad_h, g.pad_w) == (kh // 2, kw // 2)
            assert g.stride == 2


class TestConfig:
    def test_defaults(self):
        cfg = HPRFBConfig()
        assert cfg.scales == (3, 5, 7) and cfg.kernel_size == 7
        assert len(cfg.branch_keys()) == 15
        assert cfg.branch_keys()[:5] == [(3, t) for t in RFType]

    def test_types_sorted_canonically(self):
        assert HPRFBConfig(rf_types=("S", "hc")).rf_types == (RFType.HC, RFType.S)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"scales": ()},
            {"scales": (4,)},
            {"scales": (1, 3)},
            {"scales": (3, 3)},
            {"rf_types": ()},
            {"rf_types": ("XX",)},
            {"in_channels": 3, "out_channels": 4, "groups": 2},
            {"bn_eps": 0.0},
            {"stride": 0},
        ],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            HPRFBConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = HPRFBConfig(scales=(5, 3), rf_types=("VR", "S"), in_channels=4, out_channels=8, groups=2, stride=2, bn_eps=1e-3)
        assert HPRFBConfig.from_dict(cfg.to_dict()) == cfg


class TestWeights:
    def test_branch_shape_enforced(self):
        with pytest.raises(ShapeError):
            BranchParams(5, "VR", np.ones((1, 1, 3, 5)), np.zeros(1), unit_bn())

    def test_branch_order_enforced(self):
        cfg = HPRFBConfig(scales=(3,), rf_types=("VC", "S"))
        w = init_weights(cfg)
        with pytest.raises(ConfigError):
            HPRFBWeights(cfg, w.branches[::-1])
        with pytest.raises(ConfigError):
            HPRFBWeights(cfg, w.branches[:1])

    def test_init_deterministic(self):
        cfg = HPRFBConfig(in_channels=2, out_channels=3)
        a, b = init_weights(cfg, seed=5), init_weights(cfg, seed=5)
        for x, y in zip(a.branches, b.branches):
            assert np.array_equal(x.kernel, y.kernel)
        assert not np.array_equal(a.branches[0].kernel, init_weights(cfg, seed=6).branches[0].kernel)

    def test_init_bn_contract(self):
        w = init_weights(HPRFBConfig(out_channels=4, in_channels=4))
        for b in w.branches:
            assert np.all(b.bn.gamma == 1) and np.all(b.bn.var == 1)
            assert np.all(b.bn.mean == 0) and np.all(b.bn.beta == 0) and np.all(b.bias == 0)
            np.testing.assert_allclose(b.bn.scale(), 1 / np.sqrt(1 + w.config.bn_eps), rtol=1e-15)

    def test_init_fan_in_bound(self):
        # (5, VR) with 4 input channels per group: fan-in 4 * 5 * 3 = 60
        cfg = HPRFBConfig(scales=(5,), rf_types=("VR",), in_channels=4, out_channels=64)
        k = init_weights(cfg, seed=0).branches[0].kernel
        bound = 1 / np.sqrt(60)
        assert np.abs(k).max() <= bound
        assert np.abs(k).max() > 0.99 * bound
        assert abs(k.mean()) < 0.05 * bound


class TestForwardTrain:
    def test_identity_branch(self):
        cfg = HPRFBConfig(scales=(3,), rf_types=("S",))
        w = make_weights(cfg, {(3, "S"): [[0, 0, 0], [0, 1, 0], [0, 0, 0]]})
        x = np.random.default_rng(0).normal(size=(2, 1, 5, 6))
        np.testing.assert_array_equal(forward_train(x, w), x)

    def test_opposite_kernels_cancel(self):
        cfg = HPRFBConfig(scales=(3,), rf_types=("VC", "VR"))
        k = np.array([0.3, -1.2, 2.0])
        w = make_weights(cfg, {(3, "VC"): k, (3, "VR"): -k}, bias=0.7)
        x = np.random.default_rng(1).normal(size=(1, 1, 6, 6))
        np.testing.assert_allclose(forward_train(x, w), 1.4, rtol=0, atol=1e-15)

    def test_five_branch_scale3_example(self):
        cfg = HPRFBConfig(scales=(3,))
        w = make_weights(
            cfg,
            {
                (3, "VC"): [1, 2, 3],
                (3, "HC"): [4, 5, 6],
                (3, "VR"): [0.5, 0.5, 0.5],
                (3, "HR"): [0, 1, 0],
                (3, "S"): np.ones(9),
            },
            bias=0.1,
        )
        merged = np.array([[1, 2.5, 1], [5, 9.5, 7], [1, 4.5, 1]], dtype=float).reshape(1, 1, 3, 3)
        x = np.random.default_rng(2).normal(size=(1, 1, 6, 5))
        np.testing.assert_allclose(forward_train(x, w), conv_loops(x, merged, [0.5], 1, 1, 1), rtol=1e-13, atol=1e-13)

    def test_matches_loop_oracle_per_branch(self):
        cfg = HPRFBConfig(scales=(3, 5), in_channels=2, out_channels=4, groups=2, stride=2)
        w = random_bn_weights(init_weights(cfg, seed=3), seed=4)
        x = np.random.default_rng(5).normal(size=(1, 2, 7, 8))
        want = 0.0
        for b in w.branches:
            kh, kw = b.kernel.shape[2:]
            z = conv_loops(x, b.kernel, b.bias, 2, kh // 2, kw // 2, 2)
            want = want + (z - b.bn.mean[None, :, None, None]) * b.bn.scale()[None, :, None, None] + b.bn.beta[None, :, None, None]
        np.testing.assert_allclose(forward_train(x, w), want, rtol=1e-12, atol=1e-12)

    def test_branch_order_independence(self):
        cfg = HPRFBConfig(scales=(3, 5, 7), in_channels=2, out_channels=2)
        w = random_bn_weights(init_weights(cfg, seed=0), seed=1)
        x = np.random.default_rng(0).uniform(-1, 1, size=(2, 2, 9, 9))
        parts = [forward_train(x, HPRFBWeights(HPRFBConfig(scales=(b.scale,), rf_types=(b.rf_type,), in_channels=2, out_channels=2), (b,))) for b in w.branches]
        ref = forward_train(x, w)
        for perm_seed in range(5):
            order = np.random.default_rng(perm_seed).permutation(len(parts))
            total = sum(parts[i] for i in order)
            np.testing.assert_allclose(total, ref, rtol=1e-12, atol=1e-12)

    def test_wrong_channels(self):
        with pytest.raises(ShapeError):
            forward_train(np.ones((1, 2, 5, 5)), init_weights(HPRFBConfig()))


class TestForwardInference:
    def test_identity(self):
        k = np.zeros((1, 1, 7, 7))
        k[0, 0, 3, 3] = 1
        x = np.random.default_rng(0).normal(size=(1, 1, 8, 8))
        np.testing.assert_array_equal(forward_inference(x, MergedConv(k, np.zeros(1))), x)

    def test_zero_kernel_gives_bias(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
        out = forward_inference(x, MergedConv(np.zeros((2, 3, 5, 5)), np.array([1.5, -2.0])))
        np.testing.assert_array_equal(out[:, 0], 1.5)
        np.testing.assert_array_equal(out[:, 1], -2.0)


class TestBackward:
    def test_zero_delta(self):
        cfg = HPRFBConfig(in_channels=2, out_channels=2)
        w = random_bn_weights(init_weights(cfg), 0)
        x = np.random.default_rng(0).normal(size=(1, 2, 6, 6))
        g = backward(x, w, np.zeros((1, 2, 6, 6)))
        assert not g.d_input.any()
        for arrs in (g.d_kernel, g.d_bias, g.d_gamma, g.d_beta):
            assert len(arrs) == 15 and not any(a.any() for a in arrs)

    def test_shapes_mirror_parameters(self):
        cfg = HPRFBConfig(in_channels=4, out_channels=2, groups=2, stride=2)
        w = init_weights(cfg)
        x = np.ones((1, 4, 7, 7))
        g = backward(x, w, np.ones(forward_train(x, w).shape))
        assert g.d_input.shape == x.shape
        for b, dk, db, dg, dbeta in zip(w.branches, g.d_kernel, g.d_bias, g.d_gamma, g.d_beta):
            assert dk.shape == b.kernel.shape and db.shape == dg.shape == dbeta.shape == b.bias.shape

    def test_single_branch_reduces_to_tensor_core(self):
        cfg = HPRFBConfig(scales=(3,), rf_types=("S",), in_channels=2, out_channels=3)
        rng = np.random.default_rng(1)
        k = rng.normal(size=(3, 2, 3, 3))
        w = HPRFBWeights(cfg, (BranchParams(3, "S", k, np.zeros(3), unit_bn(3)),))
        x, d = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(2, 3, 5, 5))
        g = backward(x, w, d)
        geom = ConvGeometry(pad_h=1, pad_w=1)
        dk, db = conv2d_backward_weight(x, d, geom, k.shape)
        assert np.array_equal(g.d_input, conv2d_backward_input(d, k, geom, x.shape))
        assert np.array_equal(g.d_kernel[0], dk) and np.array_equal(g.d_bias[0], db)

    def test_input_grad_is_merged_kernel_transpose(self):
        # dL/dX = delta (transposed-conv) sum of BN-scaled, padded kernels
        cfg = HPRFBConfig(in_channels=2, out_channels=2, stride=2)
        w = random_bn_weights(init_weights(cfg, seed=2), seed=3)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 9, 9))
        d = rng.normal(size=forward_train(x, w).shape)
        summed = sum(pad_kernel(b.kernel * b.bn.scale()[:, None, None, None], 7, 7) for b in w.branches)
        want = conv2d_backward_input(d, summed, ConvGeometry(stride=2, pad_h=3, pad_w=3), x.shape)
        np.testing.assert_allclose(backward(x, w, d).d_input, want, rtol=1e-12, atol=1e-12)

    def test_gradient_independence(self):
        cfg = HPRFBConfig(in_channels=2, out_channels=2, groups=2)
        w = random_bn_weights(init_weights(cfg, seed=5), seed=6)
        rng = np.random.default_rng(7)
        x, d = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(2, 2, 6, 6))
        joint = backward(x, w, d)
        for n, b in enumerate(w.branches):
            alone_cfg = HPRFBConfig(scales=(b.scale,), rf_types=(b.rf_type,), in_channels=2, out_channels=2, groups=2)
            alone = backward(x, HPRFBWeights(alone_cfg, (b,)), d)
            assert np.array_equal(alone.d_kernel[0], joint.d_kernel[n])
            assert np.array_equal(alone.d_bias[0], joint.d_bias[n])
            assert np.array_equal(alone.d_gamma[0], joint.d_gamma[n])
            assert np.array_equal(alone.d_beta[0], joint.d_beta[n])

    @pytest.mark.parametrize("stride, groups", [(1, 1), (2, 2)])
    def test_finite_differences_small_bag(self, stride, groups):
        cfg = HPRFBConfig(scales=(3, 5), in_channels=2, out_channels=2, groups=groups, stride=stride)
        w = random_bn_weights(init_weights(cfg, seed=8), seed=9)
        rng = np.random.default_rng(10)
        x = rng.uniform(-1, 1, size=(2, 2, 6, 7))
        d = rng.normal(size=forward_train(x, w).shape)
        errs = check_block(w, x, d)
        assert max(errs.values()) < 1e-5, errs
