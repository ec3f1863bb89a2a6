import numpy as np
import pytest

from fedmla.segnet import BlockKind, NetConfig, SegNet, build_ibn_segnet, build_segnet, forward
from fedmla.tensor import ShapeError, Tensor, dice_loss, adam_step, AdamState, instance_norm
from fedmla.tensor.gradcheck import check_gradients


def small(bin_depth=2, kind=BlockKind.BIN, levels=3, base=4):
    return NetConfig(levels=levels, base_channels=base, bin_depth=bin_depth, block_kind=kind)


def trained_buffers(net, rng, steps=2):
    # a couple of train-mode passes give the BN buffers non-trivial values
    for _ in range(steps):
        net.forward(rng.normal(size=(4, 1, 16, 16)) * 2 + 1, training=True)


class TestConfig:
    def test_widths_double(self):
        assert NetConfig(levels=3, base_channels=8).widths == [8, 16, 32]

    def test_bin_depth_range(self):
        with pytest.raises(ValueError):
            NetConfig(levels=3, bin_depth=4)

    def test_input_size_must_divide(self):
        net = build_segnet(small())
        with pytest.raises(ShapeError):
            net.forward(np.zeros((1, 1, 10, 10)))


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        a, b = build_segnet(small(), 7).param_set(), build_segnet(small(), 7).param_set()
        assert list(a) == list(b)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_plain_and_bin_share_signature(self):
        a = build_segnet(small(0, BlockKind.PLAIN), 1).param_set()
        b = build_segnet(small(3), 1).param_set()
        assert [(k, v.shape) for k, v in a.items()] == [(k, v.shape) for k, v in b.items()]

    def test_ibn_param_count_differs_only_in_bn_halves(self):
        cfg = small(2)
        bin_ps, ibn_ps = build_segnet(cfg).param_set(), build_ibn_segnet(cfg).param_set()
        assert list(bin_ps) == list(ibn_ps)
        diff = 0
        for k in bin_ps:
            if bin_ps[k].shape != ibn_ps[k].shape:
                assert ".bn." in k and k.startswith("enc")
                diff += bin_ps[k].size - ibn_ps[k].size
        # each IBN unit keeps C - C//2 BN channels; 4 tensors (gamma, beta, mean, var) per unit
        expected = sum(4 * (w // 2) * 2 for w in cfg.widths[:cfg.bin_depth])
        assert diff == expected

    def test_output_shape_and_range(self):
        out = forward(build_segnet(small()), np.random.default_rng(0).normal(size=(2, 1, 16, 16)) * 4, "eval")
        assert out.shape == (2, 1, 16, 16)
        assert np.all((out.data >= 0) & (out.data <= 1))

    def test_two_structures_two_channels(self):
        cfg = NetConfig(levels=3, base_channels=4, bin_depth=1, out_channels=2)
        assert build_segnet(cfg).forward(np.zeros((1, 1, 8, 8))).shape == (1, 2, 8, 8)

    def test_plain_net_graph_has_no_instance_norm(self):
        net = build_segnet(small(0, BlockKind.PLAIN))
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 8, 8)), requires_grad=True)
        out = net.forward(x)
        ops, stack, seen = set(), [out], set()
        while stack:
            n = stack.pop()
            if id(n) in seen:
                continue
            seen.add(id(n))
            ops.add(n.op)
            stack.extend(n._parents)
        assert "instance_norm" not in ops and "batch_norm" in ops


class TestStyleInvariance:
    def test_affine_input_map_leaves_eval_output(self):
        rng = np.random.default_rng(0)
        net = build_segnet(small(1))
        trained_buffers(net, rng)
        x = rng.normal(size=(2, 1, 16, 16))
        a = net.forward(x).data
        b = net.forward(2 * x + 5).data
        assert np.max(np.abs(a - b)) <= 1e-6

    def test_plain_net_is_not_invariant(self):
        rng = np.random.default_rng(0)
        net = build_segnet(small(0, BlockKind.PLAIN))
        trained_buffers(net, rng)
        x = rng.normal(size=(2, 1, 16, 16))
        assert np.max(np.abs(net.forward(x).data - net.forward(2 * x + 5).data)) > 1e-3

    def test_ibn_in_half_zeroes_constant_input(self):
        rng = np.random.default_rng(0)
        net = build_ibn_segnet(small(1))
        trained_buffers(net, rng)
        unit = net.encoder[0][0]
        # zero kernel: the conv output is the bias, constant over each channel
        net.params["enc0.sub0.conv.weight"].data[...] = 0.0
        net.params["enc0.sub0.conv.bias"].data[...] = rng.normal(size=unit.cout)
        h = unit(net, Tensor(rng.normal(size=(1, 1, 8, 8))), training=False).data
        half = unit.cout // 2
        np.testing.assert_array_equal(h[:, :half], 0.0)
        assert np.any(h[:, half:] != 0.0)


class TestTraining:
    @pytest.mark.parametrize("seed", range(10))
    def test_one_step_lowers_dice_loss(self, seed):
        rng = np.random.default_rng(seed)
        net = build_segnet(small(2), seed)
        x = rng.normal(size=(1, 1, 16, 16))
        y = np.zeros((1, 1, 16, 16))
        y[0, 0, 4:12, 5:11] = 1
        before = dice_loss(net.forward(x, training=True), y)
        net.zero_grad()
        before.backward()
        adam_step(net.trainable(), net.gradients(), AdamState(), 0.01)
        after = dice_loss(net.forward(x, training=True), y)
        assert after.item() < before.item()

    def test_end_to_end_gradcheck_on_sampled_params(self):
        rng = np.random.default_rng(0)
        net = build_ibn_segnet(NetConfig(levels=2, base_channels=2, bin_depth=1))
        x = rng.normal(size=(2, 1, 4, 4))
        for name in ("enc0.sub0.conv.weight", "enc0.sub1.bn.weight", "head.weight"):
            base = net.params[name].data.copy()

            def fn(p, name=name):
                net.params[name] = p
                return net.forward(x, training=True)

            err = check_gradients(fn, [base], rng)
            net.params[name] = Tensor(base, requires_grad=True)
            assert err < 1e-4, name

    def test_load_param_set_validates(self):
        net = build_segnet(small())
        ps = net.param_set()
        ps["head.bias"] = np.zeros(3)
        with pytest.raises(ShapeError):
            net.load_param_set(ps)
        with pytest.raises(ValueError):
            net.load_param_set({"x": np.zeros(1)})
