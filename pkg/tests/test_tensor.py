import math

import numpy as np
import pytest

from fedmla.tensor import (
    AdamState,
    NonFiniteError,
    ShapeError,
    Tensor,
    adam_step,
    batch_norm,
    concat_channels,
    conv2d,
    cross_entropy,
    dice_loss,
    global_avg_pool,
    instance_norm,
    max_pool2x2,
    no_grad,
    pad_edge,
    relu,
    slice_channels,
    softmax,
    upsample_nearest2x,
)
from fedmla.tensor.gradcheck import CASES, check_gradients, run_gradcheck


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


class TestTensorCore:
    def test_backward_accumulates_on_shared_leaf(self):
        x = leaf([1.0, 2.0])
        y = (x * x + x).sum()
        y.backward()
        np.testing.assert_allclose(x.grad, [3.0, 5.0])

    def test_non_finite_output_is_an_error(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0])) * np.inf

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_deep_chain_has_no_recursion_limit(self):
        x = leaf([1.0])
        y = x
        for _ in range(5000):
            y = y + 1.0
        y.sum().backward()
        assert x.grad[0] == 1.0

    def test_forward_backward_deterministic(self):
        rng = np.random.default_rng(3)
        xs, ws = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
        runs = []
        for _ in range(2):
            x, w = leaf(xs), leaf(ws)
            conv2d(x, w, padding=1).sum().backward()
            runs.append((x.grad.tobytes(), w.grad.tobytes()))
        assert runs[0] == runs[1]


class TestConv2d:
    def test_constant_image_all_ones_kernel(self):
        out = conv2d(Tensor(np.full((1, 1, 5, 5), 2.0)), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(out.data, 18.0)

    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 4, 4))
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_weight_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 6, 6))
        err = check_gradients(lambda w: conv2d(Tensor(x), w, padding=1), [rng.normal(size=(3, 2, 3, 3))], rng)
        assert err < 1e-6

    @pytest.mark.parametrize("c,stride", [(1, 1), (4, 1), (4, 2)])
    def test_both_paths_agree_with_direct_sum(self, c, stride):
        rng = np.random.default_rng(c + stride)
        x, w, b = rng.normal(size=(2, c, 5, 6)), rng.normal(size=(3, c, 3, 3)), rng.normal(size=3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1, stride=stride).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ho, wo = (5 + 2 - 3) // stride + 1, (6 + 2 - 3) // stride + 1
        ref = np.zeros((2, 3, ho, wo))
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_edge_padding_replicates_border(self):
        x = np.arange(6.0).reshape(1, 1, 2, 3)
        out = pad_edge(Tensor(x), 1).data[0, 0]
        np.testing.assert_array_equal(out[0], [0, 0, 1, 2, 2])
        np.testing.assert_array_equal(out[:, 0], [0, 0, 3, 3])

    def test_edge_padding_keeps_affine_maps_affine(self):
        rng = np.random.default_rng(2)
        x, w = rng.normal(size=(1, 1, 5, 5)), rng.normal(size=(2, 1, 3, 3))
        a = conv2d(Tensor(x), Tensor(w), padding=1, pad_mode="edge").data
        b = conv2d(Tensor(3 * x + 2), Tensor(w), padding=1, pad_mode="edge").data
        shift = 2 * w.sum(axis=(1, 2, 3)).reshape(1, 2, 1, 1)
        np.testing.assert_allclose(b, 3 * a + shift, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


class TestNormalization:
    def test_batch_norm_train_standardizes(self):
        x = np.random.default_rng(0).normal(3.0, 2.0, size=(4, 3, 5, 5))
        out = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), None, None, True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-5)

    def test_batch_norm_running_stats_update(self):
        x = np.random.default_rng(0).normal(3.0, 2.0, size=(4, 2, 3, 3))
        rm, rv = np.zeros(2), np.ones(2)
        batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))

    def test_batch_norm_eval_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 2, 3, 3))
        out = batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2),
                         False, eps=0.0).data
        np.testing.assert_array_equal(out, x)

    def test_batch_norm_eval_needs_running_stats(self):
        with pytest.raises(RuntimeError):
            batch_norm(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), None, None, False)

    def test_instance_norm_moments(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 4)) * 5
        out = instance_norm(Tensor(x), eps=1e-5).data
        var = x.var(axis=(2, 3))
        np.testing.assert_allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=(2, 3)), var / (var + 1e-5), atol=1e-12)

    def test_instance_norm_constant_channel_is_zero(self):
        out = instance_norm(Tensor(np.full((1, 1, 3, 3), 4.0))).data
        np.testing.assert_array_equal(out, 0.0)

    def test_instance_norm_affine_invariance(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
        a = instance_norm(Tensor(x)).data
        b = instance_norm(Tensor(3 * x + 7)).data
        assert np.max(np.abs(a - b)) <= 1e-9


class TestElementaryOps:
    def test_max_pool_hand_example(self):
        x = leaf([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = max_pool2x2(x)
        assert out.data.item() == 4.0
        out.sum().backward()
        np.testing.assert_array_equal(x.grad, [[[[0, 0], [0, 1]]]])

    def test_max_pool_ties_go_to_first_in_scan_order(self):
        x = leaf(np.ones((1, 1, 2, 2)))
        max_pool2x2(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])

    def test_max_pool_odd_extent(self):
        with pytest.raises(ShapeError):
            max_pool2x2(Tensor(np.zeros((1, 1, 3, 2))))

    def test_global_avg_pool_constant(self):
        out = global_avg_pool(Tensor(np.full((2, 3, 4, 4), 2.5))).data
        np.testing.assert_array_equal(out, np.full((2, 3), 2.5))

    def test_softmax_rows_on_simplex(self):
        p = softmax(Tensor(np.random.default_rng(0).normal(size=(5, 4)) * 30)).data
        assert np.all(p > 0) and np.all(p < 1)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_upsample_concat_slice_shapes(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        up = upsample_nearest2x(x)
        assert up.shape == (1, 1, 4, 4) and up.data[0, 0, 1, 1] == 0.0 and up.data[0, 0, 3, 3] == 3.0
        cat = concat_channels(up, up)
        assert cat.shape == (1, 2, 4, 4)
        assert slice_channels(cat, 1, 2).shape == (1, 1, 4, 4)

    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])


class TestLosses:
    def test_dice_perfect_overlap(self):
        g = np.zeros((1, 1, 4, 4))
        g[0, 0, :2, :2] = 1
        assert abs(dice_loss(Tensor(g), g).item()) < 1e-4

    def test_dice_half_overlap(self):
        p, g = np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 4))
        p[0, 0, 0, :4] = 1
        g[0, 0, 0, 2:4] = 1
        g[0, 0, 1, 0:2] = 1
        assert abs(dice_loss(Tensor(p), g).item() - 0.5) < 1e-4

    def test_dice_disjoint(self):
        p, g = np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 4))
        p[0, 0, 0] = 1
        g[0, 0, 3] = 1
        expected = 1.0 - 1e-5 / (8 + 1e-5)
        assert dice_loss(Tensor(p), g).item() == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(1 - 1.25e-6, abs=1e-11)

    def test_dice_symmetric_on_binary(self):
        rng = np.random.default_rng(0)
        p, g = (rng.uniform(size=(2, 1, 5, 5)) > 0.5).astype(float), (rng.uniform(size=(2, 1, 5, 5)) > 0.5).astype(float)
        assert dice_loss(Tensor(p), g).item() == pytest.approx(dice_loss(Tensor(g), p).item(), abs=1e-15)

    def test_dice_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_loss(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))

    def test_cross_entropy_uniform(self):
        assert abs(cross_entropy(Tensor(np.full((4, 3), 1 / 3)), [0, 1, 2, 1]).item() - math.log(3)) < 1e-9

    def test_cross_entropy_one_hot(self):
        assert cross_entropy(Tensor(np.eye(3)), [0, 1, 2]).item() == 0.0

    def test_cross_entropy_floor(self):
        assert cross_entropy(Tensor(np.array([[1.0, 0.0]])), [1]).item() == pytest.approx(-math.log(1e-12))

    def test_cross_entropy_label_range(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.full((1, 2), 0.5)), [2])


class TestAdam:
    def test_first_step_is_lr(self):
        p = {"w": np.array([1.0])}
        adam_step(p, {"w": np.array([1.0])}, AdamState(), 0.1)
        assert p["w"][0] == pytest.approx(0.9, abs=1e-6)

    def test_zero_grad_leaves_param(self):
        p = {"w": np.array([2.0])}
        adam_step(p, {"w": np.array([0.0])}, AdamState(), 0.1)
        assert p["w"][0] == 2.0

    def test_moments_decay_on_zero_grad(self):
        p, st = {"w": np.array([2.0])}, AdamState()
        adam_step(p, {"w": np.array([1.0])}, st, 0.1)
        m1, v1 = st.m["w"].copy(), st.v["w"].copy()
        adam_step(p, {"w": np.array([0.0])}, st, 0.1)
        np.testing.assert_allclose(st.m["w"], 0.9 * m1)
        np.testing.assert_allclose(st.v["w"], 0.999 * v1)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.1)

    def test_deterministic(self):
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(5)
            p, st = {"w": rng.normal(size=4)}, AdamState()
            for _ in range(5):
                adam_step(p, {"w": rng.normal(size=4)}, st, 0.01)
            outs.append(p["w"].tobytes())
        assert outs[0] == outs[1]


class TestGradcheckSuite:
    def test_every_op_passes(self):
        reports = run_gradcheck(n_shapes=5, seed=11)
        failing = [r.name for r in reports if not r.passed]
        assert not failing, failing
        assert {r.name for r in reports} == set(CASES)

    def test_corrupted_backward_is_reported_by_name(self, monkeypatch):
        from fedmla.tensor import ops

        real = ops.relu

        def bad_relu(x):
            out = real(x)
            inner = out._backward
            out._backward = lambda g: tuple(2.0 * gi for gi in inner(g))
            return out

        monkeypatch.setattr(ops, "relu", bad_relu)
        reports = run_gradcheck({"relu": CASES["relu"]}, n_shapes=3)
        assert reports[0].name == "relu" and not reports[0].passed
