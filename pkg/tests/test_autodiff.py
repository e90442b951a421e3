"""Gradient and semantics tests for the reverse-mode engine."""

import numpy as np
import pytest

from mtlaug import autodiff as ad
from mtlaug.errors import ShapeError, UsageError, ValidationError

from _oracles import finite_difference_grad, max_rel_error

RNG = np.random.default_rng(1234)
TOL = 1e-4


def check_grad(build, x0, tol=TOL, h=1e-4):
    """Compare analytic input gradient of build(x) against central differences.

    build(Tensor) -> scalar Tensor; runs in float64 shadow mode.
    """
    with ad.precision("float64"):
        x = ad.Tensor(np.asarray(x0, dtype=np.float64), requires_grad=True)
        loss = build(x)
        ad.backward(loss)
        analytic = x.grad.copy()

        def f(arr):
            with ad.precision("float64"):
                return build(ad.Tensor(arr)).item()

        numeric = finite_difference_grad(f, np.asarray(x0, dtype=np.float64), h=h)
    err = max_rel_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: {err:.3e}"


def weighted_sum(t, weights):
    return ad.reduce_sum(ad.mul(t, ad.Tensor(weights)))


class TestElementwise:
    def test_relu_values_and_mask(self):
        x = ad.Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        y = ad.relu(x)
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
        ad.backward(ad.reduce_sum(y))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    @pytest.mark.parametrize("op", [ad.sigmoid, ad.tanh])
    def test_unary_grads(self, op):
        for _ in range(5):
            x0 = RNG.normal(size=RNG.integers(2, 6, size=2))
            w = RNG.normal(size=x0.shape)
            check_grad(lambda t: weighted_sum(op(t), w), x0)

    def test_relu_grad_away_from_kink(self):
        for _ in range(5):
            x0 = RNG.uniform(0.2, 1.5, size=(3, 4)) * RNG.choice([-1.0, 1.0], size=(3, 4))
            w = RNG.normal(size=x0.shape)
            check_grad(lambda t: weighted_sum(ad.relu(t), w), x0)

    def test_add_mul_broadcast_grads(self):
        a0 = RNG.normal(size=(4, 3))
        b0 = RNG.normal(size=(3,))
        w = RNG.normal(size=(4, 3))
        check_grad(lambda t: weighted_sum(ad.add(t, ad.Tensor(b0)), w), a0)
        check_grad(lambda t: weighted_sum(ad.mul(ad.Tensor(a0), t), w), b0)

    def test_scale_and_sub(self):
        x0 = RNG.normal(size=(5,))
        w = RNG.normal(size=(5,))
        check_grad(lambda t: weighted_sum(ad.scale(t, -2.5), w), x0)
        check_grad(lambda t: weighted_sum(ad.sub(ad.Tensor(np.ones(5)), t), w), x0)


class TestStructural:
    def test_matmul_grads_2d_and_3d(self):
        a0 = RNG.normal(size=(4, 3))
        b0 = RNG.normal(size=(3, 2))
        w = RNG.normal(size=(4, 2))
        check_grad(lambda t: weighted_sum(ad.matmul(t, ad.Tensor(b0)), w), a0)
        check_grad(lambda t: weighted_sum(ad.matmul(ad.Tensor(a0), t), w), b0)
        a3 = RNG.normal(size=(2, 4, 3))
        w3 = RNG.normal(size=(2, 4, 2))
        check_grad(lambda t: weighted_sum(ad.matmul(t, ad.Tensor(b0)), w3), a3)
        check_grad(lambda t: weighted_sum(ad.matmul(ad.Tensor(a3), t), w3), b0)

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 2))))

    def test_concat_stack_slice_grads(self):
        x0 = RNG.normal(size=(3, 4))
        w = RNG.normal(size=(6, 4))
        check_grad(lambda t: weighted_sum(ad.concat([t, ad.scale(t, 2.0)], axis=0), w), x0)
        ws = RNG.normal(size=(3, 2, 4))
        check_grad(lambda t: weighted_sum(ad.stack([t, ad.scale(t, -1.0)], axis=1), ws), x0)
        wsl = RNG.normal(size=(3, 2))
        check_grad(lambda t: weighted_sum(ad.slice_axis(t, 1, 1, 3), wsl), x0)

    def test_reshape_transpose_grads(self):
        x0 = RNG.normal(size=(2, 3, 4))
        w = RNG.normal(size=(4, 6))
        check_grad(lambda t: weighted_sum(ad.reshape(t, (4, 6)), w), x0)
        wt = RNG.normal(size=(4, 2, 3))
        check_grad(lambda t: weighted_sum(ad.transpose(t, (2, 0, 1)), wt), x0)

    def test_reductions(self):
        x0 = RNG.normal(size=(3, 5))
        check_grad(lambda t: ad.reduce_mean(t), x0)
        w = RNG.normal(size=(5,))
        w_rows = RNG.normal(size=(3,))
        check_grad(lambda t: weighted_sum(ad.reduce_sum(t, axis=0), w), x0)
        check_grad(lambda t: weighted_sum(ad.reduce_mean(t, axis=1), w_rows), x0)

    def test_bias_add_grads(self):
        x0 = RNG.normal(size=(4, 6))
        b0 = RNG.normal(size=(6,))
        w = RNG.normal(size=(4, 6))
        check_grad(lambda t: weighted_sum(ad.bias_add(t, ad.Tensor(b0)), w), x0)
        check_grad(lambda t: weighted_sum(ad.bias_add(ad.Tensor(x0), t), w), b0)


class TestSoftmaxAndLosses:
    def test_softmax_rows_sum_to_one(self):
        x = ad.softmax(ad.Tensor(RNG.normal(size=(7, 5)) * 10))
        np.testing.assert_allclose(x.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_softmax_grad(self):
        x0 = RNG.normal(size=(3, 4))
        w = RNG.normal(size=(3, 4))
        check_grad(lambda t: weighted_sum(ad.softmax(t), w), x0)

    def test_ce_uniform_logits_is_log4(self):
        logits = ad.Tensor(np.zeros((2, 4)))
        t = np.array([[1.0, 0, 0, 0], [0.25, 0.25, 0.25, 0.25]])
        loss = ad.softmax_cross_entropy(logits, t)
        assert loss.item() == pytest.approx(np.log(4.0), abs=1e-6)

    def test_ce_confident_correct_below_log4(self):
        logits = ad.Tensor(np.array([[3.0, 0.0, 0.0, 0.0]]))
        t = np.array([[1.0, 0.0, 0.0, 0.0]])
        assert ad.softmax_cross_entropy(logits, t).item() < np.log(4.0)

    def test_ce_soft_target_linearity(self):
        logits = RNG.normal(size=(1, 4))
        e1 = np.eye(4)[[0]]
        e4 = np.eye(4)[[3]]
        mixed = 0.5 * e1 + 0.5 * e4
        l_mixed = ad.softmax_cross_entropy(ad.Tensor(logits), mixed).item()
        l_sep = 0.5 * ad.softmax_cross_entropy(ad.Tensor(logits), e1).item() \
            + 0.5 * ad.softmax_cross_entropy(ad.Tensor(logits), e4).item()
        assert l_mixed == pytest.approx(l_sep, abs=1e-5)

    def test_ce_rejects_unnormalized_targets(self):
        with pytest.raises(ValidationError):
            ad.softmax_cross_entropy(ad.Tensor(np.zeros((1, 4))),
                                     np.array([[0.5, 0.2, 0.1, 0.1]]))

    def test_ce_grad_soft_targets(self):
        t = np.array([[0.5, 0.0, 0.0, 0.5], [0.0, 1.0, 0.0, 0.0]])
        x0 = RNG.normal(size=(2, 4))
        check_grad(lambda z: ad.softmax_cross_entropy(z, t), x0)

    def test_mse_values_and_grad(self):
        assert ad.mse(ad.Tensor(np.ones(4)), ad.Tensor(np.ones(4))).item() == 0.0
        assert ad.mse(ad.Tensor(np.zeros(2)), ad.Tensor(np.ones(2))).item() == pytest.approx(1.0)
        x0 = RNG.normal(size=(3, 4))
        ref = RNG.normal(size=(3, 4))
        check_grad(lambda t: ad.mse(t, ad.Tensor(ref)), x0, tol=1e-6, h=1e-5)
        check_grad(lambda t: ad.mse(ad.Tensor(ref), t), x0, tol=1e-6, h=1e-5)


class TestCenterLoss:
    def test_zero_at_centers(self):
        centers = RNG.normal(size=(4, 8))
        labels = np.array([0, 2, 3])
        f = ad.Tensor(centers[labels], requires_grad=True)
        loss = ad.center_loss(f, labels, centers)
        assert loss.item() == 0.0
        ad.backward(loss)
        np.testing.assert_array_equal(f.grad, 0.0)

    def test_hand_arithmetic(self):
        f = ad.Tensor(np.array([[3.0]]), requires_grad=True)
        loss = ad.center_loss(f, np.array([0]), np.array([[1.0]]))
        assert loss.item() == pytest.approx(4.0)
        ad.backward(loss)
        assert f.grad[0, 0] == pytest.approx(4.0)

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            ad.center_loss(ad.Tensor(np.zeros((1, 2))), np.array([5]), np.zeros((4, 2)))

    def test_grad_vs_fd(self):
        labels = np.array([0, 1, 1, 0])
        centers = RNG.normal(size=(2, 3))
        x0 = RNG.normal(size=(4, 3))
        check_grad(lambda t: ad.center_loss(t, labels, centers), x0)

    def test_centers_converge_to_class_means(self):
        feats = np.vstack([RNG.normal(loc=2.0, size=(10, 3)),
                           RNG.normal(loc=-1.0, size=(10, 3))])
        labels = np.array([0] * 10 + [1] * 10)
        centers = np.zeros((2, 3))
        for _ in range(200):
            centers += ad.center_deltas(feats, labels, centers, alpha=1.0)
        np.testing.assert_allclose(centers[0], feats[:10].mean(axis=0), atol=1e-6)
        np.testing.assert_allclose(centers[1], feats[10:].mean(axis=0), atol=1e-6)


class TestConv:
    def test_conv_1x1_is_scaled_identity(self):
        x = ad.Tensor(RNG.normal(size=(2, 1, 5, 6)))
        w = ad.Tensor(np.full((1, 1, 1, 1), 3.0))
        y = ad.conv2d(x, w)
        np.testing.assert_allclose(y.data, 3.0 * x.data, rtol=1e-6)

    def test_conv2d_grads(self):
        for stride, padding in [(1, 0), (2, 1), ((2, 1), (1, 2))]:
            x0 = RNG.normal(size=(2, 3, 6, 7))
            w0 = RNG.normal(size=(4, 3, 3, 3))
            wsum_shape = ad.conv2d(ad.Tensor(x0), ad.Tensor(w0), stride, padding).shape
            w = RNG.normal(size=wsum_shape)
            check_grad(lambda t: weighted_sum(ad.conv2d(t, ad.Tensor(w0), stride, padding), w), x0)
            check_grad(lambda t: weighted_sum(ad.conv2d(ad.Tensor(x0), t, stride, padding), w), w0)

    def test_conv2d_transpose_grads(self):
        for stride, padding, op in [(1, 0, 0), (2, 1, 1), ((2, 2), (1, 1), (0, 1))]:
            x0 = RNG.normal(size=(2, 3, 4, 5))
            w0 = RNG.normal(size=(3, 2, 3, 3))
            out = ad.conv2d_transpose(ad.Tensor(x0), ad.Tensor(w0), stride, padding, op)
            w = RNG.normal(size=out.shape)
            check_grad(lambda t: weighted_sum(
                ad.conv2d_transpose(t, ad.Tensor(w0), stride, padding, op), w), x0)
            check_grad(lambda t: weighted_sum(
                ad.conv2d_transpose(ad.Tensor(x0), t, stride, padding, op), w), w0)

    def test_transpose_inverts_conv_shape(self):
        x = ad.Tensor(RNG.normal(size=(1, 2, 13, 17)))
        w = ad.Tensor(RNG.normal(size=(5, 2, 3, 3)))
        y = ad.conv2d(x, w, stride=2, padding=1)
        wt = ad.Tensor(RNG.normal(size=(5, 2, 3, 3)))
        h_out = (y.shape[2] - 1) * 2 - 2 + 3
        op = (13 - h_out, 17 - ((y.shape[3] - 1) * 2 - 2 + 3))
        back = ad.conv2d_transpose(y, wt, stride=2, padding=1, output_padding=op)
        assert back.shape == x.shape


class TestLstm:
    def _params(self, d, units, dtype=np.float64):
        rng = np.random.default_rng(7)
        return (ad.Tensor(rng.normal(size=(d, 4 * units)) * 0.4),
                ad.Tensor(rng.normal(size=(units, 4 * units)) * 0.4),
                ad.Tensor(rng.normal(size=(4 * units,)) * 0.1))

    def test_single_step_shapes(self):
        with ad.precision("float64"):
            x = ad.Tensor(RNG.normal(size=(2, 1, 3)))
            out, last = ad.bilstm(x, self._params(3, 4), self._params(3, 4))
        assert out.shape == (2, 1, 8)
        assert last.shape == (2, 8)

    def test_zero_weights_zero_output(self):
        z = lambda *s: ad.Tensor(np.zeros(s))
        params = (z(3, 8), z(2, 8), z(8))
        x = ad.Tensor(RNG.normal(size=(2, 5, 3)))
        out, last = ad.lstm(x, *params)
        np.testing.assert_array_equal(out.data, 0.0)
        np.testing.assert_array_equal(last.data, 0.0)

    def test_lstm_grad_vs_fd(self):
        x0 = RNG.normal(size=(2, 3, 2))
        with ad.precision("float64"):
            fwd = self._params(2, 2)
            bwd = self._params(2, 2)
        w = RNG.normal(size=(2, 3, 4))

        def build(t):
            out, _ = ad.bilstm(t, fwd, bwd)
            return weighted_sum(out, w)

        check_grad(build, x0)

    def test_lstm_weight_grads_vs_fd(self):
        x = RNG.normal(size=(1, 3, 2))
        w = RNG.normal(size=(1, 3, 2))

        def build_for(idx):
            def build(t):
                with ad.precision("float64"):
                    rng = np.random.default_rng(7)
                    raw = [rng.normal(size=(2, 8)) * 0.4,
                           rng.normal(size=(2, 8)) * 0.4,
                           rng.normal(size=(8,)) * 0.1]
                    params = [ad.Tensor(r) for r in raw]
                    params[idx] = t
                    out, _ = ad.lstm(ad.Tensor(x), *params)
                    return weighted_sum(out, w)
            return build

        rng = np.random.default_rng(7)
        raws = [rng.normal(size=(2, 8)) * 0.4, rng.normal(size=(2, 8)) * 0.4,
                rng.normal(size=(8,)) * 0.1]
        for idx in range(3):
            check_grad(build_for(idx), raws[idx])


class TestBackwardSemantics:
    def test_identity_grad(self):
        x = ad.Tensor(np.array([2.0]), requires_grad=True)
        y = ad.reduce_sum(x)
        ad.backward(y)
        assert x.grad[0] == 1.0

    def test_square_grad(self):
        x = ad.Tensor(np.array([3.0]), requires_grad=True)
        y = ad.reduce_sum(ad.mul(x, x))
        ad.backward(y)
        assert x.grad[0] == 6.0

    def test_diamond_accumulation(self):
        x0 = np.array([1.3, -0.4])

        def build(t):
            return ad.reduce_sum(ad.add(ad.mul(t, t), ad.scale(t, 3.0)))

        check_grad(build, x0)

    def test_double_backward_doubles_grads(self):
        x = ad.Tensor(np.array([3.0]), requires_grad=True)
        y = ad.reduce_sum(ad.mul(x, x))
        ad.backward(y)
        first = x.grad.copy()
        y2 = ad.reduce_sum(ad.mul(x, x))
        ad.backward(y2)
        np.testing.assert_allclose(x.grad, 2 * first)

    def test_non_scalar_root_rejected(self):
        with pytest.raises(UsageError):
            ad.backward(ad.Tensor(np.zeros(3), requires_grad=True))

    def test_forward_purity(self):
        x = ad.Tensor(RNG.normal(size=(4, 4)))
        w = ad.Tensor(RNG.normal(size=(4, 4)))
        y1 = ad.tanh(ad.matmul(x, w)).data
        y2 = ad.tanh(ad.matmul(x, w)).data
        np.testing.assert_array_equal(y1, y2)


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = ad.Tensor(RNG.normal(size=(5, 5)))
        y = ad.dropout(x, 0.5, train=False)
        assert y is x

    def test_p_zero_is_identity_in_train(self):
        x = ad.Tensor(RNG.normal(size=(5, 5)))
        y = ad.dropout(x, 0.0, train=True, rng=np.random.default_rng(0))
        assert y is x

    def test_train_mode_masks_and_scales(self):
        x = ad.Tensor(np.ones((1000,)))
        y = ad.dropout(x, 0.4, train=True, rng=np.random.default_rng(3))
        kept = y.data != 0
        assert 0.5 < kept.mean() < 0.7
        np.testing.assert_allclose(y.data[kept], 1.0 / 0.6, rtol=1e-6)

    def test_invalid_rate(self):
        with pytest.raises(ValidationError):
            ad.dropout(ad.Tensor(np.ones(3)), 1.0, train=True, rng=np.random.default_rng(0))


class TestAdam:
    def test_zero_grad_means_no_motion(self):
        p = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.grad = np.zeros(2, dtype=p.data.dtype)
        state = ad.AdamState(lr=0.1)
        before = p.data.copy()
        ad.adam_step({"p": p}, state)
        np.testing.assert_array_equal(p.data, before)
        assert state.step_count == 1

    def test_first_step_magnitude_is_lr(self):
        for g in [0.001, 1.0, 250.0]:
            p = ad.Tensor(np.array([0.0]), requires_grad=True)
            p.grad = np.array([g], dtype=p.data.dtype)
            ad.adam_step({"p": p}, ad.AdamState(lr=0.05))
            assert p.data[0] == pytest.approx(-0.05, rel=1e-3)

    def test_missing_grad_raises(self):
        p = ad.Tensor(np.array([0.0]), requires_grad=True)
        with pytest.raises(UsageError):
            ad.adam_step({"p": p}, ad.AdamState(lr=0.1))

    def test_deterministic_trajectory(self):
        def run():
            rng = np.random.default_rng(11)
            p = ad.Tensor(rng.normal(size=(3,)), requires_grad=True)
            state = ad.AdamState(lr=0.01)
            for _ in range(10):
                loss = ad.reduce_sum(ad.mul(p, p))
                ad.backward(loss)
                ad.adam_step({"p": p}, state)
                p.grad = None
            return p.data.copy()

        np.testing.assert_array_equal(run(), run())


class TestNanChecks:
    def test_nan_mode_catches_nonfinite(self):
        with ad.nan_checks():
            with pytest.raises(ValidationError):
                ad.Tensor(np.array([np.nan]))

    def test_nan_mode_off_by_default(self):
        ad.Tensor(np.array([np.nan]))
