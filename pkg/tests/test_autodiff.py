import numpy as np
import pytest

from ldct.autodiff import (BatchNormState, GradCheckFailure, Tape, Tensor, add,
                           batch_norm, concat_channels, conv2d_dilated,
                           grad_check, max_pool_2x2, mse_loss, relu, scale,
                           tensor_sum)

from oracles import conv2d_direct, max_pool_direct


class TestConv2dDilated:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 6, 7)).astype(np.float32))
        w = np.zeros((3, 3, 1, 1), dtype=np.float32)
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        y = conv2d_dilated(x, Tensor(w), r=1)
        np.testing.assert_array_equal(y.data, x.data)

    def test_dilated_row_sum(self):
        # 1-D slice: x=[1,2,3,4,5], taps at distance 2 around the center.
        x = np.zeros((1, 1, 1, 5), dtype=np.float32)
        x[0, 0, 0] = [1, 2, 3, 4, 5]
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 1] = [1, 1, 1]
        y = conv2d_dilated(Tensor(x), Tensor(w), r=2)
        assert y.data[0, 0, 0, 2] == 9.0

    def test_matches_direct_convolution(self, rng):
        x = rng.normal(size=(1, 2, 9, 9))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=(3,))
        got = conv2d_dilated(Tensor(x), Tensor(w), Tensor(b), r=2)
        np.testing.assert_allclose(got.data, conv2d_direct(x, w, b, 2), atol=1e-12)

    @pytest.mark.parametrize("f,r", [(3, 1), (3, 4), (5, 2), (7, 1), (7, 3)])
    def test_shape_preserved(self, rng, f, r):
        x = Tensor(rng.normal(size=(2, 2, 10, 13)).astype(np.float32))
        w = Tensor(rng.normal(size=(4, 2, f, f)).astype(np.float32))
        assert conv2d_dilated(x, w, r=r).shape == (2, 4, 10, 13)

    def test_rejects_even_filter(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 4, 4)))
        w = Tensor(rng.normal(size=(1, 1, 2, 2)))
        with pytest.raises(ValueError, match="odd"):
            conv2d_dilated(x, w)

    def test_rejects_channel_mismatch(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 4)))
        w = Tensor(rng.normal(size=(1, 2, 3, 3)))
        with pytest.raises(ValueError, match="in_c=2"):
            conv2d_dilated(x, w)

    def test_rejects_bad_bias(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        with pytest.raises(ValueError, match="bias"):
            conv2d_dilated(x, w, Tensor(np.zeros(2)))

    def test_banded_path_matches_direct(self, rng, monkeypatch):
        import ldct.autodiff as ad

        x = rng.normal(size=(1, 2, 12, 11))
        w = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=(2,))
        full = conv2d_dilated(Tensor(x), Tensor(w), Tensor(b), r=2).data
        monkeypatch.setattr(ad, "_COL_ELEMENT_LIMIT", 500)
        banded = conv2d_dilated(Tensor(x), Tensor(w), Tensor(b), r=2).data
        np.testing.assert_allclose(banded, conv2d_direct(x, w, b, 2), atol=1e-12)
        np.testing.assert_allclose(banded, full, atol=1e-12)

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        tgt = Tensor(rng.normal(size=(1, 3, 6, 6)))
        err = grad_check(lambda a, k, c: mse_loss(conv2d_dilated(a, k, c, r=3), tgt), [x, w, b])
        assert err < 1e-4

    def test_banded_gradients_match_full(self, rng, monkeypatch):
        import ldct.autodiff as ad

        x = rng.normal(size=(1, 2, 10, 10))
        w = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=(2,))
        tgt = Tensor(rng.normal(size=(1, 2, 10, 10)))

        def grads():
            xs = Tensor(x, requires_grad=True)
            ws = Tensor(w, requires_grad=True)
            bs = Tensor(b, requires_grad=True)
            with Tape() as tape:
                loss = mse_loss(conv2d_dilated(xs, ws, bs, r=2), tgt)
            tape.backward(loss)
            return xs.grad.copy(), ws.grad.copy(), bs.grad.copy()

        full = grads()
        monkeypatch.setattr(ad, "_COL_ELEMENT_LIMIT", 300)
        banded = grads()
        for a, c in zip(full, banded):
            np.testing.assert_allclose(a, c, atol=1e-12)


class TestRelu:
    def test_values(self):
        y = relu(Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)))
        np.testing.assert_array_equal(y.data.ravel(), [0.0, 0.0, 2.0])

    def test_all_negative_backward(self):
        x = Tensor(-np.ones((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(relu(x))
        tape.backward(loss)
        assert loss.item() == 0.0
        np.testing.assert_array_equal(x.grad, np.zeros_like(x.data))

    def test_idempotent(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        once = relu(x)
        np.testing.assert_array_equal(relu(once).data, once.data)

    def test_gradient(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 5, 5)) + 3.0, requires_grad=True)
        err = grad_check(lambda a: tensor_sum(relu(a)), [x])
        assert err < 1e-8


class TestBatchNorm:
    def test_train_normalizes(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, size=(4, 3, 8, 8)).astype(np.float32))
        state = BatchNormState.fresh(3)
        y = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state, mode="train")
        mu = y.data.mean(axis=(0, 2, 3))
        var = y.data.var(axis=(0, 2, 3))
        assert np.abs(mu).max() < 1e-6
        assert np.abs(var - 1.0).max() < 1e-4

    def test_affine(self, rng):
        x = rng.normal(size=(2, 2, 16, 16))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        state = BatchNormState.fresh(2)
        y = batch_norm(Tensor(x), Tensor(2 * np.ones(2)), Tensor(3 * np.ones(2)), state)
        np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), [3.0, 3.0], atol=1e-5)
        np.testing.assert_allclose(y.data.std(axis=(0, 2, 3)), [2.0, 2.0], atol=1e-3)

    def test_running_stats_update(self, rng):
        x = rng.normal(5.0, 3.0, size=(2, 1, 8, 8))
        state = BatchNormState.fresh(1)
        batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, momentum=0.9)
        np.testing.assert_allclose(state.mean, 0.1 * x.mean(), rtol=1e-5)
        np.testing.assert_allclose(state.var, 0.9 * 1.0 + 0.1 * x.var(), rtol=1e-5)

    def test_infer_uses_running_stats(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        state = BatchNormState(mean=np.array([1.0, -1.0]), var=np.array([4.0, 9.0]))
        y = batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state,
                       mode="infer", eps=0.0)
        expect = (x - np.array([1.0, -1.0]).reshape(1, 2, 1, 1)) / \
            np.array([2.0, 3.0]).reshape(1, 2, 1, 1)
        np.testing.assert_allclose(y.data, expect, atol=1e-6)

    @pytest.mark.parametrize("mode", ["train", "infer"])
    def test_gradients(self, rng, mode):
        x = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
        gamma = Tensor(rng.normal(1.0, 0.1, size=3), requires_grad=True)
        beta = Tensor(rng.normal(size=3), requires_grad=True)
        tgt = Tensor(rng.normal(size=(2, 3, 5, 5)))

        def f(a, g, b):
            state = BatchNormState.fresh(3)
            state.mean += 0.3
            state.var += 0.5
            return mse_loss(batch_norm(a, g, b, state, mode=mode), tgt)

        assert grad_check(f, [x, gamma, beta]) < 1e-4

    def test_rejects_bad_affine_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 4, 4)))
        with pytest.raises(ValueError, match="gamma"):
            batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(3)), BatchNormState.fresh(3))


class TestConcatChannels:
    def test_shapes(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 8, 8)))
        b = Tensor(rng.normal(size=(1, 3, 8, 8)))
        assert concat_channels(a, b).shape == (1, 5, 8, 8)

    def test_roundtrip_slices(self, rng):
        a = rng.normal(size=(2, 2, 4, 4))
        b = rng.normal(size=(2, 3, 4, 4))
        y = concat_channels(Tensor(a), Tensor(b))
        np.testing.assert_array_equal(y.data[:, :2], a)
        np.testing.assert_array_equal(y.data[:, 2:], b)

    def test_backward_splits_ones(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(concat_channels(a, b))
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
        np.testing.assert_array_equal(b.grad, np.ones_like(b.data))

    def test_rejects_spatial_mismatch(self, rng):
        a = Tensor(rng.normal(size=(1, 1, 4, 4)))
        b = Tensor(rng.normal(size=(1, 1, 5, 4)))
        with pytest.raises(ValueError, match="agree"):
            concat_channels(a, b)


class TestMaxPool:
    def test_tiny(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert max_pool_2x2(x).data.ravel()[0] == 4.0

    def test_constant_ties_route_to_first(self):
        x = Tensor(np.ones((1, 1, 4, 4), dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(max_pool_2x2(x))
        tape.backward(loss)
        expect = np.zeros((1, 1, 4, 4))
        expect[0, 0, ::2, ::2] = 1.0
        np.testing.assert_array_equal(x.grad, expect)

    def test_matches_window_oracle(self, rng):
        x = rng.normal(size=(2, 3, 4, 6))
        got = max_pool_2x2(Tensor(x)).data
        np.testing.assert_array_equal(got, max_pool_direct(x))

    def test_rejects_odd_dims(self, rng):
        with pytest.raises(ValueError, match="even"):
            max_pool_2x2(Tensor(rng.normal(size=(1, 1, 3, 4))))

    def test_gradient(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        tgt = Tensor(rng.normal(size=(1, 2, 3, 3)))
        assert grad_check(lambda a: mse_loss(max_pool_2x2(a), tgt), [x]) < 1e-4


class TestMseLoss:
    def test_zero_when_equal(self, rng):
        x = rng.normal(size=(1, 1, 3, 3))
        assert mse_loss(Tensor(x), Tensor(x.copy())).item() == 0.0

    def test_constant_offset(self):
        a = Tensor(np.zeros((1, 1, 4, 4)))
        b = Tensor(np.full((1, 1, 4, 4), 0.1))
        assert abs(mse_loss(a, b).item() - 0.01) < 1e-12

    def test_matches_formula(self, rng):
        a = rng.normal(size=(2, 1, 5, 5))
        b = rng.normal(size=(2, 1, 5, 5))
        got = mse_loss(Tensor(a), Tensor(b)).item()
        np.testing.assert_allclose(got, ((a - b) ** 2).mean(), rtol=1e-12)

    def test_rejects_shape_mismatch(self, rng):
        with pytest.raises(ValueError, match="mismatch"):
            mse_loss(Tensor(rng.normal(size=(1, 1, 2, 2))),
                     Tensor(rng.normal(size=(1, 1, 2, 3))))

    def test_gradient_formula(self, rng):
        a = Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 1, 4, 4)))
        with Tape() as tape:
            loss = mse_loss(a, b)
        tape.backward(loss)
        np.testing.assert_allclose(a.grad, 2.0 * (a.data - b.data) / a.data.size, rtol=1e-6)


class TestTapeSemantics:
    def test_multiple_consumers_sum(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = add(tensor_sum(relu(x)), tensor_sum(scale(x, 2.0)))
        tape.backward(loss)
        expect = (x.data > 0).astype(np.float64) + 2.0
        np.testing.assert_allclose(x.grad, expect, rtol=1e-6)

    def test_no_tape_means_no_grads(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        y = relu(x)
        assert y.grad is None and x.grad is None

    def test_grads_reset_between_backwards(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = tensor_sum(x)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_forward_ops_are_pure(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32))
        w = Tensor(rng.normal(size=(2, 2, 3, 3)).astype(np.float32))
        state = BatchNormState(mean=np.array([0.2, -0.1], dtype=np.float32),
                               var=np.array([1.5, 0.5], dtype=np.float32))
        gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
        a = batch_norm(conv2d_dilated(x, w, r=2), gamma, beta, state, mode="infer")
        b = batch_norm(conv2d_dilated(x, w, r=2), gamma, beta, state, mode="infer")
        assert np.array_equal(a.data, b.data)

    def test_backward_exact_reverse_order(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True)
        with Tape() as tape:
            loss = mse_loss(relu(conv2d_dilated(x, Tensor(np.ones((1, 1, 3, 3))), r=1)),
                            Tensor(np.zeros((1, 1, 4, 4))))
        assert tape.op_names == ["conv2d_dilated", "relu", "mse_loss"]
        tape.backward(loss)
        assert x.grad is not None


class TestGradCheck:
    def test_linear_region_exact(self, rng):
        x = Tensor(np.abs(rng.normal(size=(1, 1, 4, 4))) + 1.0, requires_grad=True)
        assert grad_check(lambda a: tensor_sum(relu(a)), [x]) < 1e-8

    def test_reports_nonfinite_op(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)

        def f(a):
            bad = scale(a, np.inf)
            return tensor_sum(bad)

        with pytest.raises(GradCheckFailure, match="scale"):
            grad_check(f, [x])

    def test_subsampling_bounds_work(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 8, 8)), requires_grad=True)
        tgt = Tensor(rng.normal(size=(1, 1, 8, 8)))
        err = grad_check(lambda a: mse_loss(a, tgt), [x], max_elements=5)
        assert err < 1e-6


class TestThreading:
    def test_distinct_tapes_on_distinct_threads(self, rng):
        import threading

        base = rng.normal(size=(1, 1, 6, 6))
        results = {}

        def worker(tag, offset):
            x = Tensor(base + offset, requires_grad=True)
            with Tape() as tape:
                loss = mse_loss(relu(x), Tensor(np.zeros_like(base)))
            tape.backward(loss)
            results[tag] = (loss.item(), x.grad.copy())

        threads = [threading.Thread(target=worker, args=(i, 0.1 * i)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for tag, offset in ((i, 0.1 * i) for i in range(4)):
            x = Tensor(base + offset, requires_grad=True)
            with Tape() as tape:
                loss = mse_loss(relu(x), Tensor(np.zeros_like(base)))
            tape.backward(loss)
            assert results[tag][0] == loss.item()
            np.testing.assert_array_equal(results[tag][1], x.grad)
