import numpy as np
import pytest

from ldct.autodiff import Tape, Tensor, grad_check, mse_loss
from ldct.container import ContainerError, write_container
from ldct.perceptual import (InputAdapter, LossConfig, combined_loss,
                             expected_shapes, extract_features, load_weights,
                             perceptual_loss, random_weights, save_weights)


@pytest.fixture(scope="module")
def store():
    return random_weights(seed=0, scale=0.5)


class TestWeightStore:
    def test_expected_shapes_follow_blocks(self):
        shapes = expected_shapes()
        assert shapes["feat.b1.c1.w"] == (64, 3, 3, 3)
        assert shapes["feat.b2.c1.w"] == (128, 64, 3, 3)
        assert shapes["feat.b4.c3.w"] == (512, 512, 3, 3)
        assert len(shapes) == 2 * (2 + 2 + 3 + 3)

    def test_save_load_roundtrip(self, store, tmp_path):
        path = tmp_path / "weights.ldws"
        save_weights(path, store)
        loaded = load_weights(path)
        for name, t in store.tensors.items():
            np.testing.assert_array_equal(loaded.tensors[name].data, t.data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ldws"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ContainerError, match="unrecognized container"):
            load_weights(path)

    def test_wrong_shape_names_tensor(self, store, tmp_path):
        tensors = store.raw().copy()
        tensors["feat.b1.c1.w"] = np.zeros((64, 3, 5, 5), dtype=np.float32)
        path = tmp_path / "wrong.ldws"
        write_container(path, tensors)
        with pytest.raises(ContainerError, match="feat.b1.c1.w"):
            load_weights(path)

    def test_missing_tensor_rejected(self, store, tmp_path):
        tensors = store.raw().copy()
        del tensors["feat.b3.c2.b"]
        path = tmp_path / "missing.ldws"
        write_container(path, tensors)
        with pytest.raises(ContainerError, match="missing.*feat.b3.c2.b"):
            load_weights(path)

    def test_extra_tensor_rejected(self, store, tmp_path):
        tensors = store.raw().copy()
        tensors["feat.b9.c1.w"] = np.zeros((1, 1, 3, 3), dtype=np.float32)
        path = tmp_path / "extra.ldws"
        write_container(path, tensors)
        with pytest.raises(ContainerError, match="unexpected"):
            load_weights(path)


class TestExtractFeatures:
    def test_tap_shapes_40(self, store, rng):
        x = Tensor(rng.random((1, 1, 40, 40), dtype=np.float32))
        taps = extract_features(x, store)
        assert [t.shape for t in taps] == [
            (1, 64, 40, 40), (1, 128, 20, 20), (1, 256, 10, 10), (1, 512, 5, 5)]

    def test_deterministic(self, store, rng):
        x = Tensor(rng.random((1, 1, 16, 16), dtype=np.float32))
        a = extract_features(x, store)
        b = extract_features(x, store)
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_indivisible_size_rejected(self, store, rng):
        x = Tensor(rng.random((1, 1, 20, 20), dtype=np.float32))
        with pytest.raises(ValueError, match="24x24"):
            extract_features(x, store)

    def test_multichannel_rejected(self, store, rng):
        with pytest.raises(ValueError, match="n, 1, h, w"):
            extract_features(Tensor(rng.random((1, 3, 16, 16), dtype=np.float32)), store)

    def test_tap_gradients(self, store, rng):
        x = Tensor(rng.random((1, 1, 16, 16)), requires_grad=True)

        def f(a):
            taps = extract_features(a, store)
            return mse_loss(taps[3], Tensor(np.zeros(taps[3].shape)))

        assert grad_check(f, [x], max_elements=40) < 1e-3

    def test_weights_stay_frozen(self, store, rng):
        before = {k: v.data.copy() for k, v in store.tensors.items()}
        x = Tensor(rng.random((1, 1, 16, 16), dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            loss = perceptual_loss(x, Tensor(rng.random((1, 1, 16, 16), dtype=np.float32)),
                                   store)
        tape.backward(loss)
        for k, v in store.tensors.items():
            np.testing.assert_array_equal(v.data, before[k])
            assert v.grad is None


def _tiny_store(seed=1):
    from ldct.perceptual import FeatureExtractorSpec, WeightStore

    spec = FeatureExtractorSpec(blocks=((1, 4), (1, 6), (1, 8), (1, 10)))
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(spec).items():
        tensors[name] = (rng.normal(0, 0.3, size=shape).astype(np.float32)
                         if name.endswith(".w") else
                         rng.normal(0, 0.05, size=shape).astype(np.float32))
    return WeightStore(tensors, spec)


class TestPerceptualLoss:
    def test_zero_for_identical(self, store, rng):
        x = rng.random((1, 1, 16, 16), dtype=np.float32)
        assert perceptual_loss(Tensor(x), Tensor(x.copy()), store).item() == 0.0

    def test_positive_for_different(self, store, rng):
        a = Tensor(rng.random((1, 1, 16, 16), dtype=np.float32))
        b = Tensor(rng.random((1, 1, 16, 16), dtype=np.float32))
        assert perceptual_loss(a, b, store).item() > 0.0

    def test_matches_compositional_oracle(self, rng):
        store = _tiny_store()
        a = Tensor(rng.random((1, 1, 16, 16), dtype=np.float32))
        b = Tensor(rng.random((1, 1, 16, 16), dtype=np.float32))
        got = perceptual_loss(a, b, store).item()
        taps_a = extract_features(a, store)
        taps_b = extract_features(b, store)
        want = sum(float(((ta.data - tb.data) ** 2).mean())
                   for ta, tb in zip(taps_a, taps_b))
        assert got == pytest.approx(want, rel=1e-6)

    def test_tap_normalization_under_tiling(self, rng):
        # quadrupling a tap's size with periodic content leaves its
        # size-normalized term invariant; comparison is over tap interiors
        # because the zero-padded border occupies a size-dependent fraction
        store = _tiny_store()
        pat_a = rng.random((1, 1, 8, 8), dtype=np.float32)
        pat_b = rng.random((1, 1, 8, 8), dtype=np.float32)

        def interior_terms(xa, xb, crop=3):
            taps = zip(extract_features(Tensor(xa), store),
                       extract_features(Tensor(xb), store))
            return [float((((p.data - q.data)[:, :, crop:-crop, crop:-crop]) ** 2).mean())
                    for p, q in taps]

        small = interior_terms(np.tile(pat_a, (1, 1, 8, 8)), np.tile(pat_b, (1, 1, 8, 8)))
        big = interior_terms(np.tile(pat_a, (1, 1, 16, 16)), np.tile(pat_b, (1, 1, 16, 16)))
        for s, b in zip(small, big):
            assert abs(b - s) / s < 0.05

    def test_gradient_flows_to_pred_only(self, rng):
        store = _tiny_store()
        pred = Tensor(rng.random((1, 1, 16, 16)), requires_grad=True)
        target = Tensor(rng.random((1, 1, 16, 16)), requires_grad=True)
        with Tape() as tape:
            loss = perceptual_loss(pred, target, store)
        tape.backward(loss)
        assert pred.grad is not None and np.any(pred.grad != 0)
        assert target.grad is None

    def test_gradient_matches_finite_differences(self, rng):
        store = _tiny_store()
        target = Tensor(rng.random((1, 1, 16, 16)))
        pred = Tensor(rng.random((1, 1, 16, 16)), requires_grad=True)
        err = grad_check(lambda p: perceptual_loss(p, target, store), [pred],
                         max_elements=64)
        assert err < 1e-3


class TestCombinedLoss:
    def test_mse_only_matches_mse(self, rng):
        a = Tensor(rng.random((1, 1, 16, 16), dtype=np.float32))
        b = Tensor(rng.random((1, 1, 16, 16), dtype=np.float32))
        cfg = LossConfig(lambda_mse=1.0, lambda_p=0.0)
        loss, mse_term, p_term = combined_loss(a, b, cfg)
        assert loss.item() == pytest.approx(mse_loss(a, b).item(), rel=1e-6)
        assert p_term == 0.0

    def test_perceptual_only(self, rng):
        store = _tiny_store()
        a = Tensor(rng.random((1, 1, 16, 16), dtype=np.float32))
        b = Tensor(rng.random((1, 1, 16, 16), dtype=np.float32))
        cfg = LossConfig(lambda_mse=0.0, lambda_p=1.0)
        loss, mse_term, p_term = combined_loss(a, b, cfg, store)
        assert mse_term == 0.0
        assert loss.item() == pytest.approx(perceptual_loss(a, b, store).item(), rel=1e-6)

    def test_weighted_linearity(self, rng):
        store = _tiny_store()
        a = Tensor(rng.random((1, 1, 16, 16), dtype=np.float32))
        b = Tensor(rng.random((1, 1, 16, 16), dtype=np.float32))
        cfg = LossConfig(lambda_mse=1.0, lambda_p=2.0)
        loss, mse_term, p_term = combined_loss(a, b, cfg, store)
        want = 1.0 * mse_loss(a, b).item() + 2.0 * perceptual_loss(a, b, store).item()
        assert loss.item() == pytest.approx(want, rel=1e-5)
        assert mse_term == pytest.approx(mse_loss(a, b).item(), rel=1e-5)

    def test_nonnegative_and_zero_iff_equal(self, rng):
        store = _tiny_store()
        x = rng.random((1, 1, 16, 16), dtype=np.float32)
        cfg = LossConfig(lambda_mse=1.0, lambda_p=0.5)
        zero, _, _ = combined_loss(Tensor(x), Tensor(x.copy()), cfg, store)
        assert zero.item() == 0.0
        other, _, _ = combined_loss(Tensor(x), Tensor(x + 0.01), cfg, store)
        assert other.item() > 0.0

    def test_requires_store_when_perceptual(self, rng):
        a = Tensor(rng.random((1, 1, 16, 16), dtype=np.float32))
        with pytest.raises(ValueError, match="extractor"):
            combined_loss(a, a, LossConfig(lambda_mse=0.0, lambda_p=1.0), None)

    def test_degenerate_config_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            LossConfig(lambda_mse=0.0, lambda_p=0.0)

    def test_imagenet_adapter_statistics(self, rng):
        adapter = InputAdapter.imagenet()
        assert adapter.mul == (255.0,) * 3
        assert adapter.shift[0] == pytest.approx(-123.68)
