"""Gradient engine: hand oracles, finite differences, replay, counters."""

import numpy as np
import pytest

from hero_lab import autodiff as ad
from hero_lab import models
from hero_lab.errors import HeroLabError, ShapeError


def make_params(**arrays):
    return models.ParamSet([models.ParamEntry(name=k, value=v, kind="weight")
                            for k, v in arrays.items()])


def central_diff(spec, params, batch, name, idx, h=1e-5):
    e = params.get(name)
    up = e.value.copy()
    up.flat[idx] += h
    dn = e.value.copy()
    dn.flat[idx] -= h
    lu = models.model_loss(spec, params.replaced({name: up}), batch).loss
    ld = models.model_loss(spec, params.replaced({name: dn}), batch).loss
    return (lu - ld) / (2.0 * h)


class TestStraightLineOracle:
    def test_linear_least_squares_by_hand(self):
        """mean((x w + b)^2) with every gradient entry worked out on paper."""
        x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        params = make_params(w=np.array([[0.5], [-1.0]]), b=np.array([0.25]))

        def fn(leaves, _):
            pred = ad.add(ad.matmul(x, leaves["w"]), leaves["b"])
            return ad.reduce_mean(ad.mul(pred, pred))

        rec = ad.forward(fn, params)
        # pred = [-1.25, -2.25, -3.25], loss = 17.1875 / 3
        assert rec.loss == pytest.approx(17.1875 / 3.0, rel=1e-15)
        g = ad.backward(rec)
        # dL/dpred = (2/3) pred, dL/dw = x' dL/dpred, dL/db = sum(dL/dpred)
        np.testing.assert_allclose(g["w"], [[-48.5 / 3.0], [-62.0 / 3.0]], rtol=1e-14)
        np.testing.assert_allclose(g["b"], [-4.5], rtol=1e-14)

    def test_bias_broadcast_gradient(self):
        # sum(x + b) with b broadcast over 4 rows: db = column counts
        x = np.arange(12.0).reshape(4, 3)
        params = make_params(b=np.zeros(3))
        rec = ad.forward(lambda leaves, _: ad.reduce_sum(ad.add(x, leaves["b"])), params)
        g = ad.backward(rec)
        np.testing.assert_array_equal(g["b"], [4.0, 4.0, 4.0])

    def test_relu_subgradient_zero_at_kink(self):
        params = make_params(w=np.array([-1.0, 0.0, 2.0]))
        rec = ad.forward(lambda leaves, _: ad.reduce_sum(ad.relu(leaves["w"])), params)
        g = ad.backward(rec)
        np.testing.assert_array_equal(g["w"], [0.0, 0.0, 1.0])

    def test_cross_entropy_uniform_logits(self):
        # all-equal logits make every class equally likely: loss is log K
        for k in (2, 5, 10):
            logits = np.zeros((4, k))
            y = np.arange(4) % k
            loss = float(ad.cross_entropy_with_logits(logits, y))
            assert loss == pytest.approx(np.log(k), rel=1e-14)

    def test_cross_entropy_gradient_matches_softmax(self):
        logits = np.array([[1.0, 2.0, 3.0]])
        y = np.array([2])
        params = make_params(l=logits)
        rec = ad.forward(lambda leaves, _: ad.cross_entropy_with_logits(leaves["l"], y),
                         params)
        g = ad.backward(rec)
        p = np.exp(logits - logits.max())
        p /= p.sum()
        expect = p.copy()
        expect[0, 2] -= 1.0
        np.testing.assert_allclose(g["l"], expect, rtol=1e-12)

    def test_conv2d_against_direct_loops(self):
        """conv2d value vs an independent nested-loop implementation."""
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        stride, pad = 2, 1
        out = ad.conv2d(x, w, stride=stride, pad=pad)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        h_out = (x.shape[2] + 2 * pad - 3) // stride + 1
        w_out = (x.shape[3] + 2 * pad - 3) // stride + 1
        expect = np.zeros((2, 3, h_out, w_out))
        for n in range(2):
            for c in range(3):
                for i in range(h_out):
                    for j in range(w_out):
                        patch = xp[n, :, i * stride : i * stride + 3,
                                   j * stride : j * stride + 3]
                        expect[n, c, i, j] = (patch * w[c]).sum()
        np.testing.assert_allclose(out, expect, rtol=1e-12)


class TestGradCheck:
    def test_small_models_against_central_differences(self):
        """A compact version of the full 50-model acceptance sweep."""
        rng = np.random.default_rng(404)
        specs = [
            models.ModelSpec(kind="mlp", input_shape=(4,), classes=3, widths=(4, 6, 3)),
            models.ModelSpec(kind="mlp", input_shape=(3,), classes=2, widths=(3, 5, 2),
                             batch_norm=True),
            models.ModelSpec(kind="smallconv", input_shape=(1, 6, 6), classes=3,
                             channels=(2, 3)),
        ]
        for spec in specs:
            if spec.kind == "mlp":
                x = rng.standard_normal((5, *spec.input_shape))
            else:
                x = rng.standard_normal((4, *spec.input_shape))
            y = rng.integers(0, spec.classes, size=x.shape[0])
            params = models.build(spec, seed=int(rng.integers(0, 2**31)))
            # zero-init biases sit exactly on relu kinks, where the central
            # difference is not an oracle; jitter to a generic point
            params = params.replaced({e.name: e.value + 0.05 * rng.standard_normal(e.value.shape)
                                      for e in params})
            batch = (x, y)
            grads = ad.backward(models.model_loss(spec, params, batch))
            for e in params:
                for idx in rng.choice(e.value.size, size=min(e.value.size, 5), replace=False):
                    fd = central_diff(spec, params, batch, e.name, int(idx))
                    g = grads[e.name].flat[int(idx)]
                    rel = abs(g - fd) / max(abs(g), abs(fd), 1e-6)
                    assert rel <= 1e-4, f"{spec.kind} {e.name}[{idx}]: rel err {rel:.2e}"


class TestHvp:
    def quadratic_loss_fn(self, A):
        def loss_fn(params):
            def fn(leaves, _):
                w = leaves["w"]
                return ad.mul(ad.reduce_sum(ad.mul(w, ad.matmul(A, w))), 0.5)
            return ad.forward(fn, params)
        return loss_fn

    def test_exact_on_diagonal_quadratic(self):
        # H = diag(2, 4), v = (1, 0): Hv = (2, 0) with no finite-difference error
        A = np.diag([2.0, 4.0])
        params = make_params(w=np.array([1.0, 1.0]))
        hv = ad.hvp_fd(self.quadratic_loss_fn(A), params, {"w": np.array([1.0, 0.0])}, h=1.0)
        np.testing.assert_allclose(hv["w"], [2.0, 0.0], atol=1e-12)

    def test_random_quadratics_near_exact(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            d = int(rng.integers(2, 6))
            M = rng.standard_normal((d, d))
            A = M @ M.T
            params = make_params(w=rng.standard_normal(d))
            v = rng.standard_normal(d)
            hv = ad.hvp_fd(self.quadratic_loss_fn(A), params, {"w": v}, h=1.0)
            expect = A @ v
            assert np.linalg.norm(hv["w"] - expect) <= 1e-10 * np.linalg.norm(expect)

    def test_cubic_forward_difference_bias(self):
        # d/dw of w^3 is 3w^2; forward difference of the gradient at w=1
        # with h=1e-3 gives (3(1.001)^2 - 3)/1e-3 = 6 + 3h = 6.003
        def loss_fn(params):
            def fn(leaves, _):
                w = leaves["w"]
                return ad.reduce_sum(ad.mul(ad.mul(w, w), w))
            return ad.forward(fn, params)

        params = make_params(w=np.array([1.0]))
        hv = ad.hvp_fd(loss_fn, params, {"w": np.array([1.0])}, h=1e-3)
        assert hv["w"][0] == pytest.approx(6.003, rel=1e-9)

    def test_rejects_nonpositive_step(self):
        params = make_params(w=np.array([1.0]))
        with pytest.raises(HeroLabError):
            ad.hvp_fd(self.quadratic_loss_fn(np.eye(1)), params, {"w": np.array([1.0])}, h=0.0)


class TestRecords:
    def test_backward_replay_is_bit_identical(self):
        rng = np.random.default_rng(8)
        spec = models.ModelSpec(kind="mlp", input_shape=(4,), classes=3, widths=(4, 8, 3))
        params = models.build(spec, seed=5)
        batch = (rng.standard_normal((6, 4)), rng.integers(0, 3, size=6))
        rec = models.model_loss(spec, params, batch)
        first = ad.backward(rec)
        second = ad.backward(rec)
        for name in first:
            assert first[name].tobytes() == second[name].tobytes()

    def test_backward_is_linear_in_the_root(self):
        rng = np.random.default_rng(9)
        w0 = rng.standard_normal(4)

        def rec_for(mode):
            params = make_params(w=w0)

            def fn(leaves, _):
                w = leaves["w"]
                f = ad.reduce_sum(ad.mul(w, w))
                g = ad.reduce_sum(ad.mul(3.0, w))
                return {"f": f, "g": g, "sum": ad.add(f, g)}[mode]
            return ad.forward(fn, params)

        gf = ad.backward(rec_for("f"))["w"]
        gg = ad.backward(rec_for("g"))["w"]
        gsum = ad.backward(rec_for("sum"))["w"]
        np.testing.assert_allclose(gsum, gf + gg, atol=1e-12)

    def test_unreached_leaf_gets_zeros(self):
        params = make_params(used=np.ones(2), unused=np.ones(3))
        rec = ad.forward(lambda leaves, _: ad.reduce_sum(leaves["used"]), params)
        g = ad.backward(rec)
        np.testing.assert_array_equal(g["unused"], np.zeros(3))

    def test_nonscalar_root_rejected(self):
        params = make_params(w=np.ones(3))
        with pytest.raises(ShapeError):
            ad.forward(lambda leaves, _: ad.mul(leaves["w"], 2.0), params)


class TestPassCounters:
    def test_purpose_tagging(self):
        params = make_params(w=np.array([1.0, 2.0]))

        def run():
            rec = ad.forward(lambda leaves, _: ad.reduce_sum(ad.mul(leaves["w"], leaves["w"])),
                             params)
            ad.backward(rec)

        ad.reset_pass_counts()
        run()
        run()
        with ad.tape_purpose("reg"):
            run()
        counts = ad.pass_counts()
        assert counts[("loss", "forward")] == 2
        assert counts[("loss", "backward")] == 2
        assert counts[("reg", "forward")] == 1
        assert counts[("reg", "backward")] == 1
        ad.reset_pass_counts()
        assert ad.pass_counts() == {}


class TestBatchNormOps:
    def test_train_mode_normalizes_and_reports_stats(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((16, 5)) * 3.0 + 1.5
        out, m, v = ad.batchnorm_train(x, np.ones(5), np.zeros(5))
        np.testing.assert_allclose(m, x.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(v, x.var(axis=0), rtol=1e-12)
        np.testing.assert_allclose(out.mean(axis=0), np.zeros(5), atol=1e-12)
        np.testing.assert_allclose(out.var(axis=0), np.ones(5), rtol=1e-4)

    def test_single_sample_batch_rejected(self):
        with pytest.raises(ShapeError):
            ad.batchnorm_train(np.ones((1, 4)), np.ones(4), np.zeros(4))

    def test_fixed_mode_matches_train_stats(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((8, 3))
        scale, shift = np.array([2.0, 0.5, 1.0]), np.array([0.1, -0.2, 0.0])
        out_t, m, v = ad.batchnorm_train(x, scale, shift)
        out_f = ad.batchnorm_fixed(x, scale, shift, m, v)
        np.testing.assert_allclose(out_f, out_t, rtol=1e-12)
