"""Uniform weight quantization: grids, invariants, sweeps."""

import numpy as np
import pytest

from hero_lab import data, models, quantize, trainers
from hero_lab.errors import HeroLabError


def random_tensors(count, seed):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        shape = tuple(rng.integers(1, 40, size=int(rng.integers(1, 4))))
        scale = 10.0 ** rng.uniform(-3, 3)
        yield rng.standard_normal(shape) * scale + rng.uniform(-5, 5) * scale


class TestGrid:
    def test_two_bit_levels_by_hand(self):
        # range [-1, 1] with 4 levels: -1, -1/3, 1/3, 1
        spec = quantize.QuantSpec(bits=2)
        v = np.array([-1.0, -0.6, 0.4, 1.0])
        q = quantize.quantize_tensor(v, spec)
        np.testing.assert_allclose(q, [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0], rtol=1e-15)
        assert quantize.quant_step(spec, v) == pytest.approx(2.0 / 3.0, rel=1e-15)

    def test_half_to_even_tie(self):
        # 0 sits exactly between levels -1/3 and 1/3; its index 1.5 rounds
        # to the even index 2, landing on 1/3
        q = quantize.quantize_tensor(np.array([-1.0, 0.0, 1.0]), quantize.QuantSpec(bits=2))
        assert q[1] == pytest.approx(1.0 / 3.0, rel=1e-15)

    def test_endpoints_exact(self):
        rng = np.random.default_rng(1)
        v = rng.standard_normal(100) * 7.3
        q = quantize.quantize_tensor(v, quantize.QuantSpec(bits=3))
        assert q.min() == v.min()
        assert q.max() == v.max()

    def test_symmetric_policy_centered(self):
        spec = quantize.QuantSpec(bits=2, range_policy="absmax_symmetric")
        v = np.array([-0.2, 0.1, 0.9])
        # grid spans [-0.9, 0.9]; levels -0.9, -0.3, 0.3, 0.9
        q = quantize.quantize_tensor(v, spec)
        np.testing.assert_allclose(q, [-0.3, 0.3, 0.9], rtol=1e-15)

    def test_bits_range_validated(self):
        for bad in (1, 17, 0):
            with pytest.raises(HeroLabError):
                quantize.QuantSpec(bits=bad)
        with pytest.raises(HeroLabError):
            quantize.QuantSpec(bits=4, range_policy="percentile")


class TestInvariants:
    def test_linf_idempotence_levels_order(self):
        for policy in quantize.POLICIES:
            for i, v in enumerate(random_tensors(25, seed=17)):
                for bits in (2, 4, 8):
                    spec = quantize.QuantSpec(bits=bits, range_policy=policy)
                    q = quantize.quantize_tensor(v, spec)
                    step = quantize.quant_step(spec, v)
                    assert np.abs(q - v).max() <= step / 2.0
                    q2 = quantize.quantize_tensor(q, spec)
                    assert q.tobytes() == q2.tobytes()
                    assert np.unique(q).size <= 2**bits
                    order = np.argsort(v.ravel(), kind="stable")
                    sq = q.ravel()[order]
                    assert (np.diff(sq) >= 0).all()

    def test_on_grid_values_unchanged(self):
        # build the grid exactly as the quantizer does; note lo + step*1
        # differs from the literal -1/3 by one ulp
        spec = quantize.QuantSpec(bits=2)
        lo, hi = -1.0, 1.0
        step = (hi - lo) / 3.0
        v = lo + step * np.arange(4)
        v[0], v[3] = lo, hi
        assert quantize.quantize_tensor(v, spec).tobytes() == v.tobytes()

    def test_constant_tensor_unchanged(self):
        v = np.full((4, 4), 2.5)
        q = quantize.quantize_tensor(v, quantize.QuantSpec(bits=4))
        np.testing.assert_array_equal(q, v)
        # all-zero tensor has no grid under the symmetric policy either
        z = np.zeros(6)
        q = quantize.quantize_tensor(z, quantize.QuantSpec(bits=4,
                                                           range_policy="absmax_symmetric"))
        np.testing.assert_array_equal(q, z)


class TestParamsAndSweep:
    def fixture(self, seed):
        pool = data.make_synthetic("gaussians", 900, 10, seed=70 + seed, noise=0.45,
                                   contrast=0.35)
        train, test = data.split(pool, 600)
        spec = models.ModelSpec(kind="mlp", input_shape=(28, 28), classes=10,
                                widths=(784, 32, 10))
        cfg = trainers.TrainerConfig(rule="sgd", lr=0.1, total_steps=150, momentum=0.9)
        res = trainers.train(spec, train, cfg, seed=seed, batch_size=64)
        return spec, res.params, test

    def test_only_weight_tensors_touched(self):
        spec = models.ModelSpec(kind="mlp", input_shape=(6,), classes=3, widths=(6, 8, 3),
                                batch_norm=True)
        params = models.build(spec, seed=0)
        q = quantize.quantize_params(params, quantize.QuantSpec(bits=2))
        assert not np.array_equal(q.get("fc1.weight").value, params.get("fc1.weight").value)
        for name in ("bn1.scale", "bn1.shift", "fc2.bias"):
            assert q.get(name).value.tobytes() == params.get(name).value.tobytes()
        # the original set is never modified in place
        assert params.get("fc1.weight").value.tobytes() != q.get("fc1.weight").value.tobytes()

    def test_sweep_layout(self):
        spec, params, test = self.fixture(seed=0)
        rows = quantize.sweep(spec, params, test, [8, 2, 4, 2])
        assert [r.bits for r in rows] == [0, 2, 4, 8]  # fp row first, deduped ascending
        loss, acc = models.evaluate(spec, params, test)
        assert rows[0].eval_loss == loss and rows[0].eval_acc == acc

    def test_sixteen_bit_indistinguishable_from_fp(self):
        spec, params, test = self.fixture(seed=0)
        rows = quantize.sweep(spec, params, test, [16])
        assert abs(rows[1].eval_acc - rows[0].eval_acc) <= 0.001

    def test_two_bits_hurt_a_trained_model(self):
        # over 3 seeds the 2-bit accuracy never beats the 16-bit accuracy
        for seed in (0, 1, 2):
            spec, params, test = self.fixture(seed)
            accs = {r.bits: r.eval_acc for r in quantize.sweep(spec, params, test, [2, 16])}
            assert accs[2] <= accs[16]
