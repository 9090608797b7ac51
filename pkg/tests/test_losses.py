import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ibnseg import autodiff as ad
from ibnseg.autodiff import Tape
from ibnseg.losses import (IoUAccumulator, LossConfig, bce_loss, dice_loss, hybrid_loss, jaccard_weights,
                           lovasz_extension_oracle, lovasz_hinge, lovasz_hinge_per_task, miou)


def t4(v):
    return np.asarray(v, dtype=float).reshape(1, 1, 1, -1)


def grad(f, s):
    tape = Tape()
    v = tape.variable(s)
    return tape.backward(f(v))[v.node]


def signs(y):
    return np.where(np.asarray(y) > 0, 1.0, -1.0)


class TestBCE:
    def test_log2(self):
        assert float(bce_loss(t4([0.0]), t4([1])).value) == pytest.approx(np.log(2), abs=1e-15)

    def test_saturated_correct(self):
        assert float(bce_loss(t4([100.0, -100.0]), t4([1, 0])).value) < 1e-10

    def test_stable_large_logit(self):
        v = float(bce_loss(t4([100.0]), t4([0])).value)
        assert np.isfinite(v) and v == pytest.approx(100.0, abs=1e-12)

    def test_matches_textbook_form(self, rng):
        s = rng.normal(size=(2, 3, 4, 4))
        y = (rng.uniform(size=s.shape) > 0.5).astype(float)
        p = 1 / (1 + np.exp(-s))
        ref = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert float(bce_loss(s, y).value) == pytest.approx(ref, abs=1e-12)

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            bce_loss(t4([0.0]), t4([0.5]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            bce_loss(np.zeros((1, 1, 1, 2)), np.zeros((1, 1, 1, 3)))


class TestDice:
    def test_saturated_positive(self):
        assert float(dice_loss(t4([50.0, 60.0]), t4([1, 1])).value) == pytest.approx(-1.0, abs=1e-12)

    @given(st.lists(st.floats(-1000, 1000), min_size=1, max_size=20))
    def test_negative_pixels_exactly_zero(self, logits):
        s = t4(logits)
        assert float(dice_loss(s, np.zeros_like(s)).value) == 0.0

    def test_hand_value(self):
        assert float(dice_loss(t4([0.0, 0.0]), t4([1, 0])).value) == pytest.approx(-1 / 3, abs=1e-15)

    def test_zero_gradient_on_negatives(self, rng):
        s = rng.normal(size=(1, 1, 2, 3))
        y = np.array([1, 0, 1, 0, 0, 1], dtype=float).reshape(s.shape)
        g = grad(lambda v: dice_loss(v, y), s)
        assert np.all(g[y == 0] == 0)

    @given(seed=st.integers(0, 2**16))
    def test_range(self, seed):
        r = np.random.default_rng(seed)
        s = r.normal(scale=5, size=(2, 2, 3, 3))
        y = (r.uniform(size=s.shape) > 0.5).astype(float)
        v = float(dice_loss(s, y).value)
        assert -1.0 <= v <= 0.0
        assert float(bce_loss(s, y).value) >= 0.0


class TestLovasz:
    def test_margin_correct(self):
        assert float(lovasz_hinge(t4([2.0]), t4([1])).value) == 0.0

    def test_single_wrong(self):
        assert float(lovasz_hinge(t4([-1.0]), t4([1])).value) == pytest.approx(2.0, abs=1e-15)

    def test_tie_example(self):
        assert float(lovasz_hinge(t4([-1.0, 1.0]), t4([1, 0])).value) == pytest.approx(2.0, abs=1e-15)
        np.testing.assert_allclose(jaccard_weights(np.array([[1.0, 0.0]])), [[1.0, 0.0]])

    def test_oracle_examples(self):
        assert lovasz_extension_oracle([-1.0, -2.0], [1, 0]) == 0.0
        assert lovasz_extension_oracle([2.0], [1]) == 2.0
        with pytest.raises(ValueError):
            lovasz_extension_oracle(np.ones(13), np.ones(13))

    def test_empty_foreground_counts_as_zero(self):
        s = np.zeros((2, 1, 1, 3))
        y = np.zeros_like(s)
        y[0, 0, 0, 0] = 1.0
        per_task = lovasz_hinge_per_task(s, y).value
        assert per_task[1] == 0.0
        assert float(lovasz_hinge(s, y).value) == pytest.approx(per_task[0] / 2, abs=1e-15)

    @given(p=st.integers(1, 8), seed=st.integers(0, 2**16))
    def test_matches_oracle(self, p, seed):
        r = np.random.default_rng(seed)
        y = (r.uniform(size=p) < 0.5).astype(float)
        s = r.uniform(-2, 2, size=p)
        got = float(lovasz_hinge(t4(s), t4(y)).value)
        want = lovasz_extension_oracle(1 - s * signs(y), y) if y.any() else 0.0
        assert got == pytest.approx(want, abs=1e-9)

    def test_ties_do_not_change_value(self):
        # equal margins in swapped order give the same loss
        y = np.array([1.0, 0.0, 1.0, 0.0])
        s = np.array([-0.5, 0.5, -0.5, 0.5])
        a = float(lovasz_hinge(t4(s), t4(y)).value)
        b = float(lovasz_hinge(t4(s[::-1]), t4(y[::-1])).value)
        assert a == pytest.approx(b, abs=1e-15)
        assert a == pytest.approx(lovasz_extension_oracle(1 - s * signs(y), y), abs=1e-12)

    @given(seed=st.integers(0, 2**16), alpha=st.floats(1.0, 10.0))
    def test_margin_scaling(self, seed, alpha):
        r = np.random.default_rng(seed)
        y = (r.uniform(size=6) < 0.5).astype(float)
        y[0] = 1.0
        s = signs(y) * r.uniform(1.1, 3.0, size=6)
        assert float(lovasz_hinge(t4(alpha * s), t4(y)).value) == 0.0
        if alpha > 1.0 + 1e-9:
            assert float(bce_loss(t4(alpha * s), t4(y)).value) < float(bce_loss(t4(s), t4(y)).value)

    def test_non_negative(self, rng):
        for _ in range(20):
            s = rng.normal(scale=3, size=(2, 3, 3, 3))
            y = (rng.uniform(size=s.shape) > 0.6).astype(float)
            assert float(lovasz_hinge(s, y).value) >= 0.0
            assert float(lovasz_hinge(s, y, per_image=False).value) >= 0.0

    def test_batch_flattened_task(self, rng):
        s = rng.uniform(-2, 2, size=(2, 1, 2, 2))
        y = (rng.uniform(size=s.shape) > 0.5).astype(float)
        y[0, 0, 0, 0] = 1.0
        flat_s, flat_y = s.reshape(-1), y.reshape(-1)
        want = lovasz_extension_oracle(1 - flat_s * signs(flat_y), flat_y)
        assert float(lovasz_hinge(s, y, per_image=False).value) == pytest.approx(want, abs=1e-12)

    def test_margin_variant_is_selectable(self, rng):
        s = rng.normal(size=(1, 1, 2, 3))
        y = (rng.uniform(size=s.shape) > 0.5).astype(float)
        y[0, 0, 0, 0] = 1
        assert np.isfinite(float(lovasz_hinge(s, y, delta="margins").value))
        with pytest.raises(ValueError):
            lovasz_hinge(s, y, delta="other")

    def test_gradcheck_generic(self, rng):
        y = np.array([1, 0, 1, 1, 0, 0], dtype=float).reshape(1, 1, 2, 3)
        s = np.array([0.3, 0.7, -1.1, 0.55, -0.2, 1.4]).reshape(y.shape)
        assert ad.grad_check(lambda v: lovasz_hinge(v, y), s) < 1e-5


class TestHybrid:
    def test_reduces_to_bce_bit_exactly(self, rng):
        s = rng.normal(size=(2, 3, 4, 4))
        y = (rng.uniform(size=s.shape) > 0.5).astype(float)
        assert float(hybrid_loss(s, y, LossConfig(0.0, 0.0)).value) == float(bce_loss(s, y).value)
        tape_a, tape_b = Tape(), Tape()
        va, vb = tape_a.variable(s), tape_b.variable(s)
        ga = tape_a.backward(hybrid_loss(va, y, LossConfig(0.0, 0.0)))[va.node]
        gb = tape_b.backward(bce_loss(vb, y))[vb.node]
        assert ga.tobytes() == gb.tobytes()

    @pytest.mark.parametrize("l1,l2", [(1.0, 0.0), (1.0, 1.0), (0.3, 2.5)])
    def test_value_and_gradient_linearity(self, rng, l1, l2):
        s = rng.normal(size=(2, 2, 3, 3))
        y = (rng.uniform(size=s.shape) > 0.5).astype(float)
        cfg = LossConfig(l1, l2)
        parts = [bce_loss, dice_loss, lovasz_hinge]
        weights = [1.0, l1, l2]
        z = 1 + l1 + l2
        v = sum(w * float(f(s, y).value) for w, f in zip(weights, parts)) / z
        assert float(hybrid_loss(s, y, cfg).value) == pytest.approx(v, abs=1e-12)
        g = sum(w * grad(lambda t, f=f: f(t, y), s) for w, f in zip(weights, parts)) / z
        np.testing.assert_allclose(grad(lambda t: hybrid_loss(t, y, cfg), s), g, rtol=0, atol=1e-10)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(-1.0, 0.0)
        assert LossConfig() == LossConfig(1.0, 1.0)


class TestIoU:
    def test_perfect(self, rng):
        m = (rng.uniform(size=(2, 3, 4, 4)) > 0.5)
        m[:, :, 0, 0] = True
        r = miou(m, m)
        assert r.miou == 1.0 and np.all(r.per_class == 1.0)

    def test_disjoint(self):
        p = np.zeros((1, 1, 2, 2), bool)
        t = np.zeros_like(p)
        p[0, 0, 0, 0] = True
        t[0, 0, 1, 1] = True
        assert miou(p, t).per_class[0] == 0.0

    def test_half_cover(self):
        t = np.ones((1, 1, 2, 2), bool)
        p = np.zeros_like(t)
        p[0, 0, 0] = True
        assert miou(p, t).per_class[0] == 0.5

    def test_empty_union_flagged(self):
        r = miou(np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 2)))
        assert r.miou == 1.0 and r.empty.all()

    def test_dataset_level_aggregation(self):
        acc = IoUAccumulator(1)
        t = np.ones((1, 1, 1, 4), bool)
        acc.update(np.array([1, 1, 1, 1], bool).reshape(t.shape), t)
        acc.update(np.zeros_like(t), t)
        assert acc.result().per_class[0] == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            miou(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


def test_exhaustive_small_patterns():
    r = np.random.default_rng(0)
    for p in range(1, 5):
        for pattern in itertools.product((0.0, 1.0), repeat=p):
            y = np.array(pattern)
            s = r.uniform(-2, 2, size=p)
            want = lovasz_extension_oracle(1 - s * signs(y), y) if y.any() else 0.0
            assert float(lovasz_hinge(t4(s), t4(y)).value) == pytest.approx(want, abs=1e-9)
