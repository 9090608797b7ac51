import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ibnseg import autodiff as ad
from ibnseg.autodiff import Tape, Var
from ibnseg.nn import (NormParams, NormPolicy, ParamScope, SwitchableWeights, batch_norm, bottleneck_block,
                       build_toynet, forward_segmentation, ibn_a_split, instance_norm, layer_norm, load_checkpoint,
                       save_checkpoint, switchable_norm)

EPS = 1e-5
TO_BN = np.array([-40.0, -40.0, 40.0])
TO_IN = np.array([40.0, -40.0, -40.0])
TO_LN = np.array([-40.0, 40.0, -40.0])


def plain(c, running=False, eps=EPS):
    return NormParams.create(c, running=running, eps=eps)


class TestBatchNorm:
    def test_constant_channel_gives_beta(self):
        p = plain(2)
        p.beta = np.array([0.5, -1.0])
        x = np.ones((2, 2, 3, 3)) * np.array([3.0, -7.0]).reshape(1, 2, 1, 1)
        out = batch_norm(x, p, "train").value
        np.testing.assert_allclose(out, np.broadcast_to(p.beta.reshape(1, 2, 1, 1), x.shape), atol=1e-12)

    def test_train_stats(self, rng):
        out = batch_norm(rng.normal(3.0, 2.0, size=(4, 3, 5, 5)), plain(3), "train").value
        mu = out.mean(axis=(0, 2, 3))
        var = out.var(axis=(0, 2, 3))
        assert np.all(np.abs(mu) < 1e-9)
        assert np.all((var >= 1 - 10 * EPS) & (var <= 1))

    def test_eval_hand_value(self):
        p = NormParams(np.array([2.0]), np.array([1.0]), np.zeros(1), np.ones(1))
        out = batch_norm(np.ones((1, 1, 1, 1)), p, "eval").value
        assert out[0, 0, 0, 0] == pytest.approx(2.0 / np.sqrt(1 + EPS) + 1.0, abs=1e-15)
        assert out[0, 0, 0, 0] == pytest.approx(3.0, abs=1e-4)

    def test_running_update(self, rng):
        p = plain(2, running=True)
        x = rng.normal(size=(3, 2, 4, 4))
        batch_norm(x, p, "train")
        np.testing.assert_allclose(p.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-15)
        np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), atol=1e-15)

    def test_single_value_rejected(self):
        with pytest.raises(ValueError):
            batch_norm(np.ones((1, 2, 1, 1)), plain(2), "train")

    def test_channel_mismatch(self):
        with pytest.raises(ad.ShapeError):
            batch_norm(np.ones((2, 3, 2, 2)), plain(2), "train")


class TestInstanceAndLayerNorm:
    def test_hand_plane(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
        out = instance_norm(x, plain(1)).value.reshape(-1)
        want = (np.array([1, 2, 3, 4]) - 2.5) / np.sqrt(1.25 + EPS)
        np.testing.assert_allclose(out, want, atol=1e-15)
        np.testing.assert_allclose(np.abs(out), [1.3416, 0.4472, 0.4472, 1.3416], atol=1e-4)

    def test_plane_means_zero(self, rng):
        out = instance_norm(rng.normal(size=(2, 3, 4, 4)), plain(3)).value
        assert np.abs(out.mean(axis=(2, 3))).max() < 1e-12

    @given(seed=st.integers(0, 2**16))
    def test_affine_invariance(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(2, 3, 5, 5))
        a = r.uniform(0.2, 5.0, size=(2, 3, 1, 1))
        b = r.uniform(-3, 3, size=(2, 3, 1, 1))
        # exact invariance needs a negligible eps; the default 1e-5 shifts results by ~eps/var
        p = plain(3, eps=1e-14)
        np.testing.assert_allclose(instance_norm(a * x + b, p).value, instance_norm(x, p).value, rtol=0, atol=1e-9)

    def test_single_position_rejected(self):
        with pytest.raises(ValueError):
            instance_norm(np.ones((2, 2, 1, 1)), plain(2))

    def test_layer_norm_hand(self):
        out = layer_norm(np.array([1.0, 3.0]).reshape(1, 2, 1, 1), plain(2)).value.reshape(-1)
        np.testing.assert_allclose(out, [-1, 1], atol=1e-5)

    def test_layer_norm_constant_gives_beta(self):
        p = plain(2)
        p.beta = np.array([0.25, 0.75])
        out = layer_norm(np.full((1, 2, 2, 2), 4.0), p).value
        np.testing.assert_allclose(out[0, :, 0, 0], p.beta, atol=1e-12)

    def test_layer_norm_sample_mean_zero(self, rng):
        out = layer_norm(rng.normal(size=(3, 2, 3, 3)), plain(2)).value
        assert np.abs(out.mean(axis=(1, 2, 3))).max() < 1e-12


class TestSwitchableNorm:
    @pytest.mark.parametrize("logits,reference", [(TO_BN, "bn"), (TO_IN, "in"), (TO_LN, "ln")])
    def test_saturation(self, rng, logits, reference):
        x = rng.normal(size=(2, 3, 4, 4))
        out = switchable_norm(x, plain(3), SwitchableWeights(logits, logits)).value
        ref = {"bn": lambda: batch_norm(x, plain(3), "train"), "in": lambda: instance_norm(x, plain(3)),
               "ln": lambda: layer_norm(x, plain(3))}[reference]().value
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-6)

    def test_equal_logits_mix_means_arithmetically(self, rng):
        x = rng.normal(size=(2, 2, 2, 2))
        out = switchable_norm(x, plain(2, eps=1e-14), SwitchableWeights(np.zeros(3), TO_BN)).value
        mu = (x.mean(axis=(2, 3), keepdims=True) + x.mean(axis=(1, 2, 3), keepdims=True)
              + x.mean(axis=(0, 2, 3), keepdims=True)) / 3
        var = x.var(axis=(0, 2, 3), keepdims=True)
        np.testing.assert_allclose(out, (x - mu) / np.sqrt(var + 1e-14), atol=1e-9)

    def test_in_bn_branch_set(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        w = SwitchableWeights(np.array([40.0, 0.0, -40.0]), np.array([40.0, 0.0, -40.0]), ("IN", "BN"))
        np.testing.assert_allclose(switchable_norm(x, plain(3), w).value, instance_norm(x, plain(3)).value, atol=1e-6)

    def test_eval_uses_running_stats(self, rng):
        p = plain(2, running=True)
        x = rng.normal(size=(4, 2, 3, 3))
        switchable_norm(x, p, SwitchableWeights(TO_BN, TO_BN), "train")
        bn = NormParams(np.ones(2), np.zeros(2), p.running_mean.copy(), p.running_var.copy())
        np.testing.assert_allclose(switchable_norm(x, p, SwitchableWeights(TO_BN, TO_BN), "eval").value,
                                   batch_norm(x, bn, "eval").value, atol=1e-6)

    def test_bad_branch_sets(self):
        with pytest.raises(ValueError):
            SwitchableWeights(branches=())
        with pytest.raises(ValueError):
            SwitchableWeights(branches=("IN", "GN"))

    def test_gradients_reach_logits(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        w = rng.normal(size=x.shape)
        for target in ("mean", "var"):
            def f(v):
                wts = SwitchableWeights(v, np.zeros(3)) if target == "mean" else SwitchableWeights(np.zeros(3), v)
                return ad.sum(switchable_norm(x, plain(3), wts) * w)
            assert ad.grad_check(f, rng.normal(size=3)) < 1e-5


def block_io(policy, rng, widths=(4, 4)):
    net = build_toynet(policy, widths, 2, seed=0)
    x = np.abs(rng.normal(size=(2, widths[0], 6, 6)))
    return net, x


class TestBlocks:
    def test_ibn_a_split(self):
        assert ibn_a_split(4) == 2 and ibn_a_split(5) == 3 and ibn_a_split(1) == 1

    def test_ibn_a_channels(self, rng):
        net, x = block_io("IBN_A", rng, (8, 8))
        assert net.params["block0.norm1.in.gamma"].shape == (2,)
        assert net.params["block0.norm1.bn.gamma"].shape == (2,)

    def test_zero_residual_is_relu_identity(self, rng):
        net, x = block_io("PLAIN_BN", rng)
        net.params["block0.bn3.gamma"][:] = 0.0
        x = rng.normal(size=x.shape)
        out = bottleneck_block(Var(x), ParamScope(net, None), 0, "train").value
        np.testing.assert_array_equal(out, np.maximum(x, 0))

    def test_ibn_s_saturated_equals_plain(self, rng):
        net_s, x = block_io("IBN_S", rng)
        net_p, _ = block_io("PLAIN_BN", rng)
        for k, v in net_p.params.items():
            if k in net_s.params:
                net_s.params[k] = v.copy()
        net_s.params["block0.norm1.sn.gamma"] = net_p.params["block0.norm1.bn.gamma"].copy()
        net_s.params["block0.norm1.sn.mean_logits"] = TO_BN.copy()
        net_s.params["block0.norm1.sn.var_logits"] = TO_BN.copy()
        a = bottleneck_block(Var(x), ParamScope(net_s, None), 0, "train").value
        b = bottleneck_block(Var(x), ParamScope(net_p, None), 0, "train").value
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-6)

    def test_ibn_b_is_plain_followed_by_in(self, rng):
        net_b, x = block_io("IBN_B", rng)
        net_p, _ = block_io("PLAIN_BN", rng)
        net_p.params = {k: v.copy() for k, v in net_b.params.items() if not k.startswith("block0.in_out")}
        taps = {}
        bottleneck_block(Var(x), ParamScope(net_b, None), 0, "train", taps)
        expect = np.maximum(instance_norm(_residual_sum(net_p, x), plain(4)).value, 0)
        np.testing.assert_allclose(taps["block0.relu3"].value, expect, atol=1e-12)

    @pytest.mark.parametrize("policy", list(NormPolicy))
    def test_block_gradcheck(self, rng, policy):
        net = build_toynet(policy, (4, 6), 2, seed=1)
        w = rng.normal(size=(2, 6, 3, 3))
        x = np.abs(rng.normal(size=(2, 4, 5, 5))) + 0.05
        err = ad.grad_check(lambda v: ad.sum(bottleneck_block(v, ParamScope(net, None), 1, "train") * w), x)
        assert err < 1e-5

    def test_parameter_gradcheck_through_block(self, rng):
        net = build_toynet("IBN_S", (4, 4), 2, seed=1)
        x = np.abs(rng.normal(size=(2, 4, 5, 5)))
        w = rng.normal(size=(2, 4, 5, 5))
        for name in ("block0.norm1.sn.gamma", "block0.norm1.sn.beta", "block0.norm1.sn.mean_logits"):
            def f(v, name=name):
                return ad.sum(bottleneck_block(Var(x), ParamScope(net, {name: v}), 0, "train") * w)
            assert ad.grad_check(f, net.params[name] + rng.normal(scale=0.3, size=net.params[name].shape)) < 1e-5


def _residual_sum(net, x):
    """Plain block output before its final ReLU, wired by hand."""
    scope = ParamScope(net, None)
    h = ad.relu(batch_norm(ad.conv2d(x, scope("block0.conv1.weight")), scope.norm("block0.norm1.bn"), "train"))
    h = ad.relu(batch_norm(ad.conv2d(h, scope("block0.conv2.weight"), padding=1), scope.norm("block0.bn2"), "train"))
    h = batch_norm(ad.conv2d(h, scope("block0.conv3.weight")), scope.norm("block0.bn3"), "train")
    return h + Var(x)


class TestToyNet:
    def test_determinism(self):
        a = build_toynet("IBN_S", [8, 16], 7, seed=3)
        b = build_toynet("IBN_S", [8, 16], 7, seed=3)
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)

    def test_probe_registry(self):
        net = build_toynet("PLAIN_BN", [8, 16], 7)
        assert len(net.probes) == 2 + 3 * 2
        assert len(set(net.probes)) == len(net.probes)

    def test_output_shape_and_capture(self, rng):
        net = build_toynet("IBN_A", [8, 16], 7)
        x = rng.uniform(size=(2, 3, 16, 16))
        logits, caps = forward_segmentation(net, x, "eval")
        assert logits.shape == (2, 7, 16, 16) and caps == {}
        _, caps = forward_segmentation(net, x, "eval", capture=net.probes)
        assert set(caps) == set(net.probes)

    def test_unknown_probe(self, rng):
        net = build_toynet("PLAIN_BN", [4], 2)
        with pytest.raises(KeyError):
            forward_segmentation(net, rng.uniform(size=(1, 3, 8, 8)), capture=["nope"])

    def test_eval_is_repeatable(self, rng):
        net = build_toynet("IBN_S", [4, 8], 3)
        x = rng.uniform(size=(2, 3, 12, 12))
        a, _ = forward_segmentation(net, x, "eval")
        b, _ = forward_segmentation(net, x, "eval")
        assert a.value.tobytes() == b.value.tobytes()

    def test_single_channel_input_is_duplicated(self, rng):
        net = build_toynet("PLAIN_BN", [4], 2)
        x = rng.uniform(size=(1, 1, 8, 8))
        a, _ = forward_segmentation(net, x, "eval")
        b, _ = forward_segmentation(net, np.repeat(x, 3, axis=1), "eval")
        np.testing.assert_array_equal(a.value, b.value)

    def test_wrong_channels(self, rng):
        net = build_toynet("PLAIN_BN", [4], 2)
        with pytest.raises(ad.ShapeError):
            forward_segmentation(net, rng.uniform(size=(1, 2, 8, 8)))

    def test_checkpoint_round_trip(self, tmp_path, rng):
        net = build_toynet("IBN_S", [4, 8], 3, seed=2)
        forward_segmentation(net, rng.uniform(size=(2, 3, 8, 8)), "train")
        save_checkpoint(net, tmp_path / "ck")
        back = load_checkpoint(tmp_path / "ck")
        assert back.policy is NormPolicy.IBN_S and back.widths == (4, 8)
        for k, v in net.params.items():
            np.testing.assert_array_equal(back.params[k], v.astype(np.float32))
        for k, v in net.buffers.items():
            np.testing.assert_array_equal(back.buffers[k], v.astype(np.float32))

    def test_checkpoint_shape_mismatch(self, tmp_path):
        net = build_toynet("PLAIN_BN", [4], 2)
        save_checkpoint(net, tmp_path / "ck")
        manifest = tmp_path / "ck" / "manifest.txt"
        manifest.write_text(manifest.read_text().replace("widths 4", "widths 6"))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "ck")

    def test_bad_policy(self):
        with pytest.raises(ValueError):
            build_toynet("GN", [4], 2)

    def test_full_network_gradcheck(self, rng):
        net = build_toynet("IBN_A", [4, 6], 2, seed=0)
        x = rng.uniform(size=(2, 3, 6, 6))
        y = (rng.uniform(size=(2, 2, 6, 6)) > 0.5).astype(float)
        from ibnseg.losses import hybrid_loss, LossConfig
        name = "block1.conv2.weight"

        def f(v):
            tape_free = {name: v}
            logits, _ = forward_segmentation(net, x, "train", bound=tape_free)
            return hybrid_loss(logits, y, LossConfig(1.0, 0.0))

        assert ad.grad_check(f, net.params[name]) < 1e-5
