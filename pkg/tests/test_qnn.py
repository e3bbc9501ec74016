import numpy as np
import pytest

from qcontrast.errors import ConfigurationError, DimensionError
from qcontrast.qnn import (
    BackboneConfig,
    ModelConfig,
    QuadraticConv1d,
    build_network,
    conventional_twin,
    forward_two_branch,
    load_checkpoint,
    read_checkpoint,
    relinear_init,
    save_checkpoint,
    Network,
)
from qcontrast.tensor import Tensor, grad_check


def small_cfg(neuron="quadratic", variant="full", n_classes=3):
    return ModelConfig(BackboneConfig(neuron, variant, [4, 4, 8], input_len=64), n_classes)


class TestQuadraticLayer:
    @pytest.mark.parametrize("variant", ["full", "no_power", "single_inner"])
    def test_fused_matches_composed(self, variant):
        rng = np.random.default_rng(0)
        layer = QuadraticConv1d(2, 3, 5, stride=2, padding=2, variant=variant)
        for p in layer.params.values():
            p.data[...] = rng.normal(size=p.shape)
        x = Tensor(rng.normal(size=(2, 2, 31)))
        np.testing.assert_allclose(layer(x).data, layer.composed(x).data, atol=1e-12)

    def test_hand_value(self):
        # x=[1,2], k=1: (x+0)(2x+1) + x^2*3 + 4
        layer = QuadraticConv1d(1, 1, 1)
        layer.w_r.data[...] = 1.0
        layer.w_g.data[...] = 2.0
        layer.b_g.data[...] = 1.0
        layer.w_b.data[...] = 3.0
        layer.c.data[...] = 4.0
        out = layer(Tensor([[[1.0, 2.0]]])).data.ravel()
        np.testing.assert_array_equal(out, [1 * 3 + 3 + 4, 2 * 5 + 12 + 4])

    def test_relinear_state_is_linear(self):
        layer = QuadraticConv1d(2, 4, 3, padding=1)
        layer.init(np.random.default_rng(1))
        assert not layer.w_g.data.any() and not layer.w_b.data.any() and not layer.c.data.any()
        assert np.all(layer.b_g.data == 1.0)
        x = Tensor(np.random.default_rng(2).normal(size=(3, 2, 20)))
        from qcontrast.tensor import conv1d

        np.testing.assert_allclose(layer(x).data, conv1d(x, layer.w_r, layer.b_r, 1, 1).data, atol=1e-12)

    def test_he_scale(self):
        layer = QuadraticConv1d(16, 64, 7)
        layer.init(np.random.default_rng(0))
        assert layer.w_r.data.std() == pytest.approx(np.sqrt(2 / (16 * 7)), rel=0.05)

    def test_variant_params(self):
        assert set(QuadraticConv1d(1, 1, 3, variant="no_power").params) == {"w_r", "b_r", "w_g", "b_g"}
        assert set(QuadraticConv1d(1, 1, 3, variant="single_inner").params) == {"w_r", "b_r", "w_b", "c"}
        with pytest.raises(ConfigurationError):
            QuadraticConv1d(1, 1, 3, variant="cubic")

    @pytest.mark.parametrize("variant", ["full", "no_power", "single_inner"])
    def test_gradients(self, variant):
        rng = np.random.default_rng(5)
        layer = QuadraticConv1d(2, 2, 3, stride=2, padding=1, variant=variant)
        for p in layer.params.values():
            p.data[...] = rng.normal(size=p.shape)
        x = Tensor(rng.normal(size=(2, 2, 9)), requires_grad=True)
        w = Tensor(rng.normal(size=layer(x).shape))
        report = grad_check(lambda: (layer(x) * w).sum(), [x, *layer.params.values()])
        assert report.passed, report.max_rel_error


class TestBackbone:
    def test_table_shapes(self):
        net = build_network(ModelConfig(BackboneConfig(), 10), 0)
        outs = net.backbone.trace(Tensor(np.random.default_rng(0).normal(size=(2, 1, 2048))))
        assert [o.shape[1:] for o in outs] == [(16, 512), (16, 512), (32, 256), (64, 128), (128, 64)]
        assert net.features(np.zeros((2, 1, 2048))).shape == (2, 128)

    def test_reduced_backbone(self):
        net = build_network(ModelConfig(BackboneConfig(channels=[16, 16, 32], input_len=512), 4), 0)
        assert net.features(np.zeros((2, 1, 512))).shape == (2, 32)
        assert net(np.zeros((2, 1, 512))).shape == (2, 4)

    def test_bad_configs(self):
        for bad in (
            BackboneConfig(neuron="cubic"),
            BackboneConfig(channels=[16, 32]),
            BackboneConfig(block_kernel=4),
            BackboneConfig(input_len=8),
        ):
            with pytest.raises(ConfigurationError):
                bad.validate()

    def test_degenerate_equals_conventional(self):
        net = build_network(small_cfg(), 7)
        twin = conventional_twin(net)
        x = np.random.default_rng(1).normal(size=(5, 1, 64))
        for training in (False, True):
            np.testing.assert_allclose(net(x, training).data, twin(x, training).data, atol=1e-10)

    def test_same_seed_same_linear_weights(self):
        q = build_network(small_cfg(), 3)
        c = build_network(small_cfg("conventional"), 3)
        cs = c.state_dict()
        for name, value in cs.items():
            np.testing.assert_array_equal(q.state_dict()[name], value)

    def test_quadratic_params_triple(self):
        conv = small_cfg("conventional")
        q, c = build_network(small_cfg(), 0), build_network(conv, 0)

        def conv_count(net):
            return sum(t.data.size for name, t, _ in net.named_parameters() if ".w_" in name or name.endswith(("b_r", "b_g", ".c")))

        assert conv_count(q) == 3 * conv_count(c)

    def test_param_groups_partition(self):
        net = build_network(small_cfg(), 0)
        groups = relinear_init(net, 1)
        ids = [id(t) for g in groups.values() for t in g.members]
        assert len(ids) == len(set(ids)) == len(net.parameters())
        quad_names = {n.split(".")[-1] for n, _, tag in net.named_parameters() if tag == "quadratic"}
        assert quad_names == {"w_g", "b_g", "w_b", "c"}

    def test_conventional_has_no_quadratic_group(self):
        assert build_network(small_cfg("conventional"), 0).param_groups()["quadratic"].members == []


class TestTwoBranch:
    def test_shapes_and_unit_norm(self):
        net = build_network(small_cfg(), 0)
        rng = np.random.default_rng(0)
        raw = rng.normal(size=(4, 64))
        logits, emb = forward_two_branch(net, raw, rng.normal(size=(8, 64)))
        assert logits.shape == (4, 3) and emb.shape == (8, 64)
        np.testing.assert_allclose(np.linalg.norm(emb.data, axis=1), 1.0, atol=1e-12)

    def test_view_count_checked(self):
        net = build_network(small_cfg(), 0)
        with pytest.raises(DimensionError):
            forward_two_branch(net, np.zeros((4, 64)), np.zeros((4, 64)))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = small_cfg()
        net = build_network(cfg, 0)
        net(np.random.default_rng(0).normal(size=(4, 1, 64)), training=True)  # move running stats
        state = net.state_dict()
        state["norm.mean"] = np.array(0.25)
        save_checkpoint(tmp_path / "m.ckpt", state, cfg.digest())
        other = build_network(cfg, 99)
        extra = load_checkpoint(tmp_path / "m.ckpt", other)
        assert set(extra) == {"norm.mean"} and float(extra["norm.mean"]) == 0.25
        for k, v in other.state_dict().items():
            np.testing.assert_array_equal(v, state[k])
        x = np.random.default_rng(1).normal(size=(3, 1, 64))
        np.testing.assert_array_equal(net(x).data, other(x).data)

    def test_digest_mismatch(self, tmp_path):
        net = build_network(small_cfg(), 0)
        save_checkpoint(tmp_path / "m.ckpt", net.state_dict(), net.cfg.digest())
        with pytest.raises(ConfigurationError, match="digest"):
            load_checkpoint(tmp_path / "m.ckpt", Network(small_cfg(variant="no_power")))

    def test_corrupt(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(ConfigurationError, match="magic"):
            read_checkpoint(tmp_path / "bad")
        net = build_network(small_cfg(), 0)
        save_checkpoint(tmp_path / "m.ckpt", net.state_dict(), net.cfg.digest())
        blob = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "cut").write_bytes(blob[:-9])
        with pytest.raises(ConfigurationError, match="truncated"):
            read_checkpoint(tmp_path / "cut")

    def test_digest_stable(self):
        assert small_cfg().digest() == small_cfg().digest()
        assert small_cfg().digest() != small_cfg(n_classes=4).digest()
