"""Model tests: construction determinism, forward contracts, gate behavior."""

import numpy as np
import pytest

from fedseg.errors import ConfigError, ShapeError
from fedseg.metrics import soft_dice_loss
from fedseg.model import AttentionUNet, ModelConfig, plain_variant
from fedseg.tensor import (
    Tensor,
    conv2d,
    expand_channels,
    grad_check,
    mul,
    relu,
    sigmoid,
    upsample2d,
)


def parameter_count_reference(cfg):
    """Independent layer-by-layer sum: conv params = cout*cin*k*k + cout."""
    def conv(cout, cin, k):
        return cout * cin * k * k + cout

    widths = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
    total = 0
    prev = cfg.in_channels
    for w in widths[:-1]:
        total += conv(w, prev, 3) + conv(w, w, 3)
        prev = w
    total += conv(widths[-1], widths[-2], 3) + conv(widths[-1], widths[-1], 3)
    for i in range(cfg.depth):
        skip_c, gate_c = widths[i], widths[i + 1]
        if cfg.attention_enabled:
            inter = max(1, gate_c // 2)
            total += conv(inter, skip_c, 1) + conv(inter, gate_c, 1) + conv(1, inter, 1)
        total += conv(skip_c, gate_c, 3) + conv(skip_c, 2 * skip_c, 3) + conv(skip_c, skip_c, 3)
    total += conv(cfg.out_channels, widths[0], 1)
    return total


class TestBuild:
    def test_equal_configs_give_bit_identical_parameters(self):
        cfg = ModelConfig(depth=2, base_channels=4, init_seed=77)
        a, b = AttentionUNet(cfg), AttentionUNet(cfg)
        assert list(a.parameters()) == list(b.parameters())
        for pa, pb in zip(a.parameters().values(), b.parameters().values()):
            assert np.array_equal(pa.data, pb.data)

    @pytest.mark.parametrize("cfg", [
        ModelConfig(),
        ModelConfig(depth=1, base_channels=16),
        ModelConfig(depth=2, base_channels=3, attention_enabled=False),
        ModelConfig(depth=1, base_channels=1),
    ])
    def test_parameter_count_matches_analytic_oracle(self, cfg):
        assert AttentionUNet(cfg).parameter_count == parameter_count_reference(cfg)

    def test_smallest_legal_network_runs(self):
        cfg = ModelConfig(depth=1, base_channels=1, init_seed=3)
        model = AttentionUNet(cfg)
        out = model.forward(np.random.default_rng(0).uniform(size=(1, 1, 4, 4)))
        assert out.shape == (1, 1, 4, 4)

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigError):
            AttentionUNet(ModelConfig(depth=0))
        with pytest.raises(ConfigError):
            AttentionUNet(ModelConfig(base_channels=0))


class TestWeightsRoundTrip:
    def test_set_get_identity(self):
        model = AttentionUNet(ModelConfig(depth=1, base_channels=2, init_seed=5))
        x = np.random.default_rng(1).uniform(size=(1, 1, 8, 8))
        before = model.forward(x).data
        model.set_weights(model.get_weights())
        assert np.array_equal(model.forward(x).data, before)

    def test_zero_weights_give_half_everywhere(self):
        model = AttentionUNet(ModelConfig(depth=2, base_channels=2))
        model.set_weights(np.zeros(model.parameter_count))
        out = model.forward(np.random.default_rng(2).uniform(size=(1, 1, 8, 8)))
        assert np.all(out.data == 0.5)

    def test_wrong_length_leaves_model_untouched(self):
        model = AttentionUNet(ModelConfig(depth=1, base_channels=2, init_seed=9))
        before = model.get_weights()
        with pytest.raises(ShapeError):
            model.set_weights(np.zeros(model.parameter_count + 1))
        assert np.array_equal(model.get_weights(), before)

    def test_ordering_stable_across_builds(self):
        cfg = ModelConfig(depth=2, base_channels=2, init_seed=11)
        names_a = list(AttentionUNet(cfg).parameters())
        names_b = list(AttentionUNet(cfg).parameters())
        assert names_a == names_b
        assert len(set(names_a)) == len(names_a)


class TestForward:
    def test_output_shape_and_range(self):
        model = AttentionUNet(ModelConfig(depth=2, base_channels=3, init_seed=4))
        x = np.random.default_rng(3).uniform(size=(2, 1, 16, 16))
        out = model.forward(x)
        assert out.shape == (2, 1, 16, 16)
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_forward_deterministic(self):
        model = AttentionUNet(ModelConfig(depth=1, base_channels=2, init_seed=6))
        x = np.random.default_rng(4).uniform(size=(1, 1, 8, 8))
        assert np.array_equal(model.forward(x).data, model.forward(x).data)

    def test_indivisible_extent_rejected(self):
        model = AttentionUNet(ModelConfig(depth=3))
        with pytest.raises(ShapeError, match="divisible"):
            model.forward(np.zeros((1, 1, 12, 12)))

    def test_saturated_gates_match_plain_unet(self):
        cfg = ModelConfig(depth=2, base_channels=4, init_seed=13)
        attn = AttentionUNet(cfg)
        plain = AttentionUNet(plain_variant(cfg))
        shared = {name: p.data.copy() for name, p in attn.parameters().items()
                  if not name.startswith("gate")}
        plain.load_state_dict(shared)
        for i in range(cfg.depth):
            attn.parameters()[f"gate{i}.psi.bias"].data[...] = 1e3
        x = np.random.default_rng(5).uniform(size=(1, 1, 16, 16))
        diff = np.max(np.abs(attn.forward(x).data - plain.forward(x).data))
        assert diff <= 1e-6


class TestAttentionGate:
    def _model(self):
        return AttentionUNet(ModelConfig(depth=1, base_channels=4, init_seed=21))

    def test_zero_saturated_gate_suppresses_skip(self):
        model = self._model()
        model.parameters()["gate0.psi.bias"].data[...] = -1e3
        rng = np.random.default_rng(6)
        x = Tensor(rng.uniform(size=(1, 4, 8, 8)))
        g = Tensor(rng.uniform(size=(1, 8, 4, 4)))
        gated, coeff = model.attention_gate(x, g, 0)
        assert np.max(np.abs(gated.data)) <= 1e-6
        assert np.all(coeff.data > 0.0)

    def test_one_saturated_gate_passes_skip_through(self):
        model = self._model()
        model.parameters()["gate0.psi.bias"].data[...] = 1e3
        rng = np.random.default_rng(7)
        x = Tensor(rng.uniform(size=(1, 4, 8, 8)))
        g = Tensor(rng.uniform(size=(1, 8, 4, 4)))
        gated, coeff = model.attention_gate(x, g, 0)
        assert np.max(np.abs(gated.data - x.data)) <= 1e-6
        assert np.all(coeff.data < 1.0)

    def test_matches_primitive_composition_oracle(self):
        model = self._model()
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(2, 4, 8, 8)))
        g = Tensor(rng.normal(size=(2, 8, 4, 4)))
        gated, coeff = model.attention_gate(x, g, 0)

        p = model.parameters()
        a = conv2d(x, p["gate0.wx.weight"], p["gate0.wx.bias"], stride=2)
        b = conv2d(g, p["gate0.wg.weight"], p["gate0.wg.bias"])
        s = relu(a + b)
        c = sigmoid(conv2d(s, p["gate0.psi.weight"], p["gate0.psi.bias"]))
        want_coeff = upsample2d(c, "bilinear")
        want = mul(x, expand_channels(want_coeff, 4))
        assert np.max(np.abs(gated.data - want.data)) < 1e-12
        assert np.max(np.abs(coeff.data - want_coeff.data)) < 1e-12

    def test_resolution_mismatch_rejected(self):
        model = self._model()
        with pytest.raises(ShapeError):
            model.attention_gate(Tensor(np.zeros((1, 4, 8, 8))),
                                 Tensor(np.zeros((1, 8, 8, 8))), 0)

    def test_coefficients_open_interval_and_shapes(self):
        cfg = ModelConfig(depth=2, base_channels=2, init_seed=31)
        model = AttentionUNet(cfg)
        rng = np.random.default_rng(9)
        for _ in range(20):
            model.forward(rng.uniform(size=(1, 1, 8, 8)))
            assert len(model.gate_coefficients) == cfg.depth
            for level, coeff in zip(reversed(range(cfg.depth)), model.gate_coefficients):
                side = 8 >> level
                assert coeff.shape == (1, 1, side, side)
                assert np.all(coeff > 0.0) and np.all(coeff < 1.0)


def test_end_to_end_gradient_matches_finite_differences():
    cfg = ModelConfig(depth=1, base_channels=2, init_seed=41)
    model = AttentionUNet(cfg)
    rng = np.random.default_rng(10)
    # nudge every parameter off zero so relu kinks stay clear of the probes
    for p in model.parameters().values():
        p.data += rng.uniform(0.05, 0.15, p.shape) * np.where(p.data < 0, -1, 1)
    x = Tensor(rng.uniform(0.2, 0.8, (1, 1, 8, 8)))
    t = Tensor((rng.uniform(size=(1, 1, 8, 8)) > 0.6).astype(float))
    params = list(model.parameters().values())
    err = grad_check(lambda *_: soft_dice_loss(model.forward(x), t), params)
    assert err <= 1e-4
