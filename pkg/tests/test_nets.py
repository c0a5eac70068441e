import numpy as np
import pytest

from mbekit import tensor as T
from mbekit.checkpoint import load_params, save_params
from mbekit.diagnostics import GroupId
from mbekit.errors import ShapeMismatchError
from mbekit.nets import (
    ActivationBundle,
    MlpConfig,
    TransformerConfig,
    draw_param_shift,
    init_mlp_params,
    init_transformer_params,
    mlp_forward,
    parameter_group,
    shifted_params,
    transformer_forward,
)

TINY = TransformerConfig(layers=2, model_dim=8, heads=2, vocab_size=11,
                         context_length=16, unet_skips=True, seed=3)


class TestMlp:
    def test_zero_params_give_zero_output(self):
        cfg = MlpConfig(input_dim=3, hidden_dim=4, output_dim=2)
        params = init_mlp_params(cfg)
        for p in params.values():
            p.data[...] = 0.0
        bundle = mlp_forward(cfg, params, np.ones((5, 3)))
        np.testing.assert_allclose(bundle.logits.data, np.zeros((5, 2)))

    def test_identity_passthrough_with_relu(self):
        cfg = MlpConfig(input_dim=3, hidden_dim=3, output_dim=3, activation="relu")
        params = init_mlp_params(cfg)
        params["layer1.w"].data[...] = np.eye(3)
        params["layer2.w"].data[...] = np.eye(3)
        params["layer1.b"].data[...] = 0.0
        params["layer2.b"].data[...] = 0.0
        x = np.abs(np.random.default_rng(0).standard_normal((4, 3)))
        bundle = mlp_forward(cfg, params, x)
        np.testing.assert_allclose(bundle.logits.data, x)

    def test_matches_hand_matrix_arithmetic(self):
        cfg = MlpConfig(input_dim=4, hidden_dim=5, output_dim=3, seed=7)
        params = init_mlp_params(cfg)
        rng = np.random.default_rng(8)
        x = rng.standard_normal((6, 4))
        bundle = mlp_forward(cfg, params, x)
        # Independent straight-line evaluation.
        h = np.maximum(x @ params["layer1.w"].data + params["layer1.b"].data, 0.0)
        y = h @ params["layer2.w"].data + params["layer2.b"].data
        np.testing.assert_allclose(bundle.layers[0].data, h, atol=1e-12)
        np.testing.assert_allclose(bundle.logits.data, y, atol=1e-12)

    def test_input_width_checked(self):
        cfg = MlpConfig(input_dim=4)
        with pytest.raises(ShapeMismatchError):
            mlp_forward(cfg, init_mlp_params(cfg), np.ones((2, 3)))

    def test_deterministic_init(self):
        cfg = MlpConfig(seed=5)
        a, b = init_mlp_params(cfg), init_mlp_params(cfg)
        for name in a:
            assert np.array_equal(a[name].data, b[name].data)


class TestShiftedParams:
    def setup_method(self):
        self.cfg = MlpConfig(seed=1)
        self.params = init_mlp_params(self.cfg)
        self.delta = draw_param_shift(self.params, seed=2)

    def test_zero_delta_is_identity(self):
        zero = {k: np.zeros(v.shape) for k, v in self.params.items()}
        out = shifted_params(self.params, zero, +1)
        for name in self.params:
            assert np.array_equal(out[name].data, self.params[name].data)

    def test_matches_independent_addition(self):
        plus = shifted_params(self.params, self.delta, +1)
        for name in self.params:
            np.testing.assert_array_equal(
                plus[name].data, self.params[name].data + self.delta[name]
            )

    def test_symmetry_identity(self):
        plus = shifted_params(self.params, self.delta, +1)
        minus = shifted_params(self.params, self.delta, -1)
        for name in self.params:
            np.testing.assert_allclose(
                plus[name].data - minus[name].data, 2 * np.asarray(self.delta[name]),
                atol=1e-15,
            )

    def test_shape_mismatch_rejected(self):
        bad = dict(self.delta)
        bad["layer1.w"] = np.zeros((1, 1))
        with pytest.raises(ShapeMismatchError):
            shifted_params(self.params, bad, +1)


def hand_single_head_attention(x, params, mask_value=-1e30):
    """Independent single-head causal attention + MLP block, straight numpy."""
    def ln(v, g, b, eps=1e-5):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps) * g + b

    seq, d = x.shape
    h = ln(x, params["block1.ln1.gain"].data, params["block1.ln1.bias"].data)
    q = h @ params["block1.attn.wq"].data
    k = h @ params["block1.attn.wk"].data
    v = h @ params["block1.attn.wv"].data
    scores = q @ k.T / np.sqrt(d)
    scores += np.triu(np.full((seq, seq), mask_value), k=1)
    e = np.exp(scores - scores.max(-1, keepdims=True))
    attn = e / e.sum(-1, keepdims=True)
    x = x + (attn @ v) @ params["block1.attn.wo"].data + params["block1.attn.bo"].data
    h = ln(x, params["block1.ln2.gain"].data, params["block1.ln2.bias"].data)
    m = h @ params["block1.mlp.w1"].data + params["block1.mlp.b1"].data
    c = np.sqrt(2.0 / np.pi)
    m = 0.5 * m * (1.0 + np.tanh(c * (m + 0.044715 * m**3)))
    x = x + m @ params["block1.mlp.w2"].data + params["block1.mlp.b2"].data
    return x


class TestTransformer:
    def test_causality(self):
        cfg = TransformerConfig(layers=2, model_dim=8, heads=2, vocab_size=7,
                                context_length=12, seed=0)
        params = init_transformer_params(cfg)
        rng = np.random.default_rng(1)
        tokens = rng.integers(0, 7, size=(2, 10))
        base = transformer_forward(cfg, params, tokens).logits.data
        t = 4
        perturbed = tokens.copy()
        perturbed[0, t] = (perturbed[0, t] + 1) % 7
        new = transformer_forward(cfg, params, perturbed).logits.data
        np.testing.assert_array_equal(base[0, :t], new[0, :t])
        assert np.abs(base[0, t:] - new[0, t:]).max() > 0
        np.testing.assert_array_equal(base[1], new[1])

    def test_zero_skip_gain_matches_no_skips(self):
        with_skips = TINY
        without = TransformerConfig(layers=2, model_dim=8, heads=2, vocab_size=11,
                                    context_length=16, unet_skips=False, seed=3)
        p_skip = init_transformer_params(with_skips)
        p_plain = init_transformer_params(without)
        tokens = np.random.default_rng(2).integers(0, 11, size=(3, 8))
        a = transformer_forward(with_skips, p_skip, tokens).logits.data
        b = transformer_forward(without, p_plain, tokens).logits.data
        np.testing.assert_array_equal(a, b)

    def test_single_head_matches_hand_attention_oracle(self):
        cfg = TransformerConfig(layers=1, model_dim=4, heads=1, vocab_size=2,
                                context_length=6, seed=9)
        params = init_transformer_params(cfg)
        tokens = np.array([[0, 1, 1, 0]])
        bundle = transformer_forward(cfg, params, tokens)

        x0 = (params["embed.token"].data[tokens[0]]
              + params["embed.pos"].data[: tokens.shape[1]])
        expected_rep = hand_single_head_attention(x0, params)
        np.testing.assert_allclose(bundle.layers[0].data, expected_rep, atol=1e-10)

        def ln(v, g, b, eps=1e-5):
            mu = v.mean(-1, keepdims=True)
            var = ((v - mu) ** 2).mean(-1, keepdims=True)
            return (v - mu) / np.sqrt(var + eps) * g + b

        final = ln(expected_rep, params["final_ln.gain"].data, params["final_ln.bias"].data)
        logits = final @ params["head.w"].data + params["head.b"].data
        np.testing.assert_allclose(
            bundle.logits.data.reshape(-1, 2), logits, atol=1e-10
        )

    def test_representations_are_finite_and_token_shaped(self):
        params = init_transformer_params(TINY)
        tokens = np.random.default_rng(4).integers(0, 11, size=(3, 8))
        bundle = transformer_forward(TINY, params, tokens)
        assert len(bundle.layers) == TINY.layers
        for rep in bundle.layers:
            assert rep.shape == (24, 8)
            assert np.all(np.isfinite(rep.data))

    def test_gradient_reaches_every_parameter(self):
        params = init_transformer_params(TINY)
        rng = np.random.default_rng(5)
        tokens = rng.integers(0, 11, size=(2, 8))
        targets = rng.integers(0, 11, size=(2, 8))
        with T.Tape():
            bundle = transformer_forward(TINY, params, tokens)
            flat = T.reshape(bundle.logits, (16, 11))
            loss = T.softmax_cross_entropy(flat, targets.reshape(-1))
            T.backward(loss)
        for name, p in params.items():
            assert p.grad is not None, name
            assert np.abs(p.grad).max() > 0, name

    def test_token_validation(self):
        params = init_transformer_params(TINY)
        with pytest.raises(ValueError, match="out of range"):
            transformer_forward(TINY, params, np.array([[11]]))
        with pytest.raises(ValueError, match="context"):
            transformer_forward(TINY, params, np.zeros((1, 17), dtype=int))

    def test_deterministic_forward(self):
        params = init_transformer_params(TINY)
        tokens = np.random.default_rng(6).integers(0, 11, size=(2, 8))
        a = transformer_forward(TINY, params, tokens).logits.data
        b = transformer_forward(TINY, params, tokens).logits.data
        assert np.array_equal(a, b)


class TestParameterGroups:
    def test_mapping(self):
        assert parameter_group("embed.token", 4) == GroupId(0, "embedding")
        assert parameter_group("block3.attn.wq", 4) == GroupId(3, "attention")
        assert parameter_group("block3.ln1.gain", 4) == GroupId(3, "attention")
        assert parameter_group("block2.mlp.w1", 4) == GroupId(2, "mlp")
        assert parameter_group("block2.ln2.bias", 4) == GroupId(2, "mlp")
        assert parameter_group("skip.gain1", 4) == GroupId(1, "other")
        assert parameter_group("head.w", 4) == GroupId(5, "other")


class TestCheckpoint:
    def test_roundtrip_is_bit_exact(self, tmp_path):
        params = init_transformer_params(TINY)
        path = tmp_path / "model.ntar"
        save_params(path, params)
        loaded = load_params(path)
        assert set(loaded) == set(params)
        for name in params:
            assert np.array_equal(loaded[name].data, params[name].data)
            assert loaded[name].data.dtype == np.float64

    def test_rejects_foreign_files(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not an archive")
        with pytest.raises(ValueError, match="archive"):
            load_params(path)
