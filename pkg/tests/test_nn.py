import numpy as np
import pytest

from pixtext import nn
from pixtext import tensor as T


def zero_projections(attn: nn.MultiHeadAttention):
    for layer in (attn.q_proj, attn.k_proj, attn.v_proj, attn.out_proj):
        layer.weight.data = np.zeros_like(layer.weight.data)
        layer.bias.data = np.zeros_like(layer.bias.data)


class TestLinear:
    def test_identity_weight_passes_input_through(self, rng):
        lin = nn.Linear(3, 3, rng)
        lin.weight.data = np.eye(3)
        lin.bias.data = np.zeros(3)
        x = rng.standard_normal((4, 3))
        assert np.array_equal(lin(T.Tensor(x)).data, x)

    def test_zero_weight_returns_bias_rows(self, rng):
        lin = nn.Linear(3, 2, rng)
        lin.weight.data = np.zeros((2, 3))
        lin.bias.data = np.array([1.5, -2.0])
        out = lin(T.Tensor(rng.standard_normal((5, 3)))).data
        assert np.array_equal(out, np.tile([1.5, -2.0], (5, 1)))

    def test_matches_double_loop_oracle(self, rng):
        lin = nn.Linear(4, 3, rng)
        x = rng.standard_normal((5, 4))
        out = lin(T.Tensor(x)).data
        expected = np.empty((5, 3))
        for i in range(5):
            for j in range(3):
                acc = lin.bias.data[j]
                for m in range(4):
                    acc += x[i, m] * lin.weight.data[j, m]
                expected[i, j] = acc
        assert np.allclose(out, expected, atol=1e-12)

    def test_wrong_width_rejected(self, rng):
        with pytest.raises(T.ShapeError):
            nn.Linear(4, 3, rng)(T.Tensor(np.zeros((2, 5))))


class TestLayerNorm:
    def test_constant_row_zeroed_before_affine(self, rng):
        ln = nn.LayerNorm(4)
        out = ln(T.Tensor(np.full((2, 4), 3.7))).data
        assert np.allclose(out, 0.0, atol=1e-12)

    def test_standardized_input_unchanged(self, rng):
        x = rng.standard_normal((3, 8))
        x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
        ln = nn.LayerNorm(8, eps=1e-12)
        assert np.allclose(ln(T.Tensor(x)).data, x, atol=1e-10)

    def test_output_moments(self, rng):
        x = rng.standard_normal((1, 16)) * 4.2 + 1.3
        ln = nn.LayerNorm(16)
        out = ln(T.Tensor(x)).data
        assert abs(out.mean()) < 1e-12
        assert abs(out.var() - 1.0) < 1e-4  # eps shifts variance slightly

    def test_gradcheck(self, rng):
        ln = nn.LayerNorm(5)
        ln.scale.data = rng.uniform(0.5, 1.5, 5)
        ln.shift.data = rng.standard_normal(5)
        probe = T.Tensor(rng.standard_normal((3, 5)))
        report = T.grad_check(
            lambda x, s, b: T.tsum(T.mul(nn.layer_norm(x, s, b), probe)),
            [T.Tensor(rng.standard_normal((3, 5))),
             T.Tensor(ln.scale.data.copy()), T.Tensor(ln.shift.data.copy())],
        )
        assert report.passed


class TestMhsa:
    def test_single_token_reduces_to_projections(self, rng):
        attn = nn.MultiHeadAttention(8, 2, rng)
        x = T.Tensor(rng.standard_normal((1, 8)))
        # with one token the attention weight is forced to 1
        expected = attn.out_proj(attn.v_proj(x)).data
        assert np.allclose(attn(x).data, expected, atol=1e-12)

    def test_permutation_equivariance(self, rng):
        attn = nn.MultiHeadAttention(8, 4, rng)
        x = rng.standard_normal((6, 8))
        base = attn(T.Tensor(x)).data
        for _ in range(5):
            perm = np.concatenate([[0], 1 + rng.permutation(5)])
            permuted = attn(T.Tensor(x[perm])).data
            assert np.max(np.abs(permuted - base[perm])) < 1e-10

    def test_two_token_case_matches_hand_rolled_oracle(self, rng):
        attn = nn.MultiHeadAttention(4, 2, rng)
        x = rng.standard_normal((2, 4))

        def project(layer, v):
            return v @ layer.weight.data.T + layer.bias.data

        q = project(attn.q_proj, x)
        k = project(attn.k_proj, x)
        v = project(attn.v_proj, x)
        heads = []
        for h in range(2):
            sl = slice(h * 2, (h + 1) * 2)
            s = q[:, sl] @ k[:, sl].T / np.sqrt(2.0)
            e = np.exp(s - s.max(axis=1, keepdims=True))
            a = e / e.sum(axis=1, keepdims=True)
            heads.append(a @ v[:, sl])
        expected = project(attn.out_proj, np.concatenate(heads, axis=1))
        assert np.max(np.abs(attn(T.Tensor(x)).data - expected)) < 1e-10

    def test_indivisible_heads_rejected(self, rng):
        with pytest.raises(T.ShapeError):
            nn.MultiHeadAttention(6, 4, rng)

    def test_deterministic_bitwise(self, rng):
        attn = nn.MultiHeadAttention(8, 2, rng)
        x = T.Tensor(rng.standard_normal((3, 8)))
        assert np.array_equal(attn(x).data, attn(x).data)


class TestDecoderLayer:
    def test_zero_projections_pass_queries_through(self, rng):
        layer = nn.TransformerDecoderLayer(8, 2, 16, rng)
        zero_projections(layer.self_attn)
        zero_projections(layer.cross_attn)
        layer.ffn.fc1.weight.data[:] = 0.0
        layer.ffn.fc1.bias.data[:] = 0.0
        layer.ffn.fc2.weight.data[:] = 0.0
        layer.ffn.fc2.bias.data[:] = 0.0
        q = rng.standard_normal((3, 8))
        out = layer(T.Tensor(q), T.Tensor(rng.standard_normal((5, 8)))).data
        assert np.array_equal(out, q)

    @pytest.mark.parametrize("n", [1, 8])
    def test_output_shape_preserved(self, rng, n):
        layer = nn.TransformerDecoderLayer(8, 2, 16, rng)
        out = layer(T.Tensor(rng.standard_normal((n, 8))),
                    T.Tensor(rng.standard_normal((4, 8))))
        assert out.shape == (n, 8)

    def test_gradients_wrt_queries_and_memory(self, rng):
        layer = nn.TransformerDecoderLayer(4, 2, 8, rng)
        probe = T.Tensor(rng.standard_normal((2, 4)))

        def f(q, m):
            return T.tsum(T.mul(layer(q, m), probe))

        report = T.grad_check(
            f, [T.Tensor(rng.standard_normal((2, 4))), T.Tensor(rng.standard_normal((3, 4)))],
            tol=1e-5,
        )
        assert report.passed

    def test_dim_mismatch_rejected(self, rng):
        layer = nn.TransformerDecoderLayer(8, 2, 16, rng)
        with pytest.raises(T.ShapeError):
            layer(T.Tensor(np.zeros((2, 8))), T.Tensor(np.zeros((3, 4))))

    def test_stack_requires_layers(self, rng):
        with pytest.raises(T.ShapeError):
            nn.decoder_forward([], T.Tensor(np.zeros((1, 4))), T.Tensor(np.zeros((1, 4))))

    def test_stack_deterministic(self, rng):
        layers = [nn.TransformerDecoderLayer(8, 2, 16, rng) for _ in range(2)]
        q = T.Tensor(rng.standard_normal((3, 8)))
        m = T.Tensor(rng.standard_normal((5, 8)))
        a = nn.decoder_forward(layers, q, m).data
        b = nn.decoder_forward(layers, q, m).data
        assert np.array_equal(a, b)
