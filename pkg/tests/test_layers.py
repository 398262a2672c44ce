"""Layer semantics: closed-form oracles, brute-force references, shape
validation, and the bit-level invariance battery (run under exact
reductions so no result depends on where an element sits)."""

import numpy as np
import numpy.testing as npt
import pytest

from civt import layers as L
from civt.errors import ShapeError
from civt.tensor import Tensor, exact_reductions

R = np.random.default_rng


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def rnd(seed, *shape):
    return R(seed).normal(size=shape)


# ---------------------------------------------------------------------------
# forward oracles


class TestLinearAndNorms:
    def test_linear_matches_manual(self):
        lin = L.Linear(R(0), 5, 3, dtype=np.float64)
        x = rnd(1, 4, 7, 5)
        got = lin(t64(x)).data
        want = x @ lin.w.data + lin.b.data
        npt.assert_allclose(got, want, atol=1e-15)

    def test_linear_shape_error(self):
        lin = L.Linear(R(0), 5, 3)
        with pytest.raises(ShapeError):
            lin(t64(np.ones((2, 4))))

    def test_layer_norm_standardizes(self):
        ln = L.LayerNorm(16, dtype=np.float64)
        x = rnd(2, 6, 16) * 5 + 3
        y = ln(t64(x)).data
        npt.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
        npt.assert_allclose(y.std(axis=-1), 1, atol=1e-5)  # eps shrinks it a hair

    def test_layer_norm_affine(self):
        ln = L.LayerNorm(8, dtype=np.float64)
        ln.gain.data = np.full(8, 2.0)
        ln.bias.data = np.full(8, -1.0)
        x = rnd(3, 4, 8)
        y = ln(t64(x)).data
        base = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-6)
        npt.assert_allclose(y, 2.0 * base - 1.0, atol=1e-12)

    def test_group_norm_matches_manual(self):
        gn = L.GroupNorm(2, 6, dtype=np.float64)
        x = rnd(4, 3, 6, 5, 5) * 4 + 1
        y = gn(t64(x)).data
        xr = x.reshape(3, 2, 3 * 25)
        base = (xr - xr.mean(-1, keepdims=True)) / np.sqrt(xr.var(-1, keepdims=True) + 1e-6)
        npt.assert_allclose(y, base.reshape(3, 6, 5, 5), atol=1e-12)

    def test_group_norm_groups_must_divide(self):
        with pytest.raises(ShapeError):
            L.GroupNorm(4, 6)

    def test_group_norm_is_per_sample(self):
        # statistics must not leak across the batch: evaluating a sample
        # alone or inside any batch gives the same map
        gn = L.GroupNorm(2, 4, dtype=np.float64)
        a = rnd(5, 2, 4, 3, 3)
        b = rnd(6, 3, 4, 3, 3)
        with exact_reductions():
            alone = gn(t64(a)).data
            stacked = gn(t64(np.concatenate([a, b]))).data
        assert np.array_equal(stacked[:2], alone)


class TestAttention:
    def test_single_token_reduces_to_value_path(self):
        # with one token the softmax is exactly 1, so the attention output
        # is x @ w_v @ w_o regardless of queries and keys
        attn = L.MultiHeadSelfAttention(R(3), 8, 2, dtype=np.float64)
        x = rnd(4, 2, 1, 8)
        got = attn(t64(x)).data
        want = x @ attn.w_v.data @ attn.w_o.data
        npt.assert_allclose(got, want, atol=1e-14)

    def test_zero_query_gives_uniform_mixing(self):
        attn = L.MultiHeadSelfAttention(R(5), 8, 2, dtype=np.float64)
        attn.w_q.data = np.zeros((8, 8))
        x = rnd(6, 1, 5, 8)
        got = attn(t64(x)).data
        v = x @ attn.w_v.data
        want = np.repeat(v.mean(axis=1, keepdims=True), 5, axis=1) @ attn.w_o.data
        npt.assert_allclose(got, want, atol=1e-13)

    def test_accepts_unbatched_input(self):
        attn = L.MultiHeadSelfAttention(R(7), 6, 3, dtype=np.float64)
        x = rnd(8, 4, 6)
        got = attn(t64(x))
        assert got.shape == (4, 6)
        batched = attn(t64(x[None])).data[0]
        npt.assert_allclose(got.data, batched, atol=0)

    def test_width_must_split_across_heads(self):
        with pytest.raises(ShapeError):
            L.MultiHeadSelfAttention(R(0), 8, 3)


class TestPatchEmbed:
    def test_matches_manual_patchify(self):
        pe = L.PatchEmbed(R(9), (8, 8), 4, 3, 5, dtype=np.float64)
        x = rnd(10, 2, 3, 8, 8)
        got = pe(t64(x)).data
        rows = []
        for i in range(2):
            per = []
            for gy in range(2):
                for gx in range(2):
                    patch = x[i, :, gy * 4:(gy + 1) * 4, gx * 4:(gx + 1) * 4]
                    per.append(patch.reshape(-1))
            rows.append(np.stack(per))
        want = np.stack(rows) @ pe.proj.w.data + pe.proj.b.data
        npt.assert_allclose(got, want, atol=1e-15)

    def test_rejects_nontiling_patch(self):
        with pytest.raises(ShapeError):
            L.PatchEmbed(R(0), (10, 10), 4, 3, 8)


def conv_reference(x, w, b, stride, padding, pad_mode):
    """Dead-slow conv oracle."""
    n, ci, h, wdt = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                mode="constant" if pad_mode == "zeros" else "wrap")
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for u in range(k):
                            for v in range(k):
                                acc += w[o, c, u, v] * xp[i, c, y * stride + u, xx * stride + v]
                    out[i, o, y, xx] = acc + (b[o] if b is not None else 0.0)
    return out


class TestConv2d:
    @pytest.mark.parametrize("stride,padding,pad_mode", [
        (1, 0, "zeros"), (1, 1, "zeros"), (2, 1, "zeros"),
        (1, 1, "circular"), (2, 2, "circular"),
    ])
    def test_against_bruteforce(self, stride, padding, pad_mode):
        x = rnd(11, 2, 3, 6, 6)
        w = rnd(12, 4, 3, 3, 3)
        b = rnd(13, 4)
        got = L.conv2d(t64(x), t64(w), t64(b), stride=stride, padding=padding,
                       pad_mode=pad_mode).data
        npt.assert_allclose(got, conv_reference(x, w, b, stride, padding, pad_mode),
                            atol=1e-12)

    def test_delta_kernel_is_identity(self):
        x = rnd(14, 2, 3, 5, 5)
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        got = L.conv2d(t64(x), t64(w), None, padding=1, pad_mode="circular").data
        npt.assert_array_equal(got, x)

    def test_shape_validation(self):
        x, w = t64(np.ones((1, 3, 5, 5))), t64(np.ones((2, 4, 3, 3)))
        with pytest.raises(ShapeError):
            L.conv2d(x, w)
        with pytest.raises(ShapeError):
            L.conv2d(x, t64(np.ones((2, 3, 3, 2))))
        with pytest.raises(ShapeError):
            L.conv2d(x, t64(np.ones((2, 3, 3, 3))), pad_mode="reflect")
        with pytest.raises(ShapeError):
            L.conv2d(x, t64(np.ones((2, 3, 7, 7))))  # kernel exceeds extent


def involution_reference(x, kernels, k, groups, stride, pad_mode):
    n, c, h, w = x.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                mode="constant" if pad_mode == "zeros" else "wrap")
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    cg = c // groups
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for ch in range(c):
            g = ch * groups // c
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for u in range(k):
                        for v in range(k):
                            acc += (kernels[i, g, u * k + v, y, xx]
                                    * xp[i, ch, y * stride + u, xx * stride + v])
                    out[i, ch, y, xx] = acc
    return out


class TestInvolution:
    @pytest.mark.parametrize("stride,pad_mode", [(1, "zeros"), (2, "zeros"), (1, "circular")])
    def test_apply_against_bruteforce(self, stride, pad_mode):
        x = rnd(20, 2, 4, 6, 6)
        ho = 6 if stride == 1 else 3
        kern = rnd(21, 2, 2, 9, ho, ho)
        got = L.involution2d(t64(x), t64(kern), 3, 2, stride=stride,
                             pad_mode=pad_mode).data
        npt.assert_allclose(got, involution_reference(x, kern, 3, 2, stride, pad_mode),
                            atol=1e-12)

    def test_kernels_shared_across_group_channels(self):
        # two channels of one group carrying the same plane must come out
        # identical: the kernel cannot distinguish them
        layer = L.Involution2d(R(22), 6, kernel_size=3, groups=2, reduction=2,
                               dtype=np.float64)
        x = rnd(23, 2, 6, 5, 5)
        x[:, 1] = x[:, 0]  # channels 0,1 sit in group 0 (of channels 0..2)
        y = layer(t64(x)).data
        assert np.array_equal(y[:, 1], y[:, 0])

    def test_generator_stride_reads_decimated_grid(self):
        layer = L.Involution2d(R(24), 4, kernel_size=3, groups=1, reduction=2,
                               stride=2, dtype=np.float64)
        x = rnd(25, 1, 4, 6, 6)
        with exact_reductions():
            k_full = layer.kernels(t64(x)).data
            layer1 = L.Involution2d(R(24), 4, kernel_size=3, groups=1, reduction=2,
                                    stride=1, dtype=np.float64)
            layer1.w_reduce, layer1.b_reduce = layer.w_reduce, layer.b_reduce
            layer1.w_span, layer1.b_span = layer.w_span, layer.b_span
            k_dec = layer1.kernels(t64(x[:, :, ::2, ::2])).data
        assert np.array_equal(k_full, k_dec)

    def test_rejects_even_kernel_and_bad_groups(self):
        with pytest.raises(ShapeError):
            L.Involution2d(R(0), 8, kernel_size=4)
        with pytest.raises(ShapeError):
            L.Involution2d(R(0), 8, kernel_size=3, groups=3)
        x = t64(np.ones((1, 4, 5, 5)))
        with pytest.raises(ShapeError):
            L.involution2d(x, t64(np.ones((1, 2, 8, 5, 5))), 3, 2)  # 8 != 3*3 weights


class TestDropout:
    def test_zero_rate_is_identity(self):
        x = t64(rnd(30, 4, 5))
        assert L.dropout(x, 0.0, R(0)) is x

    def test_scaling_preserves_mean(self):
        x = t64(np.ones((2000, 10)))
        y = L.dropout(x, 0.4, R(31)).data
        assert set(np.unique(y.round(6))) <= {0.0, round(1 / 0.6, 6)}
        assert abs(y.mean() - 1.0) < 0.02

    def test_rate_bounds(self):
        with pytest.raises(ValueError):
            L.dropout(t64(np.ones(3)), 1.0, R(0))


class TestModuleTraversal:
    def test_names_are_stable_and_complete(self):
        blk = L.TransformerBlock(R(40), 8, 2)
        names = [n for n, _ in blk.named_parameters()]
        assert names == [
            "norm1.gain", "norm1.bias", "attn.w_q", "attn.w_k", "attn.w_v",
            "attn.w_o", "norm2.gain", "norm2.bias", "ffn.fc1.w", "ffn.fc1.b",
            "ffn.fc2.w", "ffn.fc2.b",
        ]
        assert blk.param_count() == sum(p.data.size for p in blk.parameters())

    def test_set_requires_grad(self):
        lin = L.Linear(R(41), 3, 4)
        lin.set_requires_grad(False)
        assert all(not p.requires_grad for p in lin.parameters())


# ---------------------------------------------------------------------------
# bit-level invariances (exact reductions: summation order cannot leak
# element positions into the result)


class TestBitLevelInvariances:
    def test_attention_token_permutation_equivariance(self):
        attn = L.MultiHeadSelfAttention(R(50), 8, 2, dtype=np.float64)
        x = rnd(51, 2, 7, 8)
        perm = R(52).permutation(7)
        with exact_reductions():
            base = attn(t64(x)).data
            permuted = attn(t64(x[:, perm])).data
        assert np.array_equal(permuted, base[:, perm])

    def test_transformer_block_token_permutation_equivariance(self):
        blk = L.TransformerBlock(R(53), 8, 2, dtype=np.float64)
        x = rnd(54, 1, 6, 8)
        perm = R(55).permutation(6)
        with exact_reductions():
            base = blk(t64(x)).data
            permuted = blk(t64(x[:, perm])).data
        assert np.array_equal(permuted, base[:, perm])

    def test_attention_duplicate_tokens_get_identical_rows(self):
        attn = L.MultiHeadSelfAttention(R(56), 8, 4, dtype=np.float64)
        x = rnd(57, 1, 5, 8)
        x[0, 3] = x[0, 1]  # identical inputs, identical outputs
        with exact_reductions():
            y = attn(t64(x)).data
        assert np.array_equal(y[0, 3], y[0, 1])

    def test_patch_embed_patch_permutation_equivariance(self):
        pe = L.PatchEmbed(R(58), (8, 8), 4, 3, 6, dtype=np.float64)
        x = rnd(59, 1, 3, 8, 8)
        # swap the two top patches with the two bottom patches
        x2 = np.concatenate([x[:, :, 4:], x[:, :, :4]], axis=2)
        perm = [2, 3, 0, 1]
        with exact_reductions():
            base = pe(t64(x)).data
            moved = pe(t64(x2)).data
        assert np.array_equal(moved, base[:, perm])

    @pytest.mark.parametrize("shift", [(1, 0), (0, 3), (2, 5)])
    def test_conv_translation_equivariance_on_torus(self, shift):
        x = rnd(60, 1, 3, 8, 8)
        w = rnd(61, 4, 3, 3, 3)
        b = rnd(62, 4)
        dy, dx = shift
        with exact_reductions():
            base = L.conv2d(t64(x), t64(w), t64(b), padding=1,
                            pad_mode="circular").data
            rolled = L.conv2d(t64(np.roll(x, shift, axis=(2, 3))), t64(w), t64(b),
                              padding=1, pad_mode="circular").data
        assert np.array_equal(rolled, np.roll(base, shift, axis=(2, 3)))

    @pytest.mark.parametrize("shift", [(1, 0), (0, 3), (2, 5)])
    def test_involution_translation_equivariance_on_torus(self, shift):
        layer = L.Involution2d(R(63), 4, kernel_size=3, groups=2, reduction=2,
                               pad_mode="circular", dtype=np.float64)
        x = rnd(64, 1, 4, 8, 8)
        with exact_reductions():
            base = layer(t64(x)).data
            rolled = layer(t64(np.roll(x, shift, axis=(2, 3)))).data
        assert np.array_equal(rolled, np.roll(base, shift, axis=(2, 3)))

    def test_involution_kernels_depend_only_on_local_feature(self):
        layer = L.Involution2d(R(65), 6, kernel_size=3, groups=2, reduction=3,
                               dtype=np.float64)
        x1 = rnd(66, 1, 6, 5, 5)
        x2 = rnd(67, 1, 6, 5, 5)
        x2[0, :, 2, 3] = x1[0, :, 2, 3]  # agree at one position only
        with exact_reductions():
            k1 = layer.kernels(t64(x1)).data
            k2 = layer.kernels(t64(x2)).data
        assert np.array_equal(k1[..., 2, 3], k2[..., 2, 3])
        assert not np.array_equal(k1, k2)

    def test_involution_constant_input_gives_constant_kernels(self):
        layer = L.Involution2d(R(68), 4, kernel_size=3, groups=1, reduction=2,
                               dtype=np.float64)
        x = np.full((1, 4, 6, 6), 0.37)
        with exact_reductions():
            k = layer.kernels(t64(x)).data
        npt.assert_array_equal(k, np.broadcast_to(k[:, :, :, :1, :1], k.shape))

    def test_involution_channel_permutation_within_group(self):
        # frozen kernels treat all channels of a group identically, so a
        # within-group channel shuffle commutes with the operator bit for bit
        x = rnd(69, 2, 6, 5, 5)
        kern = rnd(70, 2, 1, 9, 5, 5)
        perm = np.array([3, 0, 5, 2, 4, 1])  # G=1: any channel permutation
        base = L.involution2d(t64(x), t64(kern), 3, 1).data
        moved = L.involution2d(t64(x[:, perm]), t64(kern), 3, 1).data
        assert np.array_equal(moved, base[:, perm])

    def test_layer_norm_is_tokenwise(self):
        ln = L.LayerNorm(8, dtype=np.float64)
        x = rnd(71, 1, 6, 8)
        perm = R(72).permutation(6)
        with exact_reductions():
            base = ln(t64(x)).data
            permuted = ln(t64(x[:, perm])).data
        assert np.array_equal(permuted, base[:, perm])
