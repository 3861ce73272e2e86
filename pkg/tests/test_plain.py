import numpy as np
import pytest

from vitreforge.checkpoint import Archive
from vitreforge.errors import ConfigError, DimensionError
from vitreforge.plain import (BlockWeights, PlainVitModel, bicubic_matrix, forward_plain, global_attention,
                              patch_embed_plain, resize_pos_grid, vit_block)
from vitreforge.synthetic import make_nano, make_plain_vit

from oracles import attention_ref, bicubic_ref, block_ref, patches_matmul


def toy_block(seed=0, dim=8, hidden=32):
    a = make_plain_vit(depth=1, dim=dim, heads=2, patch=4, img=8, seed=seed, mlp_ratio=hidden // dim)
    return a, BlockWeights.from_params(a, 0)


class TestPatchEmbed:
    def test_vit_b_shape(self, vit_b):
        model = PlainVitModel(vit_b)
        assert patch_embed_plain(np.zeros((3, 224, 224), np.float32), model).shape == (196, 768)

    def test_nano_shape(self, nano_plain):
        assert patch_embed_plain(np.zeros((3, 32, 32), np.float32), nano_plain).shape == (64, 8)

    def test_matches_im2col_oracle(self, nano, nano_plain, rng):
        img = rng.standard_normal((3, 32, 32), dtype=np.float32)
        ref = patches_matmul(img, nano["patch_embed.proj.weight"], nano["patch_embed.proj.bias"], 4, 4, 0)
        np.testing.assert_allclose(patch_embed_plain(img, nano_plain), ref, atol=1e-5)

    def test_indivisible(self, nano_plain):
        with pytest.raises(DimensionError, match="divisible"):
            patch_embed_plain(np.zeros((3, 30, 32), np.float32), nano_plain)


class TestGlobalAttention:
    def test_single_token(self):
        a, w = toy_block()
        x = np.random.default_rng(0).standard_normal((1, 8), dtype=np.float32)
        v = x @ w.qkv_w[16:].T + w.qkv_b[16:]
        np.testing.assert_allclose(global_attention(x, w, 2), v @ w.proj_w.T + w.proj_b, atol=1e-6)

    def test_identical_tokens(self):
        _, w = toy_block()
        x = np.tile(np.arange(8, dtype=np.float32), (5, 1))
        out = global_attention(x, w, 2)
        np.testing.assert_allclose(out, np.tile(out[0], (5, 1)), atol=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_naive_oracle(self, seed):
        a, w = toy_block(seed)
        x = np.random.default_rng(seed).standard_normal((5, 8), dtype=np.float32)
        ref = attention_ref(x, w.qkv_w, w.qkv_b, w.proj_w, w.proj_b, heads=2)
        np.testing.assert_allclose(global_attention(x, w, 2), ref, atol=1e-5)

    def test_permutation_equivariance(self, rng):
        _, w = toy_block()
        x = rng.standard_normal((9, 8), dtype=np.float32)
        perm = rng.permutation(9)
        np.testing.assert_allclose(global_attention(x[perm], w, 2), global_attention(x, w, 2)[perm], atol=1e-6)

    def test_heads_must_divide_dim(self):
        _, w = toy_block()
        with pytest.raises(ConfigError):
            global_attention(np.zeros((2, 8), np.float32), w, 3)


class TestBlock:
    def test_zero_weights_identity(self, rng):
        a, _ = toy_block()
        for k in a:
            if "attn" in k or "mlp" in k:
                a[k] = np.zeros_like(a[k])
        x = rng.standard_normal((6, 8), dtype=np.float32)
        np.testing.assert_array_equal(vit_block(x, BlockWeights.from_params(a, 0), 2), x)

    @pytest.mark.parametrize("n", [1, 4, 13])
    def test_shape_preserved(self, n):
        _, w = toy_block()
        assert vit_block(np.zeros((n, 8), np.float32), w, 2).shape == (n, 8)

    def test_matches_unrolled_oracle(self, rng):
        a, w = toy_block(seed=5)
        x = rng.standard_normal((7, 8), dtype=np.float32)
        np.testing.assert_allclose(vit_block(x, w, 2), block_ref(x, a.entries, 0, 2), atol=1e-5)


class TestPosResize:
    def test_identity_to_native_grid(self, rng):
        g = rng.standard_normal((14, 14, 12), dtype=np.float32)
        assert np.abs(resize_pos_grid(g, 14, 14) - g).max() <= 1e-6
        np.testing.assert_array_equal(bicubic_matrix(14, 14), np.eye(14))

    @pytest.mark.parametrize("out", [(56, 56), (7, 9), (20, 30), (3, 3)])
    def test_matches_scalar_oracle(self, rng, out):
        g = rng.standard_normal((6, 5, 3), dtype=np.float32)
        np.testing.assert_allclose(resize_pos_grid(g, *out), bicubic_ref(g, *out), atol=1e-5)

    def test_rows_of_resampling_matrix_sum_to_one(self):
        for n_in, n_out in [(14, 56), (56, 14), (8, 3), (5, 17)]:
            np.testing.assert_allclose(bicubic_matrix(n_in, n_out).sum(axis=1), 1.0, atol=1e-12)

    def test_matches_torch_when_available(self, rng):
        torch = pytest.importorskip("torch")
        g = rng.standard_normal((14, 14, 4), dtype=np.float32)
        t = torch.nn.functional.interpolate(torch.from_numpy(g).permute(2, 0, 1)[None], size=(56, 40),
                                            mode="bicubic", align_corners=False)[0].permute(1, 2, 0).numpy()
        np.testing.assert_allclose(resize_pos_grid(g, 56, 40), t, atol=1e-5)


class TestForwardPlain:
    def test_token_shapes(self, nano_plain):
        assert forward_plain(np.zeros((3, 32, 32), np.float32), nano_plain).shape == (64, 8)
        cls = PlainVitModel(make_nano(cls_token=True))
        assert forward_plain(np.zeros((3, 32, 32), np.float32), cls).shape == (65, 8)

    def test_zero_weights_expose_position_embedding(self, nano):
        a = nano.copy()
        for k in a:
            if k not in ("pos_embed", "norm.weight", "norm.bias"):
                a[k] = np.zeros_like(a[k])
        model = PlainVitModel(a)
        out = forward_plain(np.random.default_rng(0).standard_normal((3, 32, 32), dtype=np.float32), model)
        pos = a["pos_embed"][0]
        mu = pos.mean(-1, keepdims=True)
        sd = np.sqrt(pos.var(-1, keepdims=True) + 1e-6)
        np.testing.assert_allclose(out, (pos - mu) / sd * a["norm.weight"] + a["norm.bias"], atol=1e-5)

    def test_golden_tokens(self, nano_plain, golden):
        g = golden["nano_plain_tokens"]
        img = np.random.default_rng(g["image_seed"]).standard_normal((3, 32, 32)).astype(np.float32)
        np.testing.assert_allclose(forward_plain(img, nano_plain).ravel(), g["values"], atol=1e-5)

    def test_logits_require_classifier(self, nano_plain):
        with pytest.raises(ConfigError):
            forward_plain(np.zeros((3, 32, 32), np.float32), nano_plain, head="cls_logits")

    def test_logits_mean_pool_excludes_class_token(self):
        model = PlainVitModel(make_nano(cls_token=True, n_classes=4))
        img = np.random.default_rng(3).standard_normal((3, 32, 32), dtype=np.float32)
        tokens = forward_plain(img, model)
        expected = tokens[1:].mean(0) @ model.weights["head.weight"].T + model.weights["head.bias"]
        np.testing.assert_allclose(forward_plain(img, model, head="cls_logits"), expected, atol=1e-6)

    def test_deterministic_and_finite(self, nano_plain, rng):
        img = rng.standard_normal((3, 32, 32), dtype=np.float32)
        a, b = forward_plain(img, nano_plain), forward_plain(img, nano_plain)
        assert a.tobytes() == b.tobytes() and np.isfinite(a).all()

    def test_doubling_height_changes_only_token_count(self, nano_plain):
        out = forward_plain(np.ones((3, 64, 32), np.float32), nano_plain)
        assert out.shape == (128, 8)
