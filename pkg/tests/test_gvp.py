import numpy as np
import pytest

from msgbart import tensor as T
from msgbart.gvp import GVP, ConfigError, FeatureTrack, FusionBlock, assemble_memory, coarsen


def test_coarsen_means_windows():
    fine = np.arange(12.0).reshape(6, 2)
    np.testing.assert_array_equal(coarsen(fine, 3), [[2.0, 3.0], [8.0, 9.0]])
    with pytest.raises(ValueError):
        coarsen(fine, 4)


def test_feature_track_validation():
    assert FeatureTrack(np.zeros((2, 4)), np.zeros((8, 4))).window_ratio == 4
    for coarse, fine in (((0, 4), (4, 4)), ((3, 4), (8, 4)), ((2, 4), (8, 5)), ((3, 4), (2, 4))):
        with pytest.raises(ValueError):
            FeatureTrack(np.zeros(coarse), np.zeros(fine))


def block_oracle(block, x, ctx, mask=None):
    """Pre-norm block from separate primitive calls."""
    h = T.add(x, block.attn(block.ln1(x), ctx, ctx, mask))
    return T.add(h, block.ffn(block.ln2(h)))


@pytest.mark.parametrize("tc", [1, 3])
def test_fusion_block_matches_composition(rng, tc):
    block = FusionBlock(T.ParamStore(), "b", 8, 2, rng)
    x, ctx = T.Tensor(rng.normal(size=(tc, 8))), T.Tensor(rng.normal(size=(5, 8)))
    out = block(x, ctx)
    assert out.shape == (tc, 8)
    np.testing.assert_array_equal(out.data, block_oracle(block, x, ctx).data)


def test_post_norm_block_matches_composition(rng):
    block = FusionBlock(T.ParamStore(), "b", 8, 2, rng, norm_style="post")
    x, ctx = T.Tensor(rng.normal(size=(2, 8))), T.Tensor(rng.normal(size=(4, 8)))
    h = block.ln1(T.add(x, block.attn(x, ctx, ctx)))
    np.testing.assert_array_equal(block(x, ctx).data, block.ln2(T.add(h, block.ffn(h))).data)


def test_fully_masked_context_leaves_ffn_path(rng):
    block = FusionBlock(T.ParamStore(), "b", 8, 2, rng)
    x = T.Tensor(rng.normal(size=(1, 2, 8)))
    out = block(x, T.Tensor(rng.normal(size=(1, 4, 8))), np.zeros((1, 4), bool)).data
    expected = x.data + block.ffn(block.ln2(x)).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_width_mismatch_is_config_error(rng):
    gvp = GVP(T.ParamStore(), 8, 6, 2, rng)
    with pytest.raises(ConfigError):
        gvp.video_encoder(T.Tensor(np.zeros((2, 8))), T.Tensor(np.zeros((3, 4))))
    with pytest.raises(ConfigError):
        gvp.project_features(np.zeros((2, 5)))


def test_encoders_share_one_implementation(rng):
    gvp = GVP(T.ParamStore(), 8, 6, 2, rng)
    q, d = T.Tensor(rng.normal(size=(2, 8))), T.Tensor(rng.normal(size=(5, 8)))
    np.testing.assert_array_equal(gvp.graph_encoder(q, d).data, block_oracle(gvp.graph_enc, q, d).data)
    np.testing.assert_array_equal(gvp.video_decoder(q, d).data, block_oracle(gvp.video_dec, q, d).data)
    # identical weights, swapped roles: the same function
    for name in ("attn", "ffn", "ln1", "ln2"):
        src, dst = getattr(gvp.video_enc, name), getattr(gvp.graph_enc, name)
        for attr, val in vars(src).items():
            if isinstance(val, T.Tensor):
                getattr(dst, attr).data[...] = val.data
    np.testing.assert_array_equal(gvp.graph_encoder(q, d).data, gvp.video_encoder(q, d).data)


def test_repeated_empty_graph_query_stays_finite(rng):
    gvp = GVP(T.ParamStore(), 8, 6, 2, rng)
    empty = rng.normal(size=8)
    out = gvp.graph_encoder(T.Tensor(np.stack([empty] * 4)), T.Tensor(rng.normal(size=(5, 8)))).data
    assert out.shape == (4, 8) and np.all(np.isfinite(out))


def test_assemble_memory_segments(rng):
    blocks = [(n, T.Tensor(rng.normal(size=(k, 4))), None) for n, k in (("text", 5), ("video", 3), ("graph", 2))]
    mem = assemble_memory(blocks)
    assert mem.length == 10 and mem.mask is None
    assert mem.segments == {"text": (0, 5), "video": (5, 8), "graph": (8, 10)}
    np.testing.assert_array_equal(mem.memory.data[8:], blocks[2][1].data)
    with pytest.raises(ConfigError):
        assemble_memory([("a", T.Tensor(np.zeros((1, 4))), None), ("b", T.Tensor(np.zeros((1, 3))), None)])


def test_decoder_fuse_matches_concat_oracle(rng):
    gvp = GVP(T.ParamStore(), 8, 6, 2, rng)
    y_b = T.Tensor(rng.normal(size=(1, 8)))
    y_v, y_g = T.Tensor(rng.normal(size=(3, 8))), T.Tensor(rng.normal(size=(2, 8)))
    fused = gvp.decoder_fuse(y_b, y_v, y_g)
    assert fused.shape == (1, 8)
    np.testing.assert_array_equal(fused.data, block_oracle(gvp.fuse, y_b, T.concat([y_v, y_g], axis=0)).data)
    # no positions on the memory side: softmax attention ignores key order
    np.testing.assert_allclose(gvp.decoder_fuse(y_b, y_g, y_v).data, fused.data, atol=1e-12)
    assert gvp.decoder_fuse(y_b, None, None) is y_b


def test_gradients_reach_feature_projection(rng):
    ps = T.ParamStore()
    gvp = GVP(ps, 8, 6, 2, rng)
    v = gvp.project_features(rng.normal(size=(2, 6)))
    T.backward(T.sum_(gvp.video_encoder(v, T.Tensor(rng.normal(size=(3, 8)))) ** 2), ps)
    assert np.abs(gvp.feature_proj.grad).sum() > 0
    assert np.abs(ps["gvp.video_enc.attn.w_q"].grad).sum() > 0
