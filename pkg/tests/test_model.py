"""Attention kernel, encoder and decoder heads."""

import numpy as np
import pytest

from frame_ssl import tensor as T
from frame_ssl.encoder import EncoderConfig, ViTEncoder, encode, interpolate_pos_embed, patchify, unpatchify
from frame_ssl.heads import DistillHeads, HeadConfig, SemanticDecoder, SpatialDecoder, decode_semantic, decode_spatial
from frame_ssl.nn import Block, ConfigError, MultiHeadAttention, multi_head_attention
from frame_ssl.objectives import cosine_term, patch_mse_term, stage1_loss
from frame_ssl.tensor import DimensionError, Tensor

from gradcheck import max_grad_error

TOL = 1e-4


def set_identity(mha: MultiHeadAttention):
    for lin in (mha.q, mha.k, mha.v, mha.o):
        lin.weight.data = np.eye(lin.weight.shape[0], lin.weight.shape[1])
        lin.bias.data = np.zeros_like(lin.bias.data)


# ---------------------------------------------------------------------------
# attention


def test_attention_single_key_returns_projected_value(rng):
    mha = MultiHeadAttention(8, 8, 8, 8, 2, seed=0, name="a", std=0.5)
    q = Tensor(rng.standard_normal((3, 8)))
    kv = Tensor(rng.standard_normal((1, 8)))
    out = mha(q, kv).data
    expected = mha.o(mha.v(kv)).data
    np.testing.assert_allclose(out, np.repeat(expected, 3, axis=0), atol=1e-12)


def test_attention_orthogonal_rows_hand_oracle():
    mha = MultiHeadAttention(2, 2, 2, 2, 1, seed=0, name="a")
    set_identity(mha)
    x = Tensor(np.array([[3.0, 0.0], [0.0, 3.0]]))
    out = mha(x).data
    # scores = x x^T / sqrt(2) = [[9, 0], [0, 9]] / sqrt(2)
    w_self = 1.0 / (1.0 + np.exp(-9.0 / np.sqrt(2)))
    expected = np.array([[3 * w_self, 3 * (1 - w_self)], [3 * (1 - w_self), 3 * w_self]])
    np.testing.assert_allclose(out, expected, atol=1e-12)
    assert out[0, 0] > out[0, 1]


def test_attention_indivisible_heads():
    with pytest.raises(ConfigError):
        MultiHeadAttention(8, 8, 6, 8, 4, seed=0, name="a")


def test_attention_bias_masks_keys(rng):
    mha = MultiHeadAttention(4, 4, 4, 4, 1, seed=0, name="a", std=0.5)
    q = Tensor(rng.standard_normal((2, 4)))
    kv = Tensor(rng.standard_normal((3, 4)))
    bias = np.array([[0.0, -np.inf, -np.inf], [-np.inf, -np.inf, 0.0]])
    out = mha(q, kv, bias=bias).data
    np.testing.assert_allclose(out[0], mha(q, Tensor(kv.data[:1])).data[0], atol=1e-12)
    np.testing.assert_allclose(out[1], mha(q, Tensor(kv.data[2:])).data[1], atol=1e-12)
    with pytest.raises(DimensionError):
        mha(q, kv, bias=np.zeros((3, 3)))


def test_attention_grad(rng):
    mha = MultiHeadAttention(8, 8, 8, 8, 2, seed=1, name="a", std=0.3)
    q = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
    k = Tensor(rng.standard_normal((5, 8)), requires_grad=True)
    v = Tensor(rng.standard_normal((5, 8)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 8)))
    params = dict(mha.named_parameters("a."))
    params.update(q=q, k=k, v=v)
    err, where = max_grad_error(lambda: T.sum(multi_head_attention(q, k, v, 2, mha) * w), params)
    assert err <= TOL, where


def test_block_grad(rng):
    blk = Block(8, 2, 2.0, seed=3, name="b", std=0.3)
    x = Tensor(rng.standard_normal((2, 4, 8)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 4, 8)))
    params = dict(blk.named_parameters("b."))
    params["x"] = x
    err, where = max_grad_error(lambda: T.sum(blk(x) * w), params)
    assert err <= TOL, where


# ---------------------------------------------------------------------------
# patches and encoder


def test_patchify_counts():
    assert patchify(np.zeros((224, 224, 3)), 16).shape == (196, 768)
    rows = patchify(np.full((32, 32, 3), 0.3), 8)
    assert rows.shape == (16, 192)
    assert np.all(rows == rows[0])


def test_patchify_roundtrip(rng):
    img = rng.random((2, 32, 48, 3))
    back = unpatchify(patchify(img, 8), 8, 32, 48)
    assert back.tobytes() == img.tobytes()


def test_patchify_indivisible():
    with pytest.raises(ConfigError):
        patchify(np.zeros((30, 32, 3)), 8)


def test_patch_raster_order():
    img = np.zeros((16, 16, 3))
    img[0:8, 8:16] = 1.0  # top-right block is patch 1 in raster order
    rows = patchify(img, 8)
    assert rows[1].min() == 1.0 and rows[0].max() == 0.0


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(image_size=30, patch_size=8)
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=10, heads=4)


def test_encode_shapes_and_determinism(rng):
    cfg = EncoderConfig(32, 8, 16, 2, 2, 2.0, seed=0)
    enc = ViTEncoder(cfg)
    frame = rng.random((32, 32, 3))
    a = encode(frame, cfg, enc)
    b = encode(frame.copy(), cfg, enc)
    assert a.y_cls.shape == (1, 16) and a.y_patch.shape == (16, 16)
    assert a.y_patch.data.tobytes() == b.y_patch.data.tobytes()


def test_encode_shape_mismatch(rng):
    cfg = EncoderConfig(32, 8, 16, 1, 2)
    with pytest.raises(DimensionError):
        encode(rng.random((16, 16, 3)), cfg, ViTEncoder(cfg))
    with pytest.raises(ConfigError):
        encode(rng.random((32, 32, 3)), EncoderConfig(32, 8, 16, 2, 2), ViTEncoder(cfg))


def test_depth_zero_is_embedding_plus_positions(rng):
    cfg = EncoderConfig(16, 8, 8, 0, 2, seed=4)
    enc = ViTEncoder(cfg, std=0.2)
    frame = rng.random((16, 16, 3))
    out = enc(frame)
    expected = patchify(frame, 8) @ enc.patch_embed.weight.data + enc.patch_embed.bias.data + enc.pos_embed.data[1:]
    np.testing.assert_allclose(out.y_patch.data, expected, atol=1e-12)
    np.testing.assert_allclose(out.y_cls.data, enc.cls_token.data + enc.pos_embed.data[:1], atol=1e-12)


def test_permutation_equivariance(rng):
    cfg = EncoderConfig(16, 8, 8, 2, 2, seed=5)
    enc = ViTEncoder(cfg, std=0.2)
    frame = rng.random((16, 16, 3))
    perm = np.array([2, 0, 3, 1])
    base = enc(frame).y_patch.data
    # permute patch content and the patch rows of the position table together
    patches = patchify(frame, 8)[perm]
    permuted_frame = unpatchify(patches, 8, 16, 16)
    enc.pos_embed.data = np.concatenate([enc.pos_embed.data[:1], enc.pos_embed.data[1:][perm]])
    out = enc(permuted_frame).y_patch.data
    np.testing.assert_allclose(out, base[perm], atol=1e-12)


def test_position_interpolation_keeps_size_when_equal(rng):
    pos = rng.standard_normal((17, 4))
    assert interpolate_pos_embed(pos, (4, 4), (4, 4)) is pos
    assert interpolate_pos_embed(pos, (4, 4), (2, 2)).shape == (5, 4)


def test_encoder_runs_at_other_resolution(rng):
    cfg = EncoderConfig(32, 8, 16, 1, 2)
    out = ViTEncoder(cfg)(rng.random((16, 16, 3)))
    assert out.y_patch.shape == (4, 16)


def test_all_encoder_parameters_receive_gradient(rng):
    cfg = EncoderConfig(16, 8, 16, 2, 2, seed=1)
    enc = ViTEncoder(cfg, std=0.2)
    heads = DistillHeads(HeadConfig(16, 8, 8, 1, 2, 2.0, seed=2), std=0.2)
    frames = rng.random((3, 16, 16, 3))
    out = enc(frames)
    loss = stage1_loss(heads.sem_dec(out.y_cls), rng.standard_normal((3, 1, 8)), heads.spa_dec(out.y_patch),
                       rng.standard_normal((3, 4, 8)))
    T.backward(loss)
    for name, p in enc.named_parameters("enc."):
        assert p.grad is not None and np.any(p.grad != 0), name


# ---------------------------------------------------------------------------
# heads


def test_semantic_decoder_zero_and_identity(rng):
    dec = SemanticDecoder(HeadConfig(8, 8, 8, 1, 2))
    y = Tensor(rng.standard_normal((1, 8)))
    dec.proj.weight.data[:] = 0
    np.testing.assert_array_equal(decode_semantic(y, dec).data, np.zeros((1, 8)))
    dec.proj.weight.data = np.eye(8)
    np.testing.assert_array_equal(decode_semantic(y, dec).data, y.data)


def test_semantic_decoder_grad_through_cosine(rng):
    dec = SemanticDecoder(HeadConfig(8, 6, 6, 1, 2), std=0.3)
    y = Tensor(rng.standard_normal((1, 8)), requires_grad=True)
    c = rng.standard_normal((1, 6))
    params = dict(dec.named_parameters("sem."))
    params["y"] = y
    err, where = max_grad_error(lambda: cosine_term(decode_semantic(y, dec), c), params)
    assert err <= TOL, where


def test_spatial_decoder_shape_and_grad(rng):
    dec = SpatialDecoder(HeadConfig(8, 6, 5, 1, 2, 2.0), std=0.3)
    y = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    d = rng.standard_normal((4, 5))
    assert decode_spatial(y, dec).shape == (4, 5)
    params = dict(dec.named_parameters("spa."))
    params["y"] = y
    err, where = max_grad_error(lambda: patch_mse_term(decode_spatial(y, dec), d), params)
    assert err <= TOL, where


def test_spatial_decoder_single_token_oracle(rng):
    cfg = HeadConfig(8, 6, 5, 1, 2, 2.0, seed=3)
    dec = SpatialDecoder(cfg, std=0.3)
    x = rng.standard_normal((1, 8))
    blk = dec.blocks[0]
    # one token: softmax weight is 1, attention returns the projected value of the normed token
    h = T.layer_norm(Tensor(x), blk.ln1.gain, blk.ln1.bias).data
    attn = (h @ blk.attn.v.weight.data + blk.attn.v.bias.data) @ blk.attn.o.weight.data + blk.attn.o.bias.data
    x1 = x + attn
    h2 = T.layer_norm(Tensor(x1), blk.ln2.gain, blk.ln2.bias).data
    mlp = T.gelu(Tensor(h2 @ blk.mlp.fc1.weight.data + blk.mlp.fc1.bias.data)).data
    x2 = x1 + mlp @ blk.mlp.fc2.weight.data + blk.mlp.fc2.bias.data
    expected = x2 @ dec.proj.weight.data + dec.proj.bias.data
    np.testing.assert_allclose(decode_spatial(Tensor(x), dec).data, expected, atol=1e-12)


def test_decoder_width_mismatch(rng):
    dec = SpatialDecoder(HeadConfig(8, 6, 5, 1, 2))
    with pytest.raises(DimensionError):
        decode_spatial(Tensor(rng.standard_normal((4, 6))), dec)


def test_heads_share_no_parameters(rng):
    heads = DistillHeads(HeadConfig(8, 6, 5, 1, 2, 2.0), std=0.3)
    y_cls = Tensor(rng.standard_normal((1, 8)))
    y_patch = Tensor(rng.standard_normal((4, 8)))

    def outputs():
        return [heads.sem_dec(y_cls).data, heads.spa_dec(y_patch).data,
                heads.sem_ant(y_cls).data, heads.spa_ant(y_patch).data]

    base = outputs()
    for i, (prefix, head) in enumerate(heads.all()):
        saved = {n: p.data.copy() for n, p in head.named_parameters()}
        for _, p in head.named_parameters():
            p.data = p.data + 0.1
        after = outputs()
        for j in range(4):
            same = after[j].tobytes() == base[j].tobytes()
            assert same == (i != j), (prefix, j)
        for n, p in head.named_parameters():
            p.data = saved[n]


def test_head_config_validation():
    with pytest.raises(ConfigError):
        HeadConfig(spatial_head_depth=0)
