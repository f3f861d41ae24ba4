import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from farl import autodiff as ad
from farl.autodiff import ShapeError, Tensor
from farl.fusion import CrossAttnBlock, FourierFusion, FusionMLP, cross_attention, enrich
from farl.gradchecks import gradcheck_coords
from farl.streams import StreamCNN, extract_tokens, token_grid

from .oracles import conv2d_direct, cross_attention_oracle, enrich_oracle, gelu_tanh


# ------------------------------------------------------------- streams ----

def test_token_count_and_width():
    cnn = StreamCNN(3, 64, np.random.default_rng(0))
    toks = extract_tokens(np.random.default_rng(1).normal(size=(3, 32, 32)), cnn)
    assert toks.tokens.shape == (1, 64, 64) and toks.grid == (8, 8)


@pytest.mark.parametrize("h,w", [(4, 4), (5, 9), (17, 32), (31, 6)])
def test_token_count_is_ceil_quarter(h, w):
    cnn = StreamCNN(1, 8, np.random.default_rng(0))
    out = cnn(np.zeros((2, 1, h, w)))
    assert out.shape == (2, math.ceil(h / 4) * math.ceil(w / 4), 8)
    assert token_grid(h, w) == (math.ceil(h / 4), math.ceil(w / 4))


def test_zero_image_zero_bias_gives_zero_tokens():
    cnn = StreamCNN(3, 16, np.random.default_rng(0))
    assert not cnn(np.zeros((1, 3, 8, 8))).data.any()


def test_too_small_or_wrong_channels_rejected():
    cnn = StreamCNN(3, 8, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        cnn(np.zeros((1, 3, 3, 8)))
    with pytest.raises(ShapeError):
        cnn(np.zeros((1, 1, 8, 8)))


def test_stream_matches_direct_convolution_oracle():
    rng = np.random.default_rng(2)
    cnn = StreamCNN(3, 8, rng, hidden=4)
    for p in (cnn.b1, cnn.b2):
        p.data = rng.normal(size=p.shape)
    img = rng.normal(size=(3, 12, 10))
    # im2col weight rows are ordered (di, dj, c); rebuild (Cout, C, 3, 3) kernels for the oracle
    k1 = cnn.w1.data.reshape(3, 3, 3, 4).transpose(3, 2, 0, 1)
    k2 = cnn.w2.data.reshape(3, 3, 4, 8).transpose(3, 2, 0, 1)
    h = gelu_tanh(conv2d_direct(img, k1, cnn.b1.data))
    h = gelu_tanh(conv2d_direct(h, k2, cnn.b2.data))
    want = h.reshape(8, -1).T
    assert np.max(np.abs(cnn(img[None]).data[0] - want)) < 1e-12


def test_stream_parameters_gradcheck():
    rng = np.random.default_rng(3)
    cnn = StreamCNN(2, 4, rng, hidden=3)
    for p in (cnn.b1, cnn.b2):
        p.data = rng.normal(size=p.shape) * 0.3
    img = rng.normal(size=(1, 2, 8, 8))
    w = Tensor(rng.normal(size=(1, 4, 4)))

    def loss():
        return ad.sum_(cnn(img) * w)
    loss.leaves = cnn.parameters()
    for name, p in cnn.named_parameters().items():
        assert gradcheck_coords(loss, p, range(p.data.size), eps=1e-5) < 1e-4, name


def test_phase_and_amp_streams_are_independent():
    from farl.train import AdamW
    rng = np.random.default_rng(4)
    a, b = StreamCNN(3, 8, rng), StreamCNN(3, 8, rng)
    b.load_state(a.state())
    img = rng.normal(size=(1, 3, 8, 8))
    assert np.array_equal(a(img).data, b(img).data)
    opt = AdamW(a.named_parameters(), lr=1e-2, total_steps=10)
    ad.backward(ad.sum_(a(img)))
    opt.step()
    assert not np.array_equal(a(img).data, b(img).data)


# --------------------------------------------------------------- fusion ----

def identity_block(d):
    blk = CrossAttnBlock(d, np.random.default_rng(0))
    for lin in (blk.w_q, blk.w_k, blk.w_v, blk.w_o):
        lin.weight.data = np.eye(d)
    return blk


def test_cross_attention_hand_example():
    # keys [[1,0],[0,1]] with W_V = 2I give values [[2,0],[0,2]]
    blk = identity_block(2)
    blk.w_v.weight.data = 2 * np.eye(2)
    out, attn = cross_attention(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), blk)
    e = math.exp(1 / math.sqrt(2))
    assert np.allclose(attn.data, [[e / (e + 1), 1 / (e + 1)]], atol=1e-12)
    assert np.allclose(attn.data, [[0.6698, 0.3302]], atol=1e-4)
    assert np.allclose(out.data, [[1.3396, 0.6604]], atol=1e-4)


def test_single_key_gives_unit_attention():
    rng = np.random.default_rng(5)
    blk = CrossAttnBlock(6, rng)
    F = rng.normal(size=(1, 6))
    out, attn = cross_attention(Tensor(rng.normal(size=(4, 6))), Tensor(F), blk)
    assert np.array_equal(attn.data, np.ones((4, 1)))
    row = (F @ blk.w_v.weight.data) @ blk.w_o.weight.data
    assert np.max(np.abs(out.data - row)) < 1e-12


def test_identical_keys_give_uniform_attention():
    rng = np.random.default_rng(6)
    blk = CrossAttnBlock(6, rng)
    F = np.tile(rng.normal(size=(1, 6)), (5, 1))
    out, attn = cross_attention(Tensor(rng.normal(size=(3, 6))), Tensor(F), blk)
    assert np.array_equal(attn.data, np.full((3, 5), 0.2))
    mean_v = ((F @ blk.w_v.weight.data) @ blk.w_o.weight.data).mean(axis=0)
    assert np.max(np.abs(out.data - mean_v)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 12), st.sampled_from([1, 2, 4]), st.integers(0, 2**31))
def test_attention_rows_sum_to_one(k, n, heads, seed):
    rng = np.random.default_rng(seed)
    blk = CrossAttnBlock(8, rng, heads=heads)
    _, attn = cross_attention(Tensor(rng.normal(size=(k, 8)) * 3), Tensor(rng.normal(size=(n, 8)) * 3), blk)
    assert attn.shape == (k, n)
    assert np.max(np.abs(attn.data.sum(axis=-1) - 1.0)) < 1e-9


def test_key_permutation_equivariance():
    rng = np.random.default_rng(7)
    blk = CrossAttnBlock(8, rng, heads=2)
    R, F = rng.normal(size=(5, 8)), rng.normal(size=(9, 8))
    perm = rng.permutation(9)
    out, attn = cross_attention(Tensor(R), Tensor(F), blk)
    out_p, attn_p = cross_attention(Tensor(R), Tensor(F[perm]), blk)
    assert np.max(np.abs(out.data - out_p.data)) < 1e-9
    assert np.max(np.abs(attn.data[:, perm] - attn_p.data)) < 1e-9


def test_cross_attention_matches_oracle():
    rng = np.random.default_rng(8)
    blk = CrossAttnBlock(6, rng)
    R, F = rng.normal(size=(5, 6)), rng.normal(size=(7, 6))
    out, attn = cross_attention(Tensor(R), Tensor(F), blk)
    want, want_attn = cross_attention_oracle(R, F, *(l.weight.data for l in (blk.w_q, blk.w_k, blk.w_v, blk.w_o)))
    assert np.max(np.abs(out.data - want)) < 1e-12 and np.max(np.abs(attn.data - want_attn)) < 1e-12


def test_head_dim_mismatch_is_shape_error():
    blk = CrossAttnBlock(8, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        cross_attention(Tensor(np.ones((2, 8))), Tensor(np.ones((3, 6))), blk)
    with pytest.raises(ValueError):
        CrossAttnBlock(6, np.random.default_rng(0), heads=4)


def fusion(seed=9, beta=1.0):
    rng = np.random.default_rng(seed)
    fz = FourierFusion(5, 8, rng, beta=beta)
    return fz, rng.normal(size=(6, 8)), rng.normal(size=(6, 8))


def test_zero_mlp_leaves_R_unchanged():
    fz, Fp, Fa = fusion()
    for p in fz.mlp.parameters():
        p.data = np.zeros_like(p.data)
    fused, _, _ = fz.enrich(Tensor(Fp), Tensor(Fa))
    assert np.array_equal(fused.data, fz.R.data)


def test_beta_zero_leaves_R_unchanged():
    fz, Fp, Fa = fusion(beta=0.0)
    fused, _, _ = fz.enrich(Tensor(Fp), Tensor(Fa))
    assert np.array_equal(fused.data, fz.R.data)


@pytest.mark.parametrize("beta", [1.0, 0.3])
def test_enrich_matches_straight_line_oracle(beta):
    fz, Fp, Fa = fusion(beta=beta)
    fused, _, _ = fz.enrich(Tensor(Fp), Tensor(Fa))
    ws = lambda b: [l.weight.data for l in (b.w_q, b.w_k, b.w_v, b.w_o)]  # noqa: E731
    m = fz.mlp
    want = enrich_oracle(fz.R.data, Fp, Fa, ws(fz.attn_phase), ws(fz.attn_amp),
                         (m.fc1.weight.data, m.fc1.bias.data, m.fc2.weight.data, m.fc2.bias.data), beta)
    assert np.max(np.abs(fused.data - want)) < 1e-12


def test_identical_streams_and_blocks_give_identical_branch_outputs():
    fz, Fp, _ = fusion()
    fz.attn_amp.load_state(fz.attn_phase.state())
    a, _ = cross_attention(fz.R, Tensor(Fp), fz.attn_phase)
    b, _ = cross_attention(fz.R, Tensor(Fp), fz.attn_amp)
    assert np.array_equal(a.data, b.data)


def test_disabled_stream_duplicates_surviving_branch():
    fz, Fp, Fa = fusion()
    fused, attn_p, attn_a = fz.enrich(Tensor(Fp), None, use_amp=False)
    rp, _ = cross_attention(fz.R, Tensor(Fp), fz.attn_phase)
    want = fz.R.data + fz.mlp(ad.concat([rp, rp], axis=-1)).data
    assert attn_a is None and attn_p is not None
    assert np.array_equal(fused.data, want)


def test_enrich_gradcheck_all_parts():
    fz, Fp, Fa = fusion(10)
    w = np.random.default_rng(11).normal(size=(5, 8))
    for name, p in fz.named_parameters().items():
        coords = np.random.default_rng(12).choice(p.data.size, size=min(6, p.data.size), replace=False)

        def loss():
            return ad.sum_(fz.enrich(Tensor(Fp), Tensor(Fa))[0] * Tensor(w))
        loss.leaves = fz.parameters()
        assert gradcheck_coords(loss, p, coords, eps=1e-4, richardson=True) < 1e-4, name


def test_batched_enrich_matches_per_sample():
    fz, _, _ = fusion()
    rng = np.random.default_rng(13)
    Fp, Fa = rng.normal(size=(3, 6, 8)), rng.normal(size=(3, 6, 8))
    fused, attn_p, _ = fz.enrich(Tensor(Fp), Tensor(Fa))
    for i in range(3):
        one, ap, _ = fz.enrich(Tensor(Fp[i]), Tensor(Fa[i]))
        assert np.max(np.abs(fused.data[i] - one.data)) < 1e-12
        assert np.max(np.abs(attn_p.data[i] - ap.data)) < 1e-12


def test_fusion_mlp_hidden_width():
    m = FusionMLP(8, np.random.default_rng(0))
    assert m.fc1.weight.shape == (16, 16) and m.fc2.weight.shape == (16, 8)


def test_branch_evaluation_order_does_not_matter():
    fz, Fp, Fa = fusion()
    a, _ = cross_attention(fz.R, Tensor(Fa), fz.attn_amp)
    p, _ = cross_attention(fz.R, Tensor(Fp), fz.attn_phase)
    p2, _ = cross_attention(fz.R, Tensor(Fp), fz.attn_phase)
    a2, _ = cross_attention(fz.R, Tensor(Fa), fz.attn_amp)
    assert np.array_equal(p.data, p2.data) and np.array_equal(a.data, a2.data)
