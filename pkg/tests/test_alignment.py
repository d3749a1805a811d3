"""Compensation + correlation-alignment tests, including the FCC property suite."""

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from synmesh.alignment import (
    CompensationWeights,
    FeatureDictionary,
    align_loss,
    attention_salience,
    compensate,
    dictionary_guidance,
    fcc,
    feature_cross_correlation,
    resize_token_grid,
)
from synmesh.encoder import AttentionMap, FeatureMap
from synmesh.errors import ShapeError


# ---------------------------------------------------------------------------
# attention salience


def test_salience_self_attention_mean_received():
    w = torch.zeros(1, 1, 3, 3)
    w[0, 0] = torch.tensor([[0.7, 0.2, 0.1],
                            [0.1, 0.8, 0.1],
                            [0.3, 0.3, 0.4]])
    sal = attention_salience([AttentionMap(0, w)], n_tokens=3)
    expected = w[0, 0].mean(dim=0)  # column means: attention received
    torch.testing.assert_close(sal[0], expected)


def test_salience_cross_attention_peak_focus():
    # queries = our 3 tokens, keys = 5 foreign tokens
    w = torch.rand(2, 4, 3, 5)
    w = w / w.sum(dim=-1, keepdim=True)
    sal = attention_salience([AttentionMap(0, w)], n_tokens=3)
    expected = w.max(dim=-1).values.mean(dim=1)
    torch.testing.assert_close(sal, expected)
    assert sal.shape == (2, 3)


def test_salience_uniform_cross_map_is_flat():
    w = torch.full((1, 2, 4, 7), 1.0 / 7.0)
    sal = attention_salience([AttentionMap(0, w)], n_tokens=4)
    assert float(sal.max() - sal.min()) == 0.0


def test_salience_averages_maps_and_validates():
    a = torch.full((1, 1, 3, 3), 1.0 / 3.0)
    b = torch.zeros(1, 1, 3, 3)
    b[0, 0, :, 0] = 1.0
    sal = attention_salience([AttentionMap(0, a), AttentionMap(1, b)], 3)
    torch.testing.assert_close(sal[0], torch.tensor([2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0]))
    with pytest.raises(ShapeError):
        attention_salience([], 3)
    with pytest.raises(ShapeError):
        attention_salience([AttentionMap(0, torch.rand(1, 1, 4, 5))], 3)


# ---------------------------------------------------------------------------
# dictionary guidance


def test_guidance_flat_salience_replicates_global_mean():
    feat = torch.rand(2, 6, 5)
    uniform = torch.full((2, 3, 6, 6), 1.0 / 6.0)
    out = dictionary_guidance([AttentionMap(0, uniform)], feat, n_guidance=4)
    assert out.shape == (2, 4, 5)
    expected = feat.mean(dim=1, keepdim=True).expand(-1, 4, -1)
    torch.testing.assert_close(out, expected)
    # absent maps behave the same way
    out2 = dictionary_guidance(None, feat, n_guidance=4)
    torch.testing.assert_close(out2, expected)


def test_guidance_rank_blocks_exact():
    feat = torch.arange(8.0).reshape(1, 4, 2)
    # self-attention columns give salience (0.4, 0.3, 0.2, 0.1) directly
    w = torch.tensor([[0.4, 0.3, 0.2, 0.1]] * 4).reshape(1, 1, 4, 4)
    out = dictionary_guidance([AttentionMap(0, w)], feat, n_guidance=2)
    t = feat[0]
    g0 = (0.4 * t[0] + 0.3 * t[1]) / 0.7
    g1 = (0.2 * t[2] + 0.1 * t[3]) / 0.3
    torch.testing.assert_close(out[0, 0], g0)
    torch.testing.assert_close(out[0, 1], g1)


def test_guidance_zero_salience_block_uses_plain_mean():
    feat = torch.arange(8.0).reshape(1, 4, 2)
    w = torch.tensor([[1.0, 0.0, 0.0, 0.0]] * 4).reshape(1, 1, 4, 4)
    out = dictionary_guidance([AttentionMap(0, w)], feat, n_guidance=2)
    torch.testing.assert_close(out[0, 0], feat[0, 0])          # dominated by token 0
    torch.testing.assert_close(out[0, 1], feat[0, 2:].mean(0))  # zero block -> mean


def test_guidance_more_groups_than_tokens():
    feat = torch.rand(1, 2, 3)
    w = torch.tensor([[0.9, 0.1], [0.9, 0.1]]).reshape(1, 1, 2, 2)
    out = dictionary_guidance([AttentionMap(0, w)], feat, n_guidance=4)
    assert out.shape == (1, 4, 3)
    assert torch.isfinite(out).all()
    with pytest.raises(ShapeError):
        dictionary_guidance(None, feat, n_guidance=0)
    with pytest.raises(ShapeError):
        dictionary_guidance(None, torch.rand(4, 3), n_guidance=2)


# ---------------------------------------------------------------------------
# compensation attention


def test_compensate_zero_value_projection_is_identity():
    torch.manual_seed(0)
    d = 8
    dictionary = FeatureDictionary(5, d)
    weights = CompensationWeights(d)
    with torch.no_grad():
        weights.w_v.weight.zero_()
    feat = torch.randn(3, 7, d)
    guidance = torch.randn(3, 2, d)
    out = compensate(feat, dictionary, guidance, weights)
    assert torch.equal(out, feat)


def test_compensate_manual_oracle():
    """Single token, identity projections: hand-computed softmax attention."""
    d = 2
    dictionary = FeatureDictionary(1, d)
    weights = CompensationWeights(d)
    with torch.no_grad():
        dictionary.entries.copy_(torch.tensor([[1.0, 0.0]]))
        dictionary.guidance_proj.weight.copy_(torch.eye(d))
        dictionary.guidance_proj.bias.zero_()
        for lin in (weights.w_q, weights.w_k, weights.w_v):
            lin.weight.copy_(torch.eye(d))
    x = torch.tensor([[[0.5, -1.0]]])
    g = torch.tensor([[[0.0, 2.0]]])
    out = compensate(x, dictionary, g, weights)

    bank = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    logits = (x[0] @ bank.T) / (d ** 0.5)
    attn = torch.softmax(logits, dim=-1)
    expected = x[0] + attn @ bank
    torch.testing.assert_close(out[0], expected)


def test_compensate_validates_shapes():
    dictionary = FeatureDictionary(2, 4)
    weights = CompensationWeights(4)
    with pytest.raises(ShapeError):
        compensate(torch.rand(2, 3), dictionary, torch.rand(1, 2, 4), weights)
    with pytest.raises(ShapeError):
        compensate(torch.rand(1, 3, 4), dictionary, torch.rand(1, 2, 6), weights)


# ---------------------------------------------------------------------------
# feature cross-correlation


def random_pair(rng, shape=None):
    if shape is None:
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)),
                 int(rng.integers(1, 17)))
    x = torch.from_numpy(rng.normal(0, 1, shape))
    y = torch.from_numpy(rng.normal(0, 1, shape))
    return x, y


def test_fcc_self_correlation_is_one():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, _ = random_pair(rng)
        if float((x - x.mean(dim=(0, 1), keepdim=True)).abs().max()) == 0.0:
            continue
        assert abs(float(fcc(x, x)) - 1.0) < 1e-9
        assert abs(float(fcc(x, -x)) + 1.0) < 1e-9


def test_fcc_symmetry_is_exact():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, y = random_pair(rng)
        assert torch.equal(fcc(x, y), fcc(y, x))


def test_fcc_bounded():
    rng = np.random.default_rng(2)
    for _ in range(50):
        x, y = random_pair(rng)
        assert abs(float(fcc(x, y))) <= 1.0 + 1e-9


def test_fcc_per_channel_shift_invariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x, y = random_pair(rng)
        shift = torch.from_numpy(rng.normal(0, 10, (1, 1, x.shape[2])))
        assert abs(float(fcc(x + shift, y)) - float(fcc(x, y))) < 1e-9


def test_fcc_global_positive_scale_invariance():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x, y = random_pair(rng)
        scale = float(rng.uniform(0.1, 50.0))
        assert abs(float(fcc(scale * x, y)) - float(fcc(x, y))) < 1e-9


def test_fcc_sensitive_to_per_channel_scaling():
    """Correlation is global, not per-channel: rescaling one channel moves it."""
    rng = np.random.default_rng(5)
    x, y = random_pair(rng, shape=(4, 4, 3))
    scaled = x.clone()
    scaled[:, :, 0] *= 10.0
    assert abs(float(fcc(scaled, y)) - float(fcc(x, y))) > 1e-3


def test_fcc_degenerate_constant_map():
    x = torch.ones(3, 3, 2)
    y = torch.rand(3, 3, 2, dtype=torch.float64)
    score, degenerate = feature_cross_correlation(x.double(), y,
                                                  return_degenerate=True)
    assert degenerate and float(score) == 0.0
    # per-channel constant (different constants per channel) is still degenerate
    z = torch.stack([torch.full((3, 3), 1.0), torch.full((3, 3), -2.0)], dim=-1)
    score2, deg2 = feature_cross_correlation(z.double(), y, return_degenerate=True)
    assert deg2 and float(score2) == 0.0


def test_fcc_minimal_antisymmetric_case():
    x = torch.tensor([[[1.0], [-1.0]], [[-1.0], [1.0]]])  # (2, 2, 1)
    assert abs(float(fcc(x, -x)) + 1.0) < 1e-12
    assert abs(float(fcc(x, 2.0 * x)) - 1.0) < 1e-12


def test_fcc_validates_shapes():
    with pytest.raises(ShapeError):
        fcc(torch.rand(2, 2, 2), torch.rand(2, 2, 3))
    with pytest.raises(ShapeError):
        fcc(torch.rand(2, 2), torch.rand(2, 2))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4, 2), elements=st.floats(-100, 100)),
       arrays(np.float64, (3, 4, 2), elements=st.floats(-100, 100)))
def test_fcc_properties_hold_for_arbitrary_maps(ax, ay):
    x, y = torch.from_numpy(ax), torch.from_numpy(ay)
    s, degenerate = feature_cross_correlation(x, y, return_degenerate=True)
    s = float(s)
    assert abs(s) <= 1.0 + 1e-9
    assert torch.equal(feature_cross_correlation(x, y), feature_cross_correlation(y, x))
    if degenerate:
        assert s == 0.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 2), elements=st.floats(-50, 50)),
       st.floats(0.5, 20.0))
def test_fcc_scale_invariance_property(ax, scale):
    x = torch.from_numpy(ax)
    y = torch.from_numpy(ax[::-1].copy())
    # scale invariance is only defined away from the degenerate (constant) case;
    # near-constant maps may flip across the exact-zero denominator boundary
    centered = x - x.mean(dim=(0, 1), keepdim=True)
    assume(float(centered.abs().max()) > 1e-6 * (1.0 + float(x.abs().max())))
    a = float(feature_cross_correlation(x, y))
    b = float(feature_cross_correlation(scale * x, y))
    assert abs(a - b) < 1e-9


# ---------------------------------------------------------------------------
# align loss


def grid_feature(tensor_bchw):
    b, d, h, w = tensor_bchw.shape
    return FeatureMap(tokens=tensor_bchw.flatten(2).transpose(1, 2), grid_hw=(h, w))


def test_align_loss_is_minus_two_at_perfect_correlation():
    torch.manual_seed(0)
    fused = torch.randn(2, 5, 4, 4, dtype=torch.float64)
    feat = grid_feature(fused)
    loss = align_loss(feat, feat, fused)
    assert float(loss) == pytest.approx(-2.0, abs=1e-9)


def test_align_loss_batch_mean():
    torch.manual_seed(1)
    fused = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    gen = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    vit = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    full = align_loss(grid_feature(gen), grid_feature(vit), fused)
    singles = [align_loss(grid_feature(gen[i:i + 1]), grid_feature(vit[i:i + 1]),
                          fused[i:i + 1]) for i in range(2)]
    assert float(full) == pytest.approx(sum(map(float, singles)) / 2, abs=1e-12)


def test_align_loss_resizes_mismatched_grids():
    torch.manual_seed(2)
    fused = torch.randn(1, 4, 8, 8)
    gen = grid_feature(torch.randn(1, 4, 4, 4))  # half-res pathway grid
    vit = grid_feature(torch.randn(1, 4, 8, 8))
    loss = align_loss(gen, vit, fused)
    assert torch.isfinite(loss)
    with pytest.raises(ShapeError):
        align_loss(grid_feature(torch.randn(1, 6, 8, 8)), vit, fused)


def test_align_loss_stop_grad_semantics():
    torch.manual_seed(3)
    fused = torch.randn(1, 3, 4, 4, requires_grad=True)
    gen_t = torch.randn(1, 3, 4, 4, requires_grad=True)
    vit_t = torch.randn(1, 3, 4, 4, requires_grad=True)
    loss = align_loss(grid_feature(gen_t), grid_feature(vit_t), fused,
                      stop_grad_anchor=True)
    loss.backward()
    assert fused.grad is None
    assert gen_t.grad is not None and vit_t.grad is not None

    fused2 = torch.randn(1, 3, 4, 4, requires_grad=True)
    loss2 = align_loss(grid_feature(gen_t.detach().requires_grad_(True)),
                       grid_feature(vit_t.detach().requires_grad_(True)),
                       fused2, stop_grad_anchor=False)
    loss2.backward()
    assert fused2.grad is not None


def test_align_loss_gradients_match_finite_differences():
    torch.manual_seed(4)
    gen = torch.randn(1, 3, 3, 3, dtype=torch.float64)
    vit = torch.randn(1, 3, 3, 3, dtype=torch.float64)
    fused = torch.randn(1, 3, 3, 3, dtype=torch.float64)

    leaf = gen.clone().requires_grad_(True)
    align_loss(grid_feature(leaf), grid_feature(vit), fused).backward()
    grad = leaf.grad.reshape(-1)

    h = 1e-5
    flat = gen.reshape(-1)
    for i in range(0, flat.numel(), 5):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += h
        minus[i] -= h
        fp = float(align_loss(grid_feature(plus.reshape(gen.shape)),
                              grid_feature(vit), fused))
        fm = float(align_loss(grid_feature(minus.reshape(gen.shape)),
                              grid_feature(vit), fused))
        fd = (fp - fm) / (2 * h)
        assert abs(fd - float(grad[i])) / max(abs(float(grad[i])), 1e-6) < 1e-4


def test_resize_token_grid_identity_and_constant():
    x = torch.rand(2, 5, 4, 4)
    fm = grid_feature(x)
    same = resize_token_grid(fm, (4, 4))
    torch.testing.assert_close(same, x.permute(0, 2, 3, 1))
    const = grid_feature(torch.full((1, 3, 4, 4), 2.5))
    up = resize_token_grid(const, (8, 8))
    torch.testing.assert_close(up, torch.full((1, 8, 8, 3), 2.5))
