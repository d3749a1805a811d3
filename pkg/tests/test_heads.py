"""Query-decoder and matching tests: mask bias, regression init, assignment."""

from itertools import permutations

import numpy as np
import pytest
import torch

from synmesh.errors import CapacityError, ShapeError
from synmesh.heads import (MASK_BIAS, InstanceDecoder, InstanceQueries,
                           RegressionHeads, match_instances)

DIM, HEADS, BLOCKS, K_MAX = 32, 4, 2, 4
IMAGE_HW = (16, 16)
GRID_HW = (4, 4)  # each grid cell covers a 4x4 pixel block


@pytest.fixture()
def decoder():
    torch.manual_seed(0)
    return InstanceDecoder(DIM, HEADS, BLOCKS)


@pytest.fixture()
def queries():
    torch.manual_seed(1)
    return InstanceQueries(K_MAX, DIM)


def fused_map(batch=2, seed=2):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(batch, DIM, *GRID_HW, generator=g)


# ---------------------------------------------------------------------------
# mask bias


def test_mask_bias_single_pixel_selects_one_cell():
    masks = torch.zeros(1, *IMAGE_HW)
    masks[0, 0, 0] = 1.0  # pixel (0,0) lies in grid cell 0
    bias = InstanceDecoder._mask_bias(masks, K_MAX, GRID_HW, torch.float32, IMAGE_HW)
    assert bias.shape == (1, K_MAX, 16)
    expected = torch.full((16,), MASK_BIAS)
    expected[0] = 0.0
    for k in range(K_MAX):
        assert torch.equal(bias[0, k], expected)


def test_mask_bias_per_query_masks_differ():
    masks = torch.zeros(1, 2, *IMAGE_HW)
    masks[0, 0, :4, :4] = 1.0    # query 0: cell 0 only
    masks[0, 1, 4:8, 4:8] = 1.0  # query 1: cell 5 only
    bias = InstanceDecoder._mask_bias(masks, 2, GRID_HW, torch.float32, IMAGE_HW)
    assert bias[0, 0, 0] == 0.0 and bias[0, 0, 5] == MASK_BIAS
    assert bias[0, 1, 5] == 0.0 and bias[0, 1, 0] == MASK_BIAS


def test_mask_bias_empty_mask_is_unrestricted():
    masks = torch.zeros(2, *IMAGE_HW)
    bias = InstanceDecoder._mask_bias(masks, K_MAX, GRID_HW, torch.float32, IMAGE_HW)
    assert torch.equal(bias, torch.zeros(2, K_MAX, 16))


def test_mask_bias_none_passthrough():
    assert InstanceDecoder._mask_bias(None, K_MAX, GRID_HW, torch.float32,
                                      IMAGE_HW) is None


def test_mask_bias_validation():
    with pytest.raises(ShapeError):
        InstanceDecoder._mask_bias(torch.zeros(1, 8, 8), K_MAX, GRID_HW,
                                   torch.float32, IMAGE_HW)
    with pytest.raises(ShapeError):
        InstanceDecoder._mask_bias(torch.zeros(16, 16), K_MAX, GRID_HW,
                                   torch.float32, IMAGE_HW)


def test_masked_attention_mass_is_zero_outside(decoder, queries):
    """exp(MASK_BIAS) underflows, so masked-out cells get literally no weight."""
    masks = torch.zeros(1, *IMAGE_HW)
    masks[0, :, :8] = 1.0  # left half -> grid columns 0-1
    fused = fused_map(batch=1)
    with torch.no_grad():
        _, attn_maps = decoder.decode(fused, masks, queries, IMAGE_HW)
    inside = InstanceDecoder._mask_bias(masks, K_MAX, GRID_HW, torch.float32,
                                        IMAGE_HW)[0, 0] == 0.0
    for attn in attn_maps:  # (B, heads, K, T)
        outside_mass = attn[0, :, :, ~inside].sum()
        assert float(outside_mass) == 0.0
        rows = attn.sum(dim=-1)
        torch.testing.assert_close(rows, torch.ones_like(rows), rtol=0, atol=1e-5)


def test_decode_shapes_and_determinism(decoder, queries):
    fused = fused_map()
    with torch.no_grad():
        x1, attn = decoder.decode(fused, None, queries, IMAGE_HW)
        x2, _ = decoder.decode(fused, None, queries, IMAGE_HW)
    assert x1.shape == (2, K_MAX, DIM)
    assert len(attn) == BLOCKS
    assert attn[0].shape == (2, HEADS, K_MAX, 16)
    assert torch.equal(x1, x2)


def test_decode_rejects_flat_input(decoder, queries):
    with pytest.raises(ShapeError):
        decoder.decode(torch.randn(2, 16, DIM), None, queries, IMAGE_HW)


# ---------------------------------------------------------------------------
# regression heads


def test_regress_zeroed_final_layers_hit_biases():
    torch.manual_seed(3)
    heads = RegressionHeads(DIM, n_joints=6, n_shape=4, n_expression=2)
    with torch.no_grad():
        for seq in heads.heads.values():
            seq[2].weight.zero_()
    q = torch.randn(2, K_MAX, DIM)
    pred = heads.regress(q)
    assert pred.params.theta.shape == (2, K_MAX, 6, 3)
    assert torch.equal(pred.params.theta, torch.zeros(2, K_MAX, 6, 3))
    assert torch.equal(pred.params.beta, torch.zeros(2, K_MAX, 4))
    expected_t = torch.tensor([0.0, 0.0, 3.4]).expand(2, K_MAX, 3)
    assert torch.equal(pred.params.root_translation, expected_t)
    assert torch.equal(pred.presence, torch.full((2, K_MAX), 0.5))
    assert torch.equal(pred.presence_logit, torch.zeros(2, K_MAX))
    assert torch.equal(pred.cam_offset, torch.zeros(2, K_MAX, 3))


def test_regress_fresh_heads_start_near_biases():
    torch.manual_seed(4)
    heads = RegressionHeads(DIM, n_joints=6, n_shape=4, n_expression=2)
    q = torch.randn(1, K_MAX, DIM)
    pred = heads.regress(q)
    assert pred.params.theta.abs().max() < 0.1
    assert (pred.presence - 0.5).abs().max() < 0.05
    assert (pred.params.root_translation[..., 2] - 3.4).abs().max() < 0.1


def test_queries_k_max_property(queries):
    assert queries.k_max == K_MAX
    assert queries.embed.shape == (K_MAX, DIM)


# ---------------------------------------------------------------------------
# matching


def _spread_joints(centers, n_joints=5):
    """(K, 2) centers -> (K, J, 2) joint clouds around them."""
    centers = np.asarray(centers, dtype=np.float64)
    offsets = np.linspace(-1.0, 1.0, n_joints)[:, None] * np.array([1.0, 0.5])
    return centers[:, None, :] + offsets[None]


def test_match_identity_when_aligned():
    gt = _spread_joints([[10, 10], [40, 12], [25, 30]])
    pairs = match_instances(gt.copy(), np.ones(3), gt)
    assert pairs == [(0, 0), (1, 1), (2, 2)]


def test_match_recovers_permutation():
    gt = _spread_joints([[10, 10], [40, 12], [25, 30]])
    perm = [2, 0, 1]
    pairs = match_instances(gt[perm], np.ones(3), gt)
    # prediction i sits on gt perm[i]
    assert pairs == sorted(((i, perm[i]) for i in range(3)), key=lambda rc: rc[1])


def test_match_against_brute_force_oracle():
    rng = np.random.default_rng(11)
    for _ in range(25):
        pred = rng.uniform(0, 64, size=(3, 5, 2))
        gt = rng.uniform(0, 64, size=(3, 5, 2))
        pres = rng.uniform(0, 1, size=3)
        pairs = match_instances(pred, pres, gt, w_joint=1.0, w_presence=0.5,
                                scale=2.0)
        dist = np.linalg.norm(pred[:, None] - gt[None], axis=-1).mean(axis=-1)
        cost = dist / 2.0 + 0.5 * (1.0 - pres)[:, None]
        best = min(permutations(range(3)),
                   key=lambda p: sum(cost[p[g], g] for g in range(3)))
        total = sum(cost[p, g] for p, g in pairs)
        expected = sum(cost[best[g], g] for g in range(3))
        assert total <= expected + 1e-12


def test_match_presence_breaks_ties():
    gt = _spread_joints([[20, 20]])
    pred = np.concatenate([gt, gt])  # two spatially identical predictions
    pairs = match_instances(pred, np.array([0.2, 0.9]), gt)
    assert pairs == [(1, 0)]


def test_match_fewer_gt_than_predictions():
    gt = _spread_joints([[10, 10]])
    pred = _spread_joints([[50, 50], [10, 10], [30, 5]])
    pairs = match_instances(pred, np.ones(3) * 0.5, gt)
    assert pairs == [(1, 0)]


def test_match_empty_gt():
    pred = _spread_joints([[10, 10]])
    assert match_instances(pred, np.ones(1), np.zeros((0, 5, 2))) == []


def test_match_overflow_raises():
    gt = _spread_joints([[10, 10], [20, 20]])
    pred = _spread_joints([[10, 10]])
    with pytest.raises(CapacityError):
        match_instances(pred, np.ones(1), gt)


def test_match_greedy_path_consistent_with_exact():
    """17 queries forces the greedy branch; well-separated case stays optimal."""
    rng = np.random.default_rng(13)
    centers = np.stack([np.arange(5) * 50.0 + 10, np.full(5, 30.0)], axis=-1)
    gt = _spread_joints(centers)
    pred = np.concatenate([gt + rng.normal(0, 0.5, gt.shape),
                           rng.uniform(300, 400, size=(12, 5, 2))])
    pres = np.concatenate([np.full(5, 0.9), np.full(12, 0.1)])
    pairs = match_instances(pred, pres, gt)
    assert pairs == [(g, g) for g in range(5)]
