"""Metric oracles: hand-computed errors, alignment recovery, report plumbing."""

import json

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from synmesh.errors import DegeneracyError, ShapeError
from synmesh.metrics import (EvalReport, apply_similarity, detection_f1,
                             match_by_joints, mpjpe, mpve, pa_mpjpe,
                             read_predictions, region_mpve, root_align,
                             umeyama_alignment, write_predictions)


def random_cloud(rng, n=8, scale=1.0):
    return rng.normal(0.0, scale, size=(n, 3))


# ---------------------------------------------------------------------------
# mpjpe / mpve


def test_mpjpe_hand_computed():
    gt = np.zeros((2, 3))
    pred = np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])
    # root joint coincides, second joint is a 3-4-5 triangle away
    assert mpjpe(pred, gt) == pytest.approx(2.5, abs=1e-12)


def test_mpjpe_root_alignment_kills_global_shift():
    rng = np.random.default_rng(0)
    gt = random_cloud(rng)
    pred = gt + rng.normal(0, 0.05, gt.shape)
    shifted = pred + np.array([10.0, -4.0, 2.0])
    assert mpjpe(shifted, gt) == pytest.approx(mpjpe(pred, gt), abs=1e-12)
    assert mpjpe(shifted, gt, align_root=False) > mpjpe(pred, gt) + 1.0


def test_mpjpe_batched_mean():
    rng = np.random.default_rng(1)
    gt = rng.normal(size=(4, 6, 3))
    pred = gt + rng.normal(0, 0.1, gt.shape)
    singles = [mpjpe(pred[i], gt[i]) for i in range(4)]
    assert mpjpe(pred, gt) == pytest.approx(np.mean(singles), abs=1e-12)


def test_mpjpe_shape_mismatch():
    with pytest.raises(ShapeError):
        mpjpe(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        mpjpe(np.zeros(3), np.zeros(3))


def test_root_align_zeroes_root():
    rng = np.random.default_rng(2)
    pts = random_cloud(rng)
    out = root_align(pts)
    assert np.allclose(out[0], 0.0)
    assert np.allclose(out, pts - pts[0])


def test_mpve_known_value_and_region():
    gt = np.zeros((4, 3))
    pred = np.zeros((4, 3))
    pred[1, 0] = 2.0
    pred[3, 1] = 4.0
    assert mpve(pred, gt) == pytest.approx(1.5)
    assert region_mpve(pred, gt, [1, 3]) == pytest.approx(3.0)
    assert region_mpve(pred, gt, [0, 2]) == 0.0
    with pytest.raises(ShapeError):
        region_mpve(pred, gt, [])
    with pytest.raises(ShapeError):
        mpve(pred, np.zeros((5, 3)))


# ---------------------------------------------------------------------------
# similarity alignment


def test_umeyama_recovers_known_transform():
    rng = np.random.default_rng(3)
    for _ in range(20):
        src = random_cloud(rng)
        rot = Rotation.random(random_state=rng).as_matrix()
        scale = rng.uniform(0.5, 2.0)
        t = rng.normal(0, 2.0, 3)
        dst = apply_similarity(src, scale, rot, t)
        s_hat, r_hat, t_hat = umeyama_alignment(src, dst)
        assert s_hat == pytest.approx(scale, abs=1e-9)
        np.testing.assert_allclose(r_hat, rot, atol=1e-9)
        np.testing.assert_allclose(t_hat, t, atol=1e-8)


def test_umeyama_returns_proper_rotation_under_reflection():
    rng = np.random.default_rng(4)
    src = random_cloud(rng)
    dst = src * np.array([1.0, 1.0, -1.0])  # mirrored target
    _, rot, _ = umeyama_alignment(src, dst)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)


def test_umeyama_degenerate_sources():
    line = np.stack([np.arange(5.0), np.zeros(5), np.zeros(5)], axis=1)
    with pytest.raises(DegeneracyError):
        umeyama_alignment(line, line + 1.0)
    point = np.ones((4, 3))
    with pytest.raises(DegeneracyError):
        umeyama_alignment(point, point)
    with pytest.raises(ShapeError):
        umeyama_alignment(np.zeros((2, 3)), np.zeros((2, 3)))


def test_pa_mpjpe_zero_under_similarity():
    rng = np.random.default_rng(5)
    for _ in range(20):
        gt = random_cloud(rng)
        rot = Rotation.random(random_state=rng).as_matrix()
        pred = apply_similarity(gt, rng.uniform(0.5, 2.0), rot, rng.normal(0, 1, 3))
        assert pa_mpjpe(pred, gt) == pytest.approx(0.0, abs=1e-8)


def test_pa_mpjpe_below_mpjpe_under_pose_misfit():
    """Whenever the clouds differ by a real rotation/scale, alignment wins."""
    rng = np.random.default_rng(6)
    for _ in range(100):
        gt = random_cloud(rng)
        rot = Rotation.random(random_state=rng).as_matrix()
        pred = apply_similarity(gt, rng.uniform(0.7, 1.4), rot,
                                rng.normal(0, 0.5, 3))
        pred += rng.normal(0, 0.2, gt.shape)
        assert pa_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-9


def test_pa_mpjpe_ordering_edge_case_on_pure_noise():
    """Alignment optimizes the squared-sum, but the metric reports mean norm
    (and plain MPJPE pins the root rather than the centroid), so rare
    noise-only pairs land slightly above plain MPJPE.  This frozen pair is one
    such inversion; it documents the boundary rather than a bug."""
    pred = np.array([
        [-0.856895150235695, -1.2727165561512115, -0.9495549309018689],
        [1.3280810829790086, 1.5394858307426122, -0.3786766786948743],
        [-1.6049943627288785, -0.38796490354286756, 1.5414906161496322],
        [0.5448310304581306, -1.7104415341988337, 0.7091949864622349],
        [0.14413705275015687, 0.0677143259390699, 0.06969192473201596],
        [-1.3993486602572136, 1.0802598111761772, 0.31562227216921146],
        [-0.6867027383285242, -1.922895448428015, -1.6733850600050921],
        [-1.5706545345627192, 0.08569156820343471, -0.27583195603182326]])
    gt = np.array([
        [-0.7166241935160272, -1.2753570827495284, -0.8090827962650223],
        [1.2186641405357372, 1.4525512192917776, -0.6537447388587686],
        [-1.2274946119298837, -0.4866784807059445, 1.6302983132897597],
        [-0.0817982252678167, -2.1441441146071036, 0.8361559158128173],
        [-0.1366597965340609, 0.600205934703186, 0.39171286825432666],
        [-1.3143384771866475, 1.0052317359150535, 0.6517049424182626],
        [-0.6921901488097996, -2.2925961351093593, -1.185808849018747],
        [-1.159400640949035, 0.6659182357135678, -0.6130726558282454]])
    assert pa_mpjpe(pred, gt) > mpjpe(pred, gt)
    # still within a whisker: the squared-sum objective did go down
    assert pa_mpjpe(pred, gt) < mpjpe(pred, gt) * 1.01


def _fit_similarity_numerically(src, dst):
    """Least-squares similarity via generic optimization; no SVD involved."""

    def objective(x):
        rot = Rotation.from_rotvec(x[:3]).as_matrix()
        mapped = np.exp(x[3]) * src @ rot.T + x[4:]
        return ((mapped - dst) ** 2).sum()

    best = None
    rng = np.random.default_rng(7)
    starts = [np.zeros(7)] + [np.concatenate([rng.normal(0, 1, 3), [0.0],
                                              rng.normal(0, 1, 3)])
                              for _ in range(5)]
    for x0 in starts:
        res = minimize(objective, x0, method="BFGS",
                       options={"gtol": 1e-12, "maxiter": 2000})
        if best is None or res.fun < best.fun:
            best = res
    rot = Rotation.from_rotvec(best.x[:3]).as_matrix()
    mapped = np.exp(best.x[3]) * src @ rot.T + best.x[4:]
    return float(np.linalg.norm(mapped - dst, axis=-1).mean())


def test_pa_mpjpe_matches_numerical_minimizer_four_points():
    rng = np.random.default_rng(8)
    for _ in range(5):
        src = random_cloud(rng, n=4)
        dst = random_cloud(rng, n=4)
        assert pa_mpjpe(src, dst) == pytest.approx(
            _fit_similarity_numerically(src, dst), abs=1e-5)


# ---------------------------------------------------------------------------
# matching / detection


def test_match_by_joints_recovers_permutation():
    rng = np.random.default_rng(9)
    gt = rng.normal(0, 1, size=(3, 5, 3)) + np.arange(3)[:, None, None] * 10
    perm = [2, 0, 1]
    pairs = match_by_joints(gt[perm], gt)
    assert pairs == sorted(((i, perm[i]) for i in range(3)), key=lambda rc: rc[1])
    assert match_by_joints(gt, np.zeros((0, 5, 3))) == []


def test_detection_f1_counting():
    gt = np.array([[10.0, 10.0], [40.0, 40.0]])
    pred = np.array([[11.0, 10.0], [60.0, 60.0], [40.5, 39.5]])
    out = detection_f1(pred, gt, threshold=3.0)
    assert out["tp"] == 2
    assert out["precision"] == pytest.approx(2 / 3)
    assert out["recall"] == pytest.approx(1.0)
    assert out["f1"] == pytest.approx(2 * (2 / 3) / (2 / 3 + 1.0))


def test_detection_f1_greedy_claims_each_gt_once():
    gt = np.array([[10.0, 10.0]])
    pred = np.array([[10.0, 10.5], [10.5, 10.0]])  # both within threshold
    out = detection_f1(pred, gt, threshold=2.0)
    assert out["tp"] == 1
    assert out["precision"] == pytest.approx(0.5)


def test_detection_f1_empty_inputs():
    assert detection_f1(np.zeros((0, 2)), np.ones((2, 2)), 3.0)["f1"] == 0.0
    out = detection_f1(np.ones((2, 2)), np.zeros((0, 2)), 3.0)
    assert out["f1"] == 0.0 and out["n_pred"] == 2


# ---------------------------------------------------------------------------
# report aggregation and files


def scene_row(seed, mpjpe_v, tp, n_pred, n_gt, **extra):
    row = {"scene_seed": seed, "mpjpe": mpjpe_v, "pa_mpjpe": mpjpe_v * 0.5,
           "mpve": mpjpe_v * 2.0, "mpve_hands": None, "mpve_face": None,
           "tp": tp, "n_pred": n_pred, "n_gt": n_gt,
           "f1": 0.0, "precision": 0.0, "recall": 0.0}
    row.update(extra)
    return row


def test_report_aggregation_oracle():
    rows = [scene_row(1, 0.010, tp=1, n_pred=2, n_gt=1),
            scene_row(2, 0.030, tp=1, n_pred=1, n_gt=2)]
    rep = EvalReport.from_scene_rows(rows)
    assert rep.n_scenes == 2
    assert rep.mpjpe == pytest.approx(20.0)       # mean(10, 30) mm
    assert rep.pa_mpjpe == pytest.approx(10.0)
    assert rep.mpve == pytest.approx(40.0)
    assert rep.mpve_hands == 0.0                  # all-None column
    # pooled counts: tp=2, n_pred=3, n_gt=3
    assert rep.precision == pytest.approx(2 / 3)
    assert rep.recall == pytest.approx(2 / 3)
    assert rep.f1 == pytest.approx(2 / 3)


def test_report_empty():
    rep = EvalReport.from_scene_rows([])
    assert rep.n_scenes == 0 and rep.mpjpe == 0.0 and rep.f1 == 0.0


def test_report_files_round_trip(tmp_path):
    rows = [scene_row(7, 0.020, tp=1, n_pred=1, n_gt=1)]
    rep = EvalReport.from_scene_rows(rows)
    rep.to_json(tmp_path / "report.json", config_echo={"preset": "toy"})
    with open(tmp_path / "report.json") as fh:
        payload = json.load(fh)
    assert payload["summary"]["mpjpe"] == pytest.approx(20.0)
    assert payload["config"] == {"preset": "toy"}
    rep.to_csv(tmp_path / "report.csv")
    text = (tmp_path / "report.csv").read_text().splitlines()
    assert text[0].startswith("scene_seed,")
    assert text[1].startswith("7,")


def test_predictions_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    rows = []
    for seed in (11, 12):
        rows.append({
            "scene_seed": seed,
            "presence": rng.uniform(0, 1, 2).astype(np.float32),
            "query_index": np.array([0, 3], np.int64),
            "cam_offset": rng.normal(0, 1, (2, 3)).astype(np.float32),
            "theta": rng.normal(0, 0.2, (2, 6, 3)).astype(np.float32),
            "beta": rng.normal(0, 1, (2, 3)).astype(np.float32),
            "alpha": rng.normal(0, 1, (2, 2)).astype(np.float32),
            "root_rotation": rng.normal(0, 0.3, (2, 3)).astype(np.float32),
            "root_translation": rng.normal(0, 1, (2, 3)).astype(np.float32),
        })
    path = tmp_path / "preds.bin"
    write_predictions(path, rows, config_echo={"note": "test"})
    header, back = read_predictions(path)
    assert header["n_scenes"] == 2
    assert header["config"] == {"note": "test"}
    assert [r["scene_seed"] for r in back] == [11, 12]
    for orig, rt in zip(rows, back):
        for key, val in orig.items():
            if key == "scene_seed":
                continue
            np.testing.assert_array_equal(rt[key], val)
            assert rt[key].dtype == val.dtype
