"""Evaluation metrics (numpy): joint/vertex errors, rigid alignment, detection F1.

Everything here is torch-free so the metrics double as independent oracles for
the learned pipeline.  Distances are in the body model's metric units; reports
scale them by 1000 for readability.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .container import MAGIC_PREDICTIONS, read_container, write_container
from .errors import DegeneracyError, ShapeError

ROOT_JOINT = 0


def _as_batched(joints) -> tuple[np.ndarray, bool]:
    arr = np.asarray(joints, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim != 3:
        raise ShapeError(f"expected (J, d) or (N, J, d) points, got {arr.shape}")
    return arr, False


def root_align(joints, root_index: int = ROOT_JOINT) -> np.ndarray:
    """Subtract the root joint so errors ignore global placement."""
    arr, squeeze = _as_batched(joints)
    out = arr - arr[:, root_index:root_index + 1, :]
    return out[0] if squeeze else out


def mpjpe(pred, gt, align_root: bool = True, root_index: int = ROOT_JOINT) -> float:
    """Mean per-joint euclidean error; root-aligned by default."""
    p, _ = _as_batched(pred)
    g, _ = _as_batched(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} vs ground truth {g.shape}")
    if align_root:
        p = root_align(p, root_index)
        g = root_align(g, root_index)
    return float(np.linalg.norm(p - g, axis=-1).mean())


def umeyama_alignment(src: np.ndarray, dst: np.ndarray, with_scale: bool = True,
                      tol: float = 1e-9):
    """Least-squares similarity (s, R, t) mapping src onto dst.

    Classic SVD solution with the determinant sign fix so R is a proper
    rotation.  Raises DegeneracyError when the source cloud is rank-deficient
    (collinear or coincident points), where the rotation is not identifiable.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[0] < 3:
        raise ShapeError(f"need matching (N>=3, d) clouds, got {src.shape} and {dst.shape}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / src.shape[0]
    u, s, vt = np.linalg.svd(cov)
    if s[0] <= 0 or s[1] <= tol * s[0]:
        raise DegeneracyError("source points are (near-)collinear; rotation ambiguous")
    d = np.sign(np.linalg.det(u @ vt))
    flip = np.ones(src.shape[1])
    flip[-1] = d
    rot = u @ np.diag(flip) @ vt
    var_s = (xs ** 2).sum() / src.shape[0]
    scale = float((s * flip).sum() / var_s) if with_scale else 1.0
    t = mu_d - scale * rot @ mu_s
    return scale, rot, t


def apply_similarity(points: np.ndarray, scale: float, rot: np.ndarray,
                     t: np.ndarray) -> np.ndarray:
    return scale * np.asarray(points, np.float64) @ np.asarray(rot).T + t


def pa_mpjpe(pred, gt) -> float:
    """MPJPE after per-instance similarity alignment of pred onto gt."""
    p, _ = _as_batched(pred)
    g, _ = _as_batched(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} vs ground truth {g.shape}")
    vals = []
    for pi, gi in zip(p, g):
        s, r, t = umeyama_alignment(pi, gi)
        vals.append(np.linalg.norm(apply_similarity(pi, s, r, t) - gi, axis=-1).mean())
    return float(np.mean(vals))


def mpve(pred_vertices, gt_vertices) -> float:
    """Mean per-vertex error on already-aligned meshes."""
    p = np.asarray(pred_vertices, np.float64)
    g = np.asarray(gt_vertices, np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"vertex shape mismatch {p.shape} vs {g.shape}")
    return float(np.linalg.norm(p - g, axis=-1).mean())


pve = mpve


def region_mpve(pred_vertices, gt_vertices, indices) -> float:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ShapeError("empty vertex region")
    return mpve(np.asarray(pred_vertices)[..., idx, :],
                np.asarray(gt_vertices)[..., idx, :])


# ---------------------------------------------------------------------------
# instance-level matching


def match_by_joints(pred_joints, gt_joints) -> list[tuple[int, int]]:
    """Presence-free exact assignment on mean joint distance (world frame)."""
    p = np.asarray(pred_joints, np.float64)
    g = np.asarray(gt_joints, np.float64)
    if g.shape[0] == 0:
        return []
    cost = np.linalg.norm(p[:, None] - g[None], axis=-1).mean(axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: rc[1])


def detection_f1(pred_xy, gt_xy, threshold: float) -> dict:
    """Greedy nearest-first 2D matching within a pixel threshold.

    Returns precision/recall/F1; no predictions (or no ground truth) gives 0.
    """
    p = np.asarray(pred_xy, np.float64).reshape(-1, 2)
    g = np.asarray(gt_xy, np.float64).reshape(-1, 2)
    if p.shape[0] == 0 or g.shape[0] == 0:
        return {"f1": 0.0, "precision": 0.0, "recall": 0.0, "tp": 0,
                "n_pred": int(p.shape[0]), "n_gt": int(g.shape[0])}
    dist = np.linalg.norm(p[:, None] - g[None], axis=-1)
    order = sorted((dist[i, j], i, j) for i in range(p.shape[0])
                   for j in range(g.shape[0]))
    used_p, used_g, tp = set(), set(), 0
    for d, i, j in order:
        if d > threshold:
            break
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        tp += 1
    precision = tp / p.shape[0]
    recall = tp / g.shape[0]
    f1 = 0.0 if tp == 0 else 2 * precision * recall / (precision + recall)
    return {"f1": float(f1), "precision": float(precision), "recall": float(recall),
            "tp": tp, "n_pred": int(p.shape[0]), "n_gt": int(g.shape[0])}


# ---------------------------------------------------------------------------
# aggregated report


@dataclass
class EvalReport:
    """Aggregate metrics over a scene set; distance metrics pre-scaled x1000."""

    n_scenes: int = 0
    mpjpe: float = 0.0
    pa_mpjpe: float = 0.0
    mpve: float = 0.0
    mpve_hands: float = 0.0
    mpve_face: float = 0.0
    f1: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    per_scene: list[dict] = field(default_factory=list)

    SCALE = 1000.0

    @staticmethod
    def from_scene_rows(rows: list[dict]) -> "EvalReport":
        """Rows carry raw model-unit distances; aggregation applies the x1000 scale."""
        if not rows:
            return EvalReport()
        def mean(key):
            vals = [r[key] for r in rows if r.get(key) is not None]
            return float(np.mean(vals)) if vals else 0.0
        tp = sum(r["tp"] for r in rows)
        n_pred = sum(r["n_pred"] for r in rows)
        n_gt = sum(r["n_gt"] for r in rows)
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_gt if n_gt else 0.0
        f1 = 0.0 if tp == 0 else 2 * precision * recall / (precision + recall)
        return EvalReport(
            n_scenes=len(rows),
            mpjpe=mean("mpjpe") * EvalReport.SCALE,
            pa_mpjpe=mean("pa_mpjpe") * EvalReport.SCALE,
            mpve=mean("mpve") * EvalReport.SCALE,
            mpve_hands=mean("mpve_hands") * EvalReport.SCALE,
            mpve_face=mean("mpve_face") * EvalReport.SCALE,
            f1=float(f1), precision=float(precision), recall=float(recall),
            per_scene=rows,
        )

    def summary(self) -> dict:
        return {"n_scenes": self.n_scenes, "mpjpe": self.mpjpe,
                "pa_mpjpe": self.pa_mpjpe, "mpve": self.mpve,
                "mpve_hands": self.mpve_hands, "mpve_face": self.mpve_face,
                "f1": self.f1, "precision": self.precision, "recall": self.recall}

    def to_json(self, path, config_echo: dict | None = None) -> None:
        payload = {"summary": self.summary(), "config": config_echo or {},
                   "per_scene": self.per_scene}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)

    def to_csv(self, path) -> None:
        cols = ["scene_seed", "n_gt", "n_pred", "tp", "mpjpe", "pa_mpjpe",
                "mpve", "mpve_hands", "mpve_face"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            writer.writeheader()
            for row in self.per_scene:
                writer.writerow(row)


# ---------------------------------------------------------------------------
# prediction container


def write_predictions(path, scene_rows: list[dict], config_echo: dict | None = None) -> None:
    """Persist per-scene predicted parameters and presence.

    Each row: scene_seed (int), presence (K,), query_index (K,), cam_offset
    (K, 3) and the body parameter arrays theta/beta/alpha/root_rotation/
    root_translation with leading dim K.
    """
    records = [{"meta": {"n_scenes": len(scene_rows),
                         "config": config_echo or {}}}]
    for row in scene_rows:
        rec = {"meta": {"scene_seed": int(row["scene_seed"])}}
        for key in ("presence", "query_index", "cam_offset", "theta", "beta",
                    "alpha", "root_rotation", "root_translation"):
            arr = np.asarray(row[key])
            rec[key] = arr.astype(np.int64 if key == "query_index" else np.float32)
        records.append(rec)
    write_container(path, MAGIC_PREDICTIONS, records)


def read_predictions(path) -> tuple[dict, list[dict]]:
    records = read_container(path, MAGIC_PREDICTIONS)
    if not records or "meta" not in records[0]:
        raise ShapeError(f"prediction file {path} missing header record")
    header = records[0]["meta"]
    rows = []
    for rec in records[1:]:
        row = {"scene_seed": rec["meta"]["scene_seed"]}
        row.update({k: v for k, v in rec.items() if k != "meta"})
        rows.append(row)
    return header, rows
