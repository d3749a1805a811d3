"""Toy parametric body: linear shape/expression bases + LBS over a humanoid tree.

The template is procedurally generated (no external assets): a canonical humanoid
skeleton whose first 24 joints follow the usual pelvis-rooted chain-plus-limbs
layout, optional extra joints hanging off the wrists/head, a vertex cloud scattered
along the bones, bone-interpolated skin weights, and a nearest-vertex joint
regressor.  Rest joints are *defined* as ``joint_regressor @ rest_vertices``, so the
kinematics follow the shaped body.

``forward`` is written in displacement form — ``v' = v + sum_j w_vj (A_j(v) - v)``
with per-bone rest-relative transforms ``A_j`` — which is algebraically standard LBS
(weights are normalized) and reproduces the rest vertices bit-for-bit at zero
parameters, because every ``A_j`` is then an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import BodyConfig
from .container import MAGIC_TEMPLATE, read_container, write_container
from .errors import ConfigurationError, ShapeError

# canonical 24-joint humanoid; parents always precede children so any prefix is a tree
_CANON_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17,
                  18, 19, 20, 21]
_CANON_POS = np.array([
    [0.00, 0.00, 0.00],    # 0 pelvis
    [0.09, -0.06, 0.00],   # 1 left hip
    [-0.09, -0.06, 0.00],  # 2 right hip
    [0.00, 0.10, 0.00],    # 3 spine1
    [0.10, -0.45, 0.00],   # 4 left knee
    [-0.10, -0.45, 0.00],  # 5 right knee
    [0.00, 0.22, 0.00],    # 6 spine2
    [0.10, -0.84, 0.00],   # 7 left ankle
    [-0.10, -0.84, 0.00],  # 8 right ankle
    [0.00, 0.33, 0.00],    # 9 chest
    [0.11, -0.90, 0.10],   # 10 left foot
    [-0.11, -0.90, 0.10],  # 11 right foot
    [0.00, 0.46, 0.00],    # 12 neck
    [0.06, 0.40, 0.00],    # 13 left collar
    [-0.06, 0.40, 0.00],   # 14 right collar
    [0.00, 0.58, 0.00],    # 15 head
    [0.16, 0.42, 0.00],    # 16 left shoulder
    [-0.16, 0.42, 0.00],   # 17 right shoulder
    [0.42, 0.42, 0.00],    # 18 left elbow
    [-0.42, 0.42, 0.00],   # 19 right elbow
    [0.66, 0.42, 0.00],    # 20 left wrist
    [-0.66, 0.42, 0.00],   # 21 right wrist
    [0.75, 0.42, 0.00],    # 22 left hand
    [-0.75, 0.42, 0.00],   # 23 right hand
])
_WRIST_L, _WRIST_R, _HEAD = 20, 21, 15
_EXTRA_ANCHORS = (_WRIST_L, _WRIST_R, _HEAD)
_LEFT_RIGHT_PAIRS = [(1, 2), (4, 5), (7, 8), (10, 11), (13, 14), (16, 17), (18, 19),
                     (20, 21), (22, 23)]

TAYLOR_EPS = 1e-8  # axis-angle norms below this use the series branch


@dataclass
class BodyParams:
    """Per-instance pose/shape/expression plus a rigid root transform.

    All tensors may carry identical leading batch dimensions.
    """

    theta: torch.Tensor            # (..., J, 3) per-joint axis-angle
    beta: torch.Tensor             # (..., S)
    alpha: torch.Tensor            # (..., E)
    root_rotation: torch.Tensor    # (..., 3) axis-angle about the root joint
    root_translation: torch.Tensor  # (..., 3)

    @staticmethod
    def zeros(n_joints: int, n_shape: int, n_expression: int, batch=(),
              dtype=torch.float64) -> "BodyParams":
        batch = tuple(batch)
        return BodyParams(
            theta=torch.zeros(*batch, n_joints, 3, dtype=dtype),
            beta=torch.zeros(*batch, n_shape, dtype=dtype),
            alpha=torch.zeros(*batch, n_expression, dtype=dtype),
            root_rotation=torch.zeros(*batch, 3, dtype=dtype),
            root_translation=torch.zeros(*batch, 3, dtype=dtype),
        )

    def map(self, fn) -> "BodyParams":
        return BodyParams(fn(self.theta), fn(self.beta), fn(self.alpha),
                          fn(self.root_rotation), fn(self.root_translation))

    def to(self, dtype) -> "BodyParams":
        return self.map(lambda t: t.to(dtype))

    @staticmethod
    def stack(items: list["BodyParams"]) -> "BodyParams":
        return BodyParams(*(torch.stack([getattr(p, f) for p in items])
                            for f in ("theta", "beta", "alpha", "root_rotation",
                                      "root_translation")))


@dataclass
class BodyTemplate:
    """Frozen rest geometry, linear bases, skinning weights and kinematic tree."""

    vertices: torch.Tensor          # (V, 3) float64
    shape_basis: torch.Tensor       # (V, 3, S)
    expression_basis: torch.Tensor  # (V, 3, E)
    skin_weights: torch.Tensor      # (V, J), rows sum to 1
    joint_regressor: torch.Tensor   # (J, V), rows sum to 1
    parents: torch.Tensor           # (J,) int64, parents[0] == -1
    meta: dict

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[2]

    def rest_joints(self) -> torch.Tensor:
        return self.joint_regressor @ self.vertices


@dataclass
class MeshResult:
    vertices: torch.Tensor   # (..., V, 3)
    joints3d: torch.Tensor   # (..., J, 3)


def canonical_parents(n_joints: int) -> np.ndarray:
    """Parent table for a J-joint humanoid (prefix of the canonical 24 + leaf extras)."""
    if n_joints < 2:
        raise ConfigurationError(f"need at least 2 joints, got {n_joints}")
    parents = list(_CANON_PARENTS[: min(n_joints, 24)])
    for j in range(24, n_joints):
        parents.append(_EXTRA_ANCHORS[(j - 24) % len(_EXTRA_ANCHORS)])
    return np.asarray(parents, dtype=np.int64)


def _skeleton_positions(n_joints: int, rng: np.random.Generator) -> np.ndarray:
    pos = _CANON_POS[: min(n_joints, 24)].copy()
    extra = []
    for j in range(24, n_joints):
        anchor = _EXTRA_ANCHORS[(j - 24) % len(_EXTRA_ANCHORS)]
        spread = 0.08 if anchor == _HEAD else 0.05
        extra.append(_CANON_POS[anchor] + rng.normal(0.0, spread, 3))
    if extra:
        pos = np.concatenate([pos, np.asarray(extra)], axis=0)
    pos = pos + rng.normal(0.0, 0.004, pos.shape)  # per-seed individuality
    return pos


def make_toy_template(config: BodyConfig, seed: int) -> BodyTemplate:
    """Deterministically generate a toy body template from (config, seed)."""
    if config.n_vertices < config.n_joints:
        raise ConfigurationError(
            f"n_vertices {config.n_vertices} < n_joints {config.n_joints}")
    rng = np.random.default_rng(np.random.SeedSequence([max(seed, 0), seed + 2**31]))
    J, V, S, E = config.n_joints, config.n_vertices, config.n_shape, config.n_expression
    parents = canonical_parents(J)
    joints = _skeleton_positions(J, rng)

    # scatter vertices along bones, proportionally to bone length (root gets a torso blob)
    bone_len = np.empty(J)
    bone_len[0] = 0.25
    for j in range(1, J):
        bone_len[j] = max(np.linalg.norm(joints[j] - joints[parents[j]]), 0.02)
    share = bone_len / bone_len.sum()
    counts = np.maximum(1, np.floor(share * V).astype(int))
    while counts.sum() > V:
        counts[np.argmax(counts)] -= 1
    while counts.sum() < V:
        counts[np.argmax(share - counts / V)] += 1

    verts = np.empty((V, 3))
    weights = np.zeros((V, J))
    radius = np.where(np.isin(np.arange(J), [0, 3, 6, 9]), 0.11, 0.045)
    cursor = 0
    for j in range(J):
        n = counts[j]
        if n == 0:
            continue
        sl = slice(cursor, cursor + n)
        cursor += n
        u = rng.uniform(0.0, 1.0, n)
        if parents[j] < 0:
            base = joints[j][None, :] + rng.normal(0.0, radius[j], (n, 3))
            weights[sl, j] = 1.0
        else:
            p = parents[j]
            base = (1 - u)[:, None] * joints[p] + u[:, None] * joints[j]
            base = base + rng.normal(0.0, radius[j], (n, 3))
            blend = np.clip(u + rng.normal(0.0, 0.08, n), 0.0, 1.0)
            weights[sl, j] = blend
            weights[sl, p] = 1.0 - blend
        verts[sl] = base
    weights = weights / weights.sum(axis=1, keepdims=True)

    # joint regressor: inverse-distance over each joint's nearest vertices
    regressor = np.zeros((J, V))
    k = min(8, V)
    for j in range(J):
        d = np.linalg.norm(verts - joints[j], axis=1)
        near = np.argsort(d)[:k]
        w = 1.0 / (d[near] + 1e-3)
        regressor[j, near] = w / w.sum()

    # smooth shape basis: skin-weighted per-joint offset fields + mild vertex noise
    shape_basis = np.einsum("vj,jcs->vcs", weights, rng.normal(0.0, 0.05, (J, 3, S)))
    shape_basis = shape_basis + rng.normal(0.0, 0.004, (V, 3, S))
    # expression basis localized to the head subtree when one exists
    head_mask = _subtree_vertex_mask(weights, parents, _HEAD)
    if head_mask is None:
        head_mask = np.full(V, 0.2)
    expr_basis = head_mask[:, None, None] * rng.normal(0.0, 0.03, (V, 3, E))

    meta = {
        "n_vertices": V, "n_joints": J, "n_shape": S, "n_expression": E,
        "seed": int(seed),
    }
    return BodyTemplate(
        vertices=torch.from_numpy(verts),
        shape_basis=torch.from_numpy(shape_basis),
        expression_basis=torch.from_numpy(expr_basis),
        skin_weights=torch.from_numpy(weights),
        joint_regressor=torch.from_numpy(regressor),
        parents=torch.from_numpy(parents),
        meta=meta,
    )


def _subtree_joints(parents: np.ndarray, root: int) -> list[int]:
    J = len(parents)
    if root >= J:
        return []
    keep = {root}
    for j in range(root + 1, J):
        if parents[j] in keep:
            keep.add(j)
    return sorted(keep)


def _subtree_vertex_mask(weights: np.ndarray, parents: np.ndarray, root: int):
    sub = _subtree_joints(parents, root)
    if not sub:
        return None
    return weights[:, sub].sum(axis=1)


def region_vertex_indices(template: BodyTemplate) -> dict[str, np.ndarray]:
    """Vertex index subsets for 'hands' and 'face', by dominant skin weight.

    A vertex belongs to a region when its strongest skinning joint lies in the
    wrist subtrees (hands) or the head subtree (face).  Small skeletons without
    those joints yield empty index arrays.
    """
    parents = template.parents.numpy()
    dominant = template.skin_weights.argmax(dim=1).numpy()
    hands = set(_subtree_joints(parents, _WRIST_L)) | set(_subtree_joints(parents, _WRIST_R))
    face = set(_subtree_joints(parents, _HEAD))
    out = {}
    for name, joints in (("hands", hands), ("face", face)):
        out[name] = np.nonzero(np.isin(dominant, sorted(joints)))[0] if joints \
            else np.empty(0, dtype=np.int64)
    return out


def mirror_maps(n_joints: int) -> tuple[np.ndarray, np.ndarray]:
    """(joint permutation, parent anchors) realizing a left/right swap.

    Extra joints beyond the canonical 24 swap with the extra of the same ordinal on
    the opposite wrist; head extras map to themselves.
    """
    perm = np.arange(n_joints)
    for a, b in _LEFT_RIGHT_PAIRS:
        if b < n_joints:
            perm[a], perm[b] = b, a
    for j in range(24, n_joints):
        k = (j - 24) % 3
        if k == 0 and j + 1 < n_joints:
            perm[j], perm[j + 1] = j + 1, j
    anchors = canonical_parents(n_joints)
    return perm, anchors


# ---------------------------------------------------------------------------
# kinematics


def rodrigues(axis_angle: torch.Tensor) -> torch.Tensor:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3).

    Uses the closed form for norms >= 1e-8 and a series expansion below, so the
    map is exactly the identity at zero and differentiable everywhere.
    """
    if axis_angle.shape[-1] != 3:
        raise ShapeError(f"axis-angle must end in dim 3, got {tuple(axis_angle.shape)}")
    sq = (axis_angle * axis_angle).sum(dim=-1)
    small = sq < TAYLOR_EPS * TAYLOR_EPS
    angle = torch.sqrt(torch.where(small, torch.ones_like(sq), sq))
    c1_exact = torch.sin(angle) / angle
    c2_exact = (1.0 - torch.cos(angle)) / sq.clamp_min(TAYLOR_EPS * TAYLOR_EPS)
    c1_series = 1.0 - sq / 6.0 + sq * sq / 120.0
    c2_series = 0.5 - sq / 24.0 + sq * sq / 720.0
    c1 = torch.where(small, c1_series, c1_exact)
    c2 = torch.where(small, c2_series, c2_exact)

    x, y, z = axis_angle.unbind(dim=-1)
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1)
    k = k.reshape(axis_angle.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    eye = eye.expand(k.shape)
    return eye + c1[..., None, None] * k + c2[..., None, None] * (k @ k)


def _bone_transforms(rot: torch.Tensor, rest_joints: torch.Tensor,
                     parents: torch.Tensor) -> torch.Tensor:
    """Rest-relative 4x4 transforms per bone, chained along the tree.

    Each local block is ``[R_j | j - R_j j]`` (rotate about the rest joint), so a
    zero pose yields exact 4x4 identities all the way down the chain.
    """
    batch = rot.shape[:-3]
    J = rot.shape[-3]
    t_local = rest_joints - (rot @ rest_joints[..., None]).squeeze(-1)
    bottom = torch.zeros(*batch, J, 1, 4, dtype=rot.dtype, device=rot.device)
    bottom[..., 0, 3] = 1.0
    local = torch.cat([torch.cat([rot, t_local[..., None]], dim=-1), bottom], dim=-2)
    chained = [local[..., 0, :, :]]
    plist = parents.tolist()
    for j in range(1, J):
        chained.append(chained[plist[j]] @ local[..., j, :, :])
    return torch.stack(chained, dim=-3)


def forward(params: BodyParams, template: BodyTemplate) -> MeshResult:
    """Pose the template: shape/expression offsets, LBS, then the rigid root move.

    Supports arbitrary shared leading batch dims on ``params``.  Differentiable in
    every parameter; at all-zero parameters it returns the template vertices and
    regressed rest joints without floating-point drift.
    """
    dtype = params.theta.dtype
    verts = template.vertices.to(dtype)
    if params.theta.shape[-2] != template.n_joints:
        raise ShapeError(
            f"theta has {params.theta.shape[-2]} joints, template {template.n_joints}")
    if params.beta.shape[-1] != template.n_shape:
        raise ShapeError(
            f"beta has {params.beta.shape[-1]} coeffs, template {template.n_shape}")
    if params.alpha.shape[-1] != template.n_expression:
        raise ShapeError(
            f"alpha has {params.alpha.shape[-1]} coeffs, template {template.n_expression}")

    rest = verts + torch.einsum("vcs,...s->...vc", template.shape_basis.to(dtype), params.beta) \
        + torch.einsum("vce,...e->...vc", template.expression_basis.to(dtype), params.alpha)
    rest_joints = torch.einsum("jv,...vc->...jc", template.joint_regressor.to(dtype), rest)

    rot = rodrigues(params.theta)
    transforms = _bone_transforms(rot, rest_joints, template.parents)
    rot_part = transforms[..., :3, :3]
    trans_part = transforms[..., :3, 3]

    # displacement-form LBS: v + sum_j w_vj (A_j(v) - v)
    per_bone = torch.einsum("...jab,...vb->...jva", rot_part, rest) \
        + trans_part[..., :, None, :]
    delta = per_bone - rest[..., None, :, :]
    posed = rest + torch.einsum("vj,...jvc->...vc", template.skin_weights.to(dtype), delta)
    posed_joints = torch.einsum("...jab,...jb->...ja", rot_part, rest_joints) + trans_part

    # rigid root motion about the rest root joint
    root_rot = rodrigues(params.root_rotation)
    pivot = rest_joints[..., 0:1, :]
    eye = torch.eye(3, dtype=dtype, device=root_rot.device).expand(root_rot.shape)
    rot_minus_i = root_rot - eye
    shift = params.root_translation[..., None, :]
    out_verts = posed + (posed - pivot) @ rot_minus_i.transpose(-1, -2) + shift
    out_joints = posed_joints + (posed_joints - pivot) @ rot_minus_i.transpose(-1, -2) + shift
    return MeshResult(vertices=out_verts, joints3d=out_joints)


def regress_joints(vertices: torch.Tensor, template: BodyTemplate) -> torch.Tensor:
    """Linear joint regression (J, V) @ (..., V, 3) for arbitrary posed vertices."""
    if vertices.shape[-2] != template.n_vertices:
        raise ShapeError(
            f"vertices have {vertices.shape[-2]} rows, template {template.n_vertices}")
    reg = template.joint_regressor.to(vertices.dtype)
    return torch.einsum("jv,...vc->...jc", reg, vertices)


# ---------------------------------------------------------------------------
# serialization


def save_template(template: BodyTemplate, path) -> None:
    rec = {
        "vertices": template.vertices.numpy().astype("<f8"),
        "shape_basis": template.shape_basis.numpy().astype("<f8"),
        "expression_basis": template.expression_basis.numpy().astype("<f8"),
        "skin_weights": template.skin_weights.numpy().astype("<f8"),
        "joint_regressor": template.joint_regressor.numpy().astype("<f8"),
        "parents": template.parents.numpy().astype("<i8"),
        "meta": template.meta,
    }
    write_container(path, MAGIC_TEMPLATE, [rec])


def load_template(path) -> BodyTemplate:
    records = read_container(path, MAGIC_TEMPLATE)
    if len(records) != 1:
        raise ShapeError(f"template file holds {len(records)} records, expected 1")
    rec = records[0]
    return BodyTemplate(
        vertices=torch.from_numpy(rec["vertices"]),
        shape_basis=torch.from_numpy(rec["shape_basis"]),
        expression_basis=torch.from_numpy(rec["expression_basis"]),
        skin_weights=torch.from_numpy(rec["skin_weights"]),
        joint_regressor=torch.from_numpy(rec["joint_regressor"]),
        parents=torch.from_numpy(rec["parents"]),
        meta=rec.get("meta", {}),
    )
