"""Synthetic multi-person scene sampler with controllable occlusions.

Scenes are "pseudo-images": each body is drawn as Gaussian splats at its projected
joints plus a filled convex hull of those joints, alpha-composited back-to-front
over a noisy gradient background.  Ground truth stores exact camera projections;
the noisy "2D estimator" view used for conditioning is derived deterministically
on demand (``estimator_view``) so stored GT stays projection-consistent.

Determinism contract: every sample owns an RNG stream seeded by its own integer
seed; ``generate_dataset`` derives per-sample seeds from (dataset_seed, index), so
chunked/parallel generation would produce the same bytes as a serial pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import body_model
from .body_model import BodyParams, BodyTemplate
from .config import SceneConfig
from .container import MAGIC_DATASET, read_container, write_container
from .errors import ConfigurationError, DomainError, ShapeError

OCCLUSION_KINDS = ("object_patch", "person_overlap", "truncation")


@dataclass
class CameraModel:
    """Pinhole camera: world -> camera rigid transform, then perspective projection."""

    focal_px: float
    principal: np.ndarray          # (2,) pixel coordinates of the optical axis
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ConfigurationError(f"focal length must be positive, got {self.focal_px}")
        self.principal = np.asarray(self.principal, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3):
            raise ShapeError(f"camera rotation must be 3x3, got {self.rotation.shape}")

    def to_camera(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def project(self, points) -> np.ndarray:
        """(..., 3) world points -> (..., 2) pixel coordinates."""
        cam = self.to_camera(points)
        z = cam[..., 2]
        if np.any(z <= 1e-6):
            z = np.where(z <= 1e-6, 1e-6, z)
        uv = self.focal_px * cam[..., :2] / z[..., None]
        return uv + self.principal

    def as_dict(self) -> dict:
        return {"focal_px": float(self.focal_px), "principal": self.principal.tolist(),
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "CameraModel":
        return CameraModel(d["focal_px"], np.array(d["principal"]),
                           np.array(d["rotation"]), np.array(d["translation"]))


def default_camera(config: SceneConfig) -> CameraModel:
    h, w = config.image_hw
    return CameraModel(config.focal_px, np.array([(w - 1) / 2.0, (h - 1) / 2.0]))


@dataclass
class InstanceGT:
    """Ground truth for one person in a scene."""

    params: BodyParams             # float32 torch tensors, unbatched
    joints3d: np.ndarray           # (J, 3) float32, world frame
    joints2d: np.ndarray           # (J, 2) float32, exact projections of joints3d
    joint_conf: np.ndarray         # (J,) float32 in [0, 1]
    vertices: np.ndarray           # (V, 3) float32
    visibility: np.ndarray         # (J,) bool


@dataclass
class SceneSample:
    image: np.ndarray              # (H, W, 3) float32 in [0, 1]
    instances: list[InstanceGT]
    occlusion_meta: dict
    camera: CameraModel
    seed: int


# ---------------------------------------------------------------------------
# parameter prior


def sample_instance_params(rng: np.random.Generator, config: SceneConfig) -> BodyParams:
    """Draw one body from the zero-mean pose prior (float64 torch tensors)."""
    b = config.body
    theta = rng.normal(0.0, config.pose_scale, (b.n_joints, 3))
    beta = rng.normal(0.0, config.shape_scale, b.n_shape)
    alpha = rng.normal(0.0, config.expression_scale, b.n_expression)
    root_rot = rng.normal(0.0, config.root_rot_scale, 3)
    tx = rng.uniform(*config.x_range)
    ty = rng.uniform(*config.y_range)
    tz = rng.uniform(*config.depth_range)
    return BodyParams(
        theta=torch.from_numpy(theta),
        beta=torch.from_numpy(beta),
        alpha=torch.from_numpy(alpha),
        root_rotation=torch.from_numpy(root_rot),
        root_translation=torch.tensor([tx, ty, tz], dtype=torch.float64),
    )


# ---------------------------------------------------------------------------
# rendering helpers


def _splat_map(joints2d: np.ndarray, hw: tuple[int, int], sigma: float) -> np.ndarray:
    h, w = hw
    ys = np.arange(h, dtype=np.float64)[:, None, None]
    xs = np.arange(w, dtype=np.float64)[None, :, None]
    dx = xs - joints2d[None, None, :, 0]
    dy = ys - joints2d[None, None, :, 1]
    g = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    return g.max(axis=2)


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, CCW, of (N, 2) points."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                a, b = out[-1] - out[-2], p - out[-2]
                if a[0] * b[1] - a[1] * b[0] > 0:
                    break
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.asarray(lower[:-1] + upper[:-1])


def _hull_mask(points: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Filled convex hull of 2D points rasterized on the pixel grid."""
    h, w = hw
    pts = np.clip(points, [-4 * w, -4 * h], [5 * w, 5 * h])
    hull = _convex_hull(pts)
    if len(hull) < 3:
        return np.zeros((h, w), dtype=bool)
    ys, xs = np.mgrid[0:h, 0:w]
    inside = np.ones((h, w), dtype=bool)
    n = len(hull)
    for i in range(n):
        a, b = hull[i], hull[(i + 1) % n]
        cross = (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0])
        inside &= cross >= 0
    return inside


def render_scene(instances: list[InstanceGT], camera: CameraModel,
                 config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Splat-plus-hull pseudo-image, instances composited far to near."""
    h, w = config.image_hw
    bg_tint = rng.uniform(0.0, 0.05, 3)
    grad = np.linspace(0.04, 0.10, h)[:, None, None]
    img = np.broadcast_to(grad, (h, w, 3)).copy() + bg_tint
    img += rng.normal(0.0, 0.01, (h, w, 3))

    colors = rng.uniform(0.35, 1.0, (len(instances), 3))
    depth = [inst.joints3d.mean(axis=0) @ camera.rotation.T[:, 2]
             + camera.translation[2] for inst in instances]
    for idx in np.argsort(depth)[::-1]:  # far first
        inst = instances[idx]
        splat = _splat_map(inst.joints2d.astype(np.float64), (h, w), config.splat_sigma_px)
        hull = _hull_mask(inst.joints2d.astype(np.float64), (h, w)).astype(np.float64)
        intensity = np.clip(0.45 * hull + 0.75 * splat, 0.0, 1.0)
        alpha = np.clip(0.8 * hull + 0.9 * splat, 0.0, 1.0)[..., None]
        img = img * (1.0 - alpha) + (colors[idx] * intensity[..., None]) * alpha
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# scene assembly


def _build_instance(params: BodyParams, template: BodyTemplate, camera: CameraModel,
                    hw: tuple[int, int], rng: np.random.Generator) -> InstanceGT:
    with torch.no_grad():
        mesh = body_model.forward(params, template)
    joints3d = mesh.joints3d.numpy().astype(np.float32)
    vertices = mesh.vertices.numpy().astype(np.float32)
    joints2d = camera.project(joints3d.astype(np.float64)).astype(np.float32)
    h, w = hw
    z = camera.to_camera(joints3d.astype(np.float64))[:, 2]
    visible = (joints2d[:, 0] >= 0) & (joints2d[:, 0] <= w - 1) \
        & (joints2d[:, 1] >= 0) & (joints2d[:, 1] <= h - 1) & (z > 0.05)
    conf = np.where(visible, 1.0, rng.uniform(0.0, 0.2, len(visible))).astype(np.float32)
    return InstanceGT(params=params.to(torch.float32), joints3d=joints3d,
                      joints2d=joints2d, joint_conf=conf, vertices=vertices,
                      visibility=visible)


def sample_scene(rng_seed, config: SceneConfig,
                 template: BodyTemplate | None = None) -> SceneSample:
    """Deterministically sample one scene (bodies, image, optional occlusion)."""
    if template is None:
        template = body_model.make_toy_template(config.body, config.template_seed)
    seed_int = int(rng_seed if np.isscalar(rng_seed) else rng_seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed_int + 2**32, 77]))
    camera = default_camera(config)
    k = int(rng.integers(config.k_range[0], config.k_range[1] + 1))

    params = [sample_instance_params(rng, config) for _ in range(k)]
    # keep people laterally separated in the base scene so overlap is opt-in
    if k > 1:
        xs = np.array([float(p.root_translation[0]) for p in params])
        order = np.argsort(xs)
        min_gap = 0.45
        for rank in range(1, k):
            i_prev, i_cur = order[rank - 1], order[rank]
            gap = xs[i_cur] - xs[i_prev]
            if gap < min_gap:
                xs[i_cur] = xs[i_prev] + min_gap
        for i in range(k):
            params[i].root_translation[0] = float(np.clip(
                xs[i], config.x_range[0] - 0.3, config.x_range[1] + 0.3))

    instances = [_build_instance(p, template, camera, config.image_hw, rng)
                 for p in params]
    image = render_scene(instances, camera, config, rng)
    sample = SceneSample(image=image, instances=instances,
                         occlusion_meta={"kind": "none"}, camera=camera,
                         seed=seed_int)
    if config.occlusion_prob > 0 and rng.uniform() < config.occlusion_prob:
        kind = config.occlusion_kinds[int(rng.integers(len(config.occlusion_kinds)))]
        sample = apply_occlusion(sample, kind, rng, config=config, template=template)
    return sample


def _mark_occluded(inst: InstanceGT, newly_occluded: np.ndarray,
                   rng: np.random.Generator) -> InstanceGT:
    if not newly_occluded.any():
        return inst
    vis = inst.visibility & ~newly_occluded
    conf = inst.joint_conf.copy()
    idx = np.nonzero(newly_occluded & inst.visibility)[0]
    conf[idx] = rng.uniform(0.0, 0.2, len(idx)).astype(np.float32)
    return replace(inst, visibility=vis, joint_conf=conf)


def apply_patches(sample: SceneSample, boxes: np.ndarray,
                  rng: np.random.Generator) -> SceneSample:
    """Draw opaque rectangles (x0, y0, x1, y1 float px) and occlude covered joints."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    h, w = sample.image.shape[:2]
    img = sample.image.copy()
    for box in boxes:
        color = rng.uniform(0.1, 0.9, 3).astype(np.float32)
        x0, y0, x1, y1 = box
        xi0, yi0 = max(int(np.floor(x0)), 0), max(int(np.floor(y0)), 0)
        xi1, yi1 = min(int(np.ceil(x1)), w), min(int(np.ceil(y1)), h)
        if xi1 > xi0 and yi1 > yi0:
            img[yi0:yi1, xi0:xi1] = color
    new_instances = []
    for inst in sample.instances:
        j = inst.joints2d
        covered = np.zeros(len(j), dtype=bool)
        for x0, y0, x1, y1 in boxes:
            covered |= (j[:, 0] >= x0) & (j[:, 0] <= x1) & (j[:, 1] >= y0) & (j[:, 1] <= y1)
        new_instances.append(_mark_occluded(inst, covered, rng))
    meta = {"kind": "object_patch", "boxes": boxes.tolist()}
    return replace(sample, image=img, instances=new_instances, occlusion_meta=meta)


def _bbox(joints2d: np.ndarray) -> np.ndarray:
    return np.array([joints2d[:, 0].min(), joints2d[:, 1].min(),
                     joints2d[:, 0].max(), joints2d[:, 1].max()])


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(ix1 - ix0, 0.0), max(iy1 - iy0, 0.0)
    inter = iw * ih
    area = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / area) if area > 0 else 0.0


def apply_occlusion(sample: SceneSample, kind: str, rng: np.random.Generator, *,
                    config: SceneConfig, template: BodyTemplate | None = None) -> SceneSample:
    """Apply one occlusion pattern; returns a new sample, inputs untouched."""
    if kind not in OCCLUSION_KINDS:
        raise DomainError(f"unknown occlusion kind {kind!r}; have {OCCLUSION_KINDS}")
    h, w = sample.image.shape[:2]

    if kind == "object_patch":
        n = int(rng.integers(1, 4))
        boxes = []
        for _ in range(n):
            target = sample.instances[int(rng.integers(len(sample.instances)))]
            bb = _bbox(target.joints2d)
            cx = rng.uniform(bb[0], bb[2])
            cy = rng.uniform(bb[1], bb[3])
            bw = rng.uniform(0.12, 0.38) * w
            bh = rng.uniform(0.12, 0.38) * h
            boxes.append([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2])
        return apply_patches(sample, np.asarray(boxes), rng)

    if kind == "person_overlap":
        if len(sample.instances) < 2:
            meta = dict(sample.occlusion_meta)
            meta.update({"kind": "person_overlap", "applied": False,
                         "reason": "single-instance scene"})
            return replace(sample, occlusion_meta=meta)
        if template is None:
            template = body_model.make_toy_template(config.body, config.template_seed)
        # drag instance 1 toward instance 0 until the projected boxes overlap enough
        params = [inst.params.to(torch.float64) for inst in sample.instances]
        target = params[0].root_translation.clone()
        mover = params[1].root_translation.clone()
        if abs(float(target[2] - mover[2])) < 0.35:
            mover[2] = target[2] + 0.45
        frac = 1.0
        for step in range(24):
            trial = mover.clone()
            trial[:2] = mover[:2] + (target[:2] - mover[:2]) * frac
            params[1].root_translation = trial
            inst1 = _build_instance(params[1], template, sample.camera,
                                    (h, w), rng)
            if _iou(_bbox(sample.instances[0].joints2d), _bbox(inst1.joints2d)) \
                    >= config.overlap_iou:
                break
            frac = min(1.0, frac + 0.1)  # already at full drag: keep pulling in z
            mover[2] = mover[2] - 0.05 if float(mover[2]) > 1.5 else mover[2]
        new_instances = [sample.instances[0], inst1] + list(sample.instances[2:])
        image = render_scene(new_instances, sample.camera, config, rng)
        # far-instance joints inside the near instance's hull become occluded
        z = [sample.camera.to_camera(i.joints3d.astype(np.float64))[:, 2].mean()
             for i in new_instances[:2]]
        near, far = (0, 1) if z[0] <= z[1] else (1, 0)
        hull = _hull_mask(new_instances[near].joints2d.astype(np.float64), (h, w))
        fj = new_instances[far].joints2d
        cols = np.clip(np.round(fj[:, 0]).astype(int), 0, w - 1)
        rows = np.clip(np.round(fj[:, 1]).astype(int), 0, h - 1)
        covered = hull[rows, cols]
        new_instances[far] = _mark_occluded(new_instances[far], covered, rng)
        meta = {"kind": "person_overlap", "applied": True,
                "iou": _iou(_bbox(new_instances[0].joints2d), _bbox(new_instances[1].joints2d))}
        return replace(sample, image=image, instances=new_instances, occlusion_meta=meta)

    # truncation: crop the frame to a sub-window, joints outside it are lost
    kw = rng.uniform(0.45, 0.75)
    kh = rng.uniform(0.45, 0.75)
    cw, ch = int(kw * w), int(kh * h)
    x0 = int(rng.integers(0, w - cw + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    img = np.zeros_like(sample.image)
    img[y0:y0 + ch, x0:x0 + cw] = sample.image[y0:y0 + ch, x0:x0 + cw]
    new_instances = []
    for inst in sample.instances:
        j = inst.joints2d
        outside = ~((j[:, 0] >= x0) & (j[:, 0] <= x0 + cw - 1)
                    & (j[:, 1] >= y0) & (j[:, 1] <= y0 + ch - 1))
        new_instances.append(_mark_occluded(inst, outside, rng))
    meta = {"kind": "truncation", "window": [x0, y0, x0 + cw, y0 + ch]}
    return replace(sample, image=img, instances=new_instances, occlusion_meta=meta)


# ---------------------------------------------------------------------------
# derived noisy estimator view + flip augmentation


def estimator_view(sample: SceneSample, sigma_px: float, noise_seed: int):
    """Per-instance (noisy joints2d, conf) pairs standing in for a 2D pose estimator.

    Deterministic in (sample.seed, noise_seed).  Coordinates of occluded joints are
    still produced (with their stored low confidence), mirroring how detectors emit
    low-confidence guesses under occlusion.
    """
    rng = np.random.default_rng(np.random.SeedSequence([sample.seed + 2**32,
                                                        noise_seed + 2**33]))
    out = []
    for inst in sample.instances:
        noisy = inst.joints2d + rng.normal(0.0, sigma_px, inst.joints2d.shape)
        out.append((noisy.astype(np.float32), inst.joint_conf.copy()))
    return out


def flip_sample(sample: SceneSample, template: BodyTemplate) -> SceneSample:
    """Horizontal mirror of a scene (image, 2D/3D ground truth, mirrored params).

    Requires the default centered camera with identity extrinsics; the parameter
    mirror swaps left/right joints and flips axis-angle y/z components.
    """
    cam = sample.camera
    if not np.allclose(cam.rotation, np.eye(3)) or not np.allclose(cam.translation, 0):
        raise DomainError("flip_sample requires identity camera extrinsics")
    h, w = sample.image.shape[:2]
    if abs(cam.principal[0] - (w - 1) / 2) > 1e-6:
        raise DomainError("flip_sample requires a centered principal point")
    perm, _ = body_model.mirror_maps(template.n_joints)
    sign = np.array([1.0, -1.0, -1.0], dtype=np.float32)
    flipped = []
    for inst in sample.instances:
        theta = inst.params.theta.numpy()[perm] * sign
        root_rot = inst.params.root_rotation.numpy() * sign
        root_t = inst.params.root_translation.numpy() * np.array([-1, 1, 1], dtype=np.float32)
        params = BodyParams(
            theta=torch.from_numpy(theta.copy()),
            beta=inst.params.beta.clone(),
            alpha=inst.params.alpha.clone(),
            root_rotation=torch.from_numpy(root_rot.copy()),
            root_translation=torch.from_numpy(root_t.copy()),
        )
        j3 = inst.joints3d[perm] * np.array([-1, 1, 1], dtype=np.float32)
        v3 = inst.vertices * np.array([-1, 1, 1], dtype=np.float32)
        j2 = cam.project(j3.astype(np.float64)).astype(np.float32)
        flipped.append(InstanceGT(params=params, joints3d=j3, joints2d=j2,
                                  joint_conf=inst.joint_conf[perm].copy(),
                                  vertices=v3, visibility=inst.visibility[perm].copy()))
    meta = dict(sample.occlusion_meta)
    meta["flipped"] = True
    return replace(sample, image=np.ascontiguousarray(sample.image[:, ::-1]),
                   instances=flipped, occlusion_meta=meta)


# ---------------------------------------------------------------------------
# dataset files


def generate_dataset(seed: int, n_samples: int, config: SceneConfig,
                     template: BodyTemplate | None = None) -> list[SceneSample]:
    if template is None:
        template = body_model.make_toy_template(config.body, config.template_seed)
    seq = np.random.SeedSequence(seed)
    # one integer sub-seed per sample index; spawning is order-independent
    child_seeds = [int(s.generate_state(1)[0]) for s in seq.spawn(n_samples)]
    return [sample_scene(child_seeds[i], config, template) for i in range(n_samples)]


def write_dataset(samples: list[SceneSample], path, config_echo: dict | None = None) -> None:
    header = {"meta": {"n_samples": len(samples), "config": config_echo or {}}}
    records = [header]
    for s in samples:
        rec = {
            "image": s.image.astype("<f4"),
            "meta": {"occlusion": s.occlusion_meta, "seed": s.seed,
                     "camera": s.camera.as_dict(), "n_instances": len(s.instances)},
        }
        for i, inst in enumerate(s.instances):
            p = f"i{i}."
            rec[p + "theta"] = inst.params.theta.numpy().astype("<f4")
            rec[p + "beta"] = inst.params.beta.numpy().astype("<f4")
            rec[p + "alpha"] = inst.params.alpha.numpy().astype("<f4")
            rec[p + "root_rotation"] = inst.params.root_rotation.numpy().astype("<f4")
            rec[p + "root_translation"] = inst.params.root_translation.numpy().astype("<f4")
            rec[p + "joints3d"] = inst.joints3d.astype("<f4")
            rec[p + "joints2d"] = inst.joints2d.astype("<f4")
            rec[p + "joint_conf"] = inst.joint_conf.astype("<f4")
            rec[p + "vertices"] = inst.vertices.astype("<f4")
            rec[p + "visibility"] = inst.visibility.astype(bool)
        records.append(rec)
    write_container(path, MAGIC_DATASET, records)


def read_dataset(path) -> list[SceneSample]:
    records = read_container(path, MAGIC_DATASET)
    if not records:
        raise ShapeError(f"dataset {path} has no header record")
    samples = []
    for rec in records[1:]:
        meta = rec["meta"]
        instances = []
        for i in range(meta["n_instances"]):
            p = f"i{i}."
            params = BodyParams(
                theta=torch.from_numpy(rec[p + "theta"]),
                beta=torch.from_numpy(rec[p + "beta"]),
                alpha=torch.from_numpy(rec[p + "alpha"]),
                root_rotation=torch.from_numpy(rec[p + "root_rotation"]),
                root_translation=torch.from_numpy(rec[p + "root_translation"]),
            )
            instances.append(InstanceGT(
                params=params,
                joints3d=rec[p + "joints3d"], joints2d=rec[p + "joints2d"],
                joint_conf=rec[p + "joint_conf"], vertices=rec[p + "vertices"],
                visibility=rec[p + "visibility"],
            ))
        samples.append(SceneSample(
            image=rec["image"], instances=instances,
            occlusion_meta=meta["occlusion"],
            camera=CameraModel.from_dict(meta["camera"]), seed=meta["seed"],
        ))
    return samples


def dataset_info(path) -> dict:
    records = read_container(path, MAGIC_DATASET)
    if not records:
        raise ShapeError(f"dataset {path} has no header record")
    return records[0]["meta"]
