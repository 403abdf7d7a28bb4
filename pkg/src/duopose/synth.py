"""Synthetic two-person interaction corpus.

Stands in for captured interaction data and for the image-based initial
predictor: generates smooth, penetration-free ground-truth pairs from
parameterized templates, then corrupts them into the kind of noisy initial
estimate a monocular regressor would produce, with synthetic 2D keypoints,
inter-person occlusion, and a rule-based per-parameter variance.

All randomness flows through one numpy Generator per call, so a (template,
seed) pair fully determines the output bits.
"""

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import arrayio, body as body_mod, collision
from .body import NUM_JOINTS, NUM_SHAPE, BodyTemplate
from .camera import PinholeCamera, bbox_from_points, project
from .errors import GenerationError
from .motion import FRAME_DIM, POSE_BLOCK, PairMotion, PersonMotion, pack_person
from .rotation import matrix_to_rot6d

TEMPLATE_NAMES = ["approach", "reach", "circle", "push", "embrace-like"]


@dataclass
class InteractionTemplate:
    name: str
    speed_range: tuple[float, float]          # m/frame along the main path
    closest_range: tuple[float, float]        # closest root-to-root distance (m)
    phase_range: tuple[float, float]          # timing offset between the two people
    accel_bound: float                        # max joint acceleration (m/frame^2)


TEMPLATES: dict[str, InteractionTemplate] = {
    "approach": InteractionTemplate("approach", (0.05, 0.10), (0.55, 0.85), (0.0, 0.2), 0.065),
    "reach": InteractionTemplate("reach", (0.0, 0.01), (0.70, 1.00), (0.0, 0.3), 0.065),
    "circle": InteractionTemplate("circle", (0.04, 0.08), (1.00, 1.60), (0.0, 0.1), 0.060),
    "push": InteractionTemplate("push", (0.03, 0.06), (0.70, 0.95), (0.1, 0.3), 0.080),
    "embrace-like": InteractionTemplate("embrace-like", (0.02, 0.05), (0.60, 0.75), (0.0, 0.15), 0.070),
}


@dataclass
class NoiseConfig:
    pixel_noise: float = 2.0
    depth_noise: float = 0.2
    lateral_noise: float = 0.02
    pose_noise: float = 0.07
    shape_noise: float = 0.2
    occluded_pose_boost: float = 3.0
    conf_floor: float = 0.3
    sigma_floor: float = 1e-4

    def to_dict(self) -> dict:
        return self.__dict__.copy()

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        return cls(**d)


@dataclass
class ObservationRecord:
    keypoints: torch.Tensor   # 2 X N X K X 2 pixels
    confidence: torch.Tensor  # 2 X N X K in [0, 1]
    bbox: torch.Tensor        # 2 X N X 4 pixels
    camera: PinholeCamera
    initial: PairMotion
    sigma_a: torch.Tensor     # N X FRAME_DIM per-parameter variance
    sigma_b: torch.Tensor
    meta: dict = field(default_factory=dict)


def _rodrigues(rotvec: np.ndarray) -> np.ndarray:
    """Axis-angle vectors ... X 3 to rotation matrices ... X 3 X 3."""
    theta = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    small = theta < 1e-12
    axis = np.where(small, 0.0, rotvec / np.where(small, 1.0, theta))
    theta = theta[..., 0]
    k = np.zeros(rotvec.shape[:-1] + (3, 3))
    k[..., 0, 1] = -axis[..., 2]
    k[..., 0, 2] = axis[..., 1]
    k[..., 1, 0] = axis[..., 2]
    k[..., 1, 2] = -axis[..., 0]
    k[..., 2, 0] = -axis[..., 1]
    k[..., 2, 1] = axis[..., 0]
    eye = np.broadcast_to(np.eye(3), k.shape)
    s = np.sin(theta)[..., None, None]
    c = np.cos(theta)[..., None, None]
    return eye + s * k + (1.0 - c) * (k @ k)


def _smooth_noise(rng: np.random.Generator, frames: int, amp: float) -> np.ndarray:
    """Low-frequency wiggle: a couple of random-phase cosines, amplitude amp."""
    t = np.arange(frames) / max(frames - 1, 1)
    out = np.zeros(frames)
    for freq in (1.0, 2.0):
        out += rng.uniform(-amp, amp) * np.cos(2.0 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return out / 2.0


def _ease(u: np.ndarray) -> np.ndarray:
    """Raised-cosine ramp from 0 to 1 with zero end velocities."""
    return 0.5 * (1.0 - np.cos(np.pi * np.clip(u, 0.0, 1.0)))


def _stance_rotvecs(rng: np.random.Generator, frames: int) -> dict[int, np.ndarray]:
    """Neutral standing pose: arms lowered from the T-pose, soft wiggle."""
    rv = {j: np.zeros((frames, 3)) for j in range(NUM_JOINTS)}
    rv[16][:, 2] = 1.15   # left arm down
    rv[17][:, 2] = -1.15  # right arm down
    rv[18][:, 2] = 0.20
    rv[19][:, 2] = -0.20
    for j in (3, 6, 12, 15, 16, 17, 18, 19):
        for axis in range(3):
            rv[j][:, axis] += _smooth_noise(rng, frames, 0.05)
    for j in (1, 2, 4, 5):
        rv[j][:, 0] += _smooth_noise(rng, frames, 0.04)
    return rv


def _reach_arm(rv: dict[int, np.ndarray], side: str, ramp: np.ndarray, wrap: float = 0.0) -> None:
    """Blend one arm from the stance toward pointing forward (+z when the
    body faces +z). ramp in [0, 1] per frame; wrap adds an inward elbow bend."""
    sh, el = (16, 18) if side == "left" else (17, 19)
    sign = 1.0 if side == "left" else -1.0
    rv[sh][:, 2] = (1.0 - ramp) * sign * 1.15 + ramp * sign * 0.15
    rv[sh][:, 1] = ramp * sign * -1.35
    rv[el][:, 1] = ramp * sign * -wrap
    rv[el][:, 2] = (1.0 - ramp) * sign * 0.20


def _heading_rotvec(direction: np.ndarray) -> np.ndarray:
    """Yaw rotation vector that points the body's facing axis along
    direction's ground-plane component."""
    yaw = math.atan2(direction[0], direction[2])
    return np.array([0.0, yaw, 0.0])


def _root_tracks(
    template: InteractionTemplate, rng: np.random.Generator, frames: int
) -> tuple[np.ndarray, np.ndarray]:
    """Root positions for both people, each frames X 3, camera frame."""
    t = np.arange(frames) / max(frames - 1, 1)
    center = np.array([rng.uniform(-0.3, 0.3), 0.0, rng.uniform(2.7, 3.3)])
    heading = rng.uniform(0.0, 2.0 * np.pi)
    u = np.array([math.sin(heading), 0.0, math.cos(heading)])
    closest = rng.uniform(*template.closest_range)
    speed = rng.uniform(*template.speed_range)
    phase = rng.uniform(*template.phase_range)

    name = template.name
    if name == "approach":
        start = closest + speed * (frames - 1)
        gap = start - (start - closest) * _ease(t)
        pa = center - u * gap[:, None] / 2.0
        pb = center + u * gap[:, None] / 2.0
    elif name == "reach":
        gap = np.full(frames, closest)
        pa = center - u * gap[:, None] / 2.0
        pb = center + u * gap[:, None] / 2.0
    elif name == "circle":
        radius = closest / 2.0
        arc = speed / radius * (frames - 1)
        theta = heading + _ease(t) * arc
        offs = np.stack([np.sin(theta), np.zeros(frames), np.cos(theta)], axis=1) * radius
        pa = center - offs
        pb = center + offs
    elif name == "push":
        start = closest + speed * (frames - 1)
        gap = start - (start - closest) * _ease(np.clip(t / 0.6, 0, 1))
        # The pushed person gives way late in the clip.
        give = 0.3 * closest * _ease(np.clip((t - 0.5 - phase * 0.3) / 0.4, 0, 1))
        pa = center - u * gap[:, None] / 2.0
        pb = center + u * (gap / 2.0 + give)[:, None]
    else:  # embrace-like
        start = closest + max(speed, 0.02) * (frames - 1)
        gap = start - (start - closest) * _ease(np.clip(t / (0.7 + phase), 0, 1))
        pa = center - u * gap[:, None] / 2.0
        pb = center + u * gap[:, None] / 2.0

    for p in (pa, pb):
        p[:, 1] += _smooth_noise(rng, frames, 0.012)
        p[:, 0] += _smooth_noise(rng, frames, 0.015)
        p[:, 2] += _smooth_noise(rng, frames, 0.015)
    return pa, pb


def _build_person(
    template: InteractionTemplate,
    rng: np.random.Generator,
    frames: int,
    root: np.ndarray,
    other_root: np.ndarray,
    actor: bool,
) -> PersonMotion:
    """Assemble one person: heading toward the counterpart, template arms."""
    t = np.arange(frames) / max(frames - 1, 1)
    rv = _stance_rotvecs(rng, frames)

    name = template.name
    if name == "reach" and actor:
        side = "left" if rng.random() < 0.5 else "right"
        ramp = _ease((t - 0.1) / 0.7)
        _reach_arm(rv, side, ramp)
    elif name == "push" and actor:
        ramp = _ease((t - 0.2) / 0.65)
        _reach_arm(rv, "left", ramp)
        _reach_arm(rv, "right", ramp)
    elif name == "embrace-like":
        # Arms rise only partway so the hands stop short of the counterpart.
        ramp = 0.5 * _ease((t - 0.3) / 0.55)
        _reach_arm(rv, "left", ramp, wrap=0.9)
        _reach_arm(rv, "right", ramp, wrap=0.9)
    if name == "push" and not actor:
        lean = _ease(np.clip((t - 0.55) / 0.35, 0, 1)) * 0.25
        rv[3][:, 0] -= lean  # lean away at the spine

    pose = np.zeros((frames, NUM_JOINTS, 3, 3))
    mean_dir = (other_root - root).mean(axis=0)
    base_yaw = _heading_rotvec(mean_dir)
    for f in range(frames):
        toward = other_root[f] - root[f]
        rv0 = _heading_rotvec(toward) if name == "circle" else base_yaw
        pose[f, 0] = _rodrigues(rv0)
        for j in range(1, NUM_JOINTS):
            pose[f, j] = _rodrigues(rv[j][f])

    pose6d = matrix_to_rot6d(torch.tensor(pose, dtype=torch.float32))
    shape = torch.tensor(
        np.clip(rng.normal(0.0, 0.4, NUM_SHAPE), -1.0, 1.0), dtype=torch.float32
    )
    trans = torch.tensor(root, dtype=torch.float32)
    return PersonMotion(pose6d, shape, trans)


def pair_meshes(
    pair: PairMotion, template_body: BodyTemplate
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Skinned vertices for both people: (verts_a N X V X 3, verts_b, faces)."""
    va = body_mod.vertices_from_params(
        template_body, pair.person_a.pose6d, pair.person_a.shape, pair.person_a.translation
    )
    vb = body_mod.vertices_from_params(
        template_body, pair.person_b.pose6d, pair.person_b.shape, pair.person_b.translation
    )
    return va.numpy().astype(np.float64), vb.numpy().astype(np.float64), template_body.faces.numpy()


def pair_is_penetration_free(pair: PairMotion, template_body: BodyTemplate) -> bool:
    va, vb, faces = pair_meshes(pair, template_body)
    mesh_a = collision.TriangleMesh(va[0], faces)
    mesh_b = collision.TriangleMesh(vb[0], faces)
    bvh_a = collision.build_bvh(mesh_a)
    bvh_b = collision.build_bvh(mesh_b)
    for f in range(pair.num_frames):
        mesh_a.vertices = va[f]
        mesh_b.vertices = vb[f]
        bvh_a.refit(va[f])
        bvh_b.refit(vb[f])
        if collision.colliding_triangles(mesh_a, mesh_b, bvh_a, bvh_b):
            return False
        # Guard against one body swallowing the other without surface crossings.
        if collision.points_inside(va[f][:1], mesh_b)[0] or collision.points_inside(vb[f][:1], mesh_a)[0]:
            return False
    return True


def generate_pair_motion(
    template: InteractionTemplate | str,
    seed: int,
    frames: int = 16,
    template_body: BodyTemplate | None = None,
    max_tries: int = 100,
) -> PairMotion:
    """Deterministic, penetration-free ground-truth pair.

    Re-rolls the template parameters (up to max_tries) whenever the sampled
    motion interpenetrates, so all emitted pairs audit clean.
    """
    if isinstance(template, str):
        if template not in TEMPLATES:
            raise GenerationError(f"unknown template {template!r}")
        template = TEMPLATES[template]
    if template_body is None:
        template_body = body_mod.build_default_template()

    for attempt in range(max_tries):
        rng = np.random.default_rng((seed, attempt))
        root_a, root_b = _root_tracks(template, rng, frames)
        person_a = _build_person(template, rng, frames, root_a, root_b, actor=True)
        person_b = _build_person(template, rng, frames, root_b, root_a, actor=False)
        pair = PairMotion(
            person_a,
            person_b,
            meta={"template": template.name, "seed": seed, "frames": frames, "attempt": attempt},
        )
        if pair_is_penetration_free(pair, template_body):
            return pair
    raise GenerationError(
        f"template {template.name!r} seed {seed}: no penetration-free sample in {max_tries} tries"
    )


def _occlusion_mask(
    joints: np.ndarray, counterpart_verts: np.ndarray, faces: np.ndarray
) -> np.ndarray:
    """True where the camera ray to a joint passes through the counterpart.

    joints: K X 3 camera-frame positions; rays run from the origin to each
    joint and count as blocked when they hit a counterpart triangle strictly
    before the joint.
    """
    tri = counterpart_verts[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    d = joints  # direction from origin
    pvec = np.cross(d[:, None, :], e2[None])
    det = np.einsum("kfi,fi->kf", pvec, e1)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = -tri[None, :, 0, :]
    u = np.einsum("kfi,kfi->kf", tvec, pvec) * inv
    qvec = np.cross(tvec, e1[None])
    v = np.einsum("kfi,ki->kf", qvec, d) * inv
    t_hit = np.einsum("kfi,fi->kf", qvec, e2) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t_hit > 1e-6) & (t_hit < 1.0 - 1e-6)
    return hit.any(axis=1)


def corrupt_observation(
    gt: PairMotion,
    camera: PinholeCamera,
    noise_cfg: NoiseConfig,
    seed: int,
    template_body: BodyTemplate | None = None,
) -> ObservationRecord:
    """Synthesize what an image-based predictor would hand the adaptor.

    Projects ground-truth joints with pixel noise and occlusion-driven
    dropouts, corrupts the parameters with depth-dominant translation noise
    and occlusion-amplified pose noise, and emits the matching rule-based
    per-parameter variance.
    """
    if template_body is None:
        template_body = body_mod.build_default_template()
    rng = np.random.default_rng((seed, 977))
    frames = gt.num_frames

    joints = [
        body_mod.joints_from_params(template_body, p.pose6d, p.shape, p.translation).numpy()
        for p in (gt.person_a, gt.person_b)
    ]
    verts_a, verts_b, faces = pair_meshes(gt, template_body)
    counterpart = [verts_b, verts_a]

    keypoints = np.zeros((2, frames, NUM_JOINTS, 2))
    confidence = np.zeros((2, frames, NUM_JOINTS))
    occluded = np.zeros((2, frames, NUM_JOINTS), dtype=bool)
    for which in range(2):
        for f in range(frames):
            occluded[which, f] = _occlusion_mask(
                joints[which][f], counterpart[which][f], faces
            )
        pix = project(camera, torch.tensor(joints[which], dtype=torch.float32)).numpy()
        pix = pix + rng.normal(0.0, noise_cfg.pixel_noise, pix.shape)
        keypoints[which] = pix
        vis = ~occluded[which]
        conf = np.where(
            vis, 1.0 - rng.uniform(0.0, 1.0 - noise_cfg.conf_floor, vis.shape), 0.0
        )
        confidence[which] = conf
        keypoints[which][~vis] = 0.0

    bbox = np.zeros((2, frames, 4))
    full = np.array([0.0, 0.0, float(camera.width), float(camera.height)])
    for which in range(2):
        last = full
        for f in range(frames):
            vis = confidence[which, f] > 0
            if vis.any():
                pts = torch.tensor(keypoints[which, f][vis], dtype=torch.float32)
                last = bbox_from_points(pts, camera).numpy()
            bbox[which, f] = last

    # Parameter corruption: depth-heavy translation, occlusion-boosted pose.
    initial_people = []
    sigmas = []
    for which, person in enumerate((gt.person_a, gt.person_b)):
        occ_rate = occluded[which].mean(axis=0)  # K
        boost = np.where(occ_rate >= 0.5, noise_cfg.occluded_pose_boost, 1.0)
        pose_std = noise_cfg.pose_noise * boost  # K
        pose_noise = rng.normal(0.0, 1.0, (frames, NUM_JOINTS, 6)) * pose_std[None, :, None]
        trans_std = np.array(
            [noise_cfg.lateral_noise, noise_cfg.lateral_noise, noise_cfg.depth_noise]
        )
        trans_noise = rng.normal(0.0, 1.0, (frames, 3)) * trans_std
        shape_noise = rng.normal(0.0, noise_cfg.shape_noise, NUM_SHAPE)

        init = PersonMotion(
            pose6d=person.pose6d + torch.tensor(pose_noise, dtype=torch.float32),
            shape=person.shape + torch.tensor(shape_noise, dtype=torch.float32),
            translation=person.translation + torch.tensor(trans_noise, dtype=torch.float32),
        )
        initial_people.append(init)

        sigma = np.empty(FRAME_DIM)
        sigma[:POSE_BLOCK] = np.repeat(pose_std**2, 6)
        sigma[POSE_BLOCK : POSE_BLOCK + NUM_SHAPE] = noise_cfg.shape_noise**2
        sigma[POSE_BLOCK + NUM_SHAPE :] = trans_std**2
        sigma = np.maximum(sigma, noise_cfg.sigma_floor)
        sigmas.append(
            torch.tensor(np.tile(sigma, (frames, 1)), dtype=torch.float32)
        )

    return ObservationRecord(
        keypoints=torch.tensor(keypoints, dtype=torch.float32),
        confidence=torch.tensor(confidence, dtype=torch.float32),
        bbox=torch.tensor(bbox, dtype=torch.float32),
        camera=camera,
        initial=PairMotion(initial_people[0], initial_people[1], dict(gt.meta)),
        sigma_a=sigmas[0],
        sigma_b=sigmas[1],
        meta={"seed": seed, "noise": noise_cfg.to_dict()},
    )


# ---------------------------------------------------------------------------
# On-disk corpus layout: one directory per sequence.

SCENE_FILE = "scene.json"
GT_FILE = "ground_truth.duo"
OBS_FILE = "observation.duo"
MANIFEST_FILE = "manifest.json"


def _person_arrays(prefix: str, person: PersonMotion) -> dict[str, np.ndarray]:
    return {
        f"{prefix}_pose6d": person.pose6d.numpy(),
        f"{prefix}_shape": person.shape.numpy(),
        f"{prefix}_translation": person.translation.numpy(),
    }


def _person_from_arrays(prefix: str, arrays: dict) -> PersonMotion:
    return PersonMotion(
        pose6d=torch.from_numpy(arrays[f"{prefix}_pose6d"]),
        shape=torch.from_numpy(arrays[f"{prefix}_shape"]),
        translation=torch.from_numpy(arrays[f"{prefix}_translation"]),
    )


def save_sequence(
    seq_dir: str,
    gt: PairMotion,
    record: ObservationRecord,
) -> None:
    os.makedirs(seq_dir, exist_ok=True)
    scene = {
        "camera": record.camera.to_dict(),
        "template": gt.meta.get("template"),
        "seed": gt.meta.get("seed"),
        "frames": gt.num_frames,
    }
    with open(os.path.join(seq_dir, SCENE_FILE), "w") as f:
        json.dump(scene, f, indent=1, sort_keys=True)

    gt_arrays = {**_person_arrays("a", gt.person_a), **_person_arrays("b", gt.person_b)}
    arrayio.save_arrays(os.path.join(seq_dir, GT_FILE), gt_arrays, meta={"kind": "pair-gt"})

    obs_arrays = {
        "keypoints": record.keypoints.numpy(),
        "confidence": record.confidence.numpy(),
        "bbox": record.bbox.numpy(),
        "sigma_a": record.sigma_a.numpy(),
        "sigma_b": record.sigma_b.numpy(),
        **_person_arrays("init_a", record.initial.person_a),
        **_person_arrays("init_b", record.initial.person_b),
    }
    arrayio.save_arrays(
        os.path.join(seq_dir, OBS_FILE),
        obs_arrays,
        meta={"kind": "observation", "noise": record.meta.get("noise", {})},
    )


def load_ground_truth(seq_dir: str) -> PairMotion:
    with open(os.path.join(seq_dir, SCENE_FILE)) as f:
        scene = json.load(f)
    arrays, meta = arrayio.load_arrays(os.path.join(seq_dir, GT_FILE))
    if meta.get("kind") != "pair-gt":
        raise ValueError(f"{seq_dir}: bad ground truth file")
    return PairMotion(
        _person_from_arrays("a", arrays),
        _person_from_arrays("b", arrays),
        meta={"template": scene.get("template"), "seed": scene.get("seed")},
    )


def load_observation(seq_dir: str) -> ObservationRecord:
    with open(os.path.join(seq_dir, SCENE_FILE)) as f:
        scene = json.load(f)
    arrays, meta = arrayio.load_arrays(os.path.join(seq_dir, OBS_FILE))
    if meta.get("kind") != "observation":
        raise ValueError(f"{seq_dir}: bad observation file")
    initial = PairMotion(
        _person_from_arrays("init_a", arrays),
        _person_from_arrays("init_b", arrays),
        meta={"template": scene.get("template"), "seed": scene.get("seed")},
    )
    return ObservationRecord(
        keypoints=torch.from_numpy(arrays["keypoints"]),
        confidence=torch.from_numpy(arrays["confidence"]),
        bbox=torch.from_numpy(arrays["bbox"]),
        camera=PinholeCamera.from_dict(scene["camera"]),
        initial=initial,
        sigma_a=torch.from_numpy(arrays["sigma_a"]),
        sigma_b=torch.from_numpy(arrays["sigma_b"]),
        meta={"seed": scene.get("seed"), "noise": meta.get("noise", {})},
    )


def generate_corpus(
    out_dir: str,
    count: int,
    seed_base: int = 0,
    frames: int = 16,
    templates: list[str] | None = None,
    camera: PinholeCamera | None = None,
    noise_cfg: NoiseConfig | None = None,
    test_fraction: float = 0.1,
    template_body: BodyTemplate | None = None,
) -> dict:
    """Generate count sequences cycling through the templates.

    Writes one directory per sequence plus a manifest carrying the split
    assignment (every tenth sequence lands in test by default).
    Returns the manifest dict.
    """
    templates = templates or TEMPLATE_NAMES
    camera = camera or PinholeCamera()
    noise_cfg = noise_cfg or NoiseConfig()
    if template_body is None:
        template_body = body_mod.build_default_template()
    os.makedirs(out_dir, exist_ok=True)

    period = max(int(round(1.0 / test_fraction)), 1) if test_fraction > 0 else 0
    entries = []
    for i in range(count):
        name = templates[i % len(templates)]
        seed = seed_base + i
        gt = generate_pair_motion(name, seed, frames, template_body)
        record = corrupt_observation(gt, camera, noise_cfg, seed, template_body)
        seq_name = f"seq_{i:05d}_{name}"
        save_sequence(os.path.join(out_dir, seq_name), gt, record)
        split = "test" if (period and i % period == period - 1) else "train"
        entries.append({"name": seq_name, "template": name, "seed": seed, "split": split})

    manifest = {
        "count": count,
        "frames": frames,
        "seed_base": seed_base,
        "noise": noise_cfg.to_dict(),
        "sequences": entries,
    }
    with open(os.path.join(out_dir, MANIFEST_FILE), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_manifest(corpus_dir: str) -> dict:
    with open(os.path.join(corpus_dir, MANIFEST_FILE)) as f:
        return json.load(f)


def split_sequences(corpus_dir: str, split: str) -> list[str]:
    manifest = load_manifest(corpus_dir)
    return [
        os.path.join(corpus_dir, e["name"])
        for e in manifest["sequences"]
        if e["split"] == split
    ]
