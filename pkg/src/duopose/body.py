"""Procedural articulated body model.

A fixed 24-joint kinematic tree with a capsule-per-bone surface mesh plays
the role of a learned statistical body. Everything is generated in code: the
rest skeleton, the watertight mesh, distance-falloff skinning weights, ten
orthonormal shape displacement fields, and a ring-vertex joint regressor.
Coordinates are meters in a y-down frame, so a standing person extends
toward negative y; the pelvis sits at the origin of the rest pose.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from . import arrayio
from .rotation import rot6d_to_matrix

NUM_JOINTS = 24
NUM_SHAPE = 10
POSE_DIM = NUM_JOINTS * 6

PARENTS = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
]

JOINT_NAMES = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hand", "r_hand",
]

# Rest skeleton, pelvis at origin, up is -y, person faces +z. T-pose arms.
_REST_JOINTS = np.array(
    [
        [0.000, 0.000, 0.000],   # pelvis
        [0.090, 0.020, 0.000],   # l_hip
        [-0.090, 0.020, 0.000],  # r_hip
        [0.000, -0.110, 0.000],  # spine1
        [0.100, 0.450, 0.000],   # l_knee
        [-0.100, 0.450, 0.000],  # r_knee
        [0.000, -0.240, 0.000],  # spine2
        [0.105, 0.860, 0.000],   # l_ankle
        [-0.105, 0.860, 0.000],  # r_ankle
        [0.000, -0.300, 0.000],  # spine3
        [0.110, 0.920, 0.100],   # l_foot
        [-0.110, 0.920, 0.100],  # r_foot
        [0.000, -0.470, 0.000],  # neck
        [0.060, -0.420, 0.000],  # l_collar
        [-0.060, -0.420, 0.000], # r_collar
        [0.000, -0.600, 0.000],  # head
        [0.170, -0.440, 0.000],  # l_shoulder
        [-0.170, -0.440, 0.000], # r_shoulder
        [0.430, -0.440, 0.000],  # l_elbow
        [-0.430, -0.440, 0.000], # r_elbow
        [0.680, -0.440, 0.000],  # l_wrist
        [-0.680, -0.440, 0.000], # r_wrist
        [0.760, -0.440, 0.000],  # l_hand
        [-0.760, -0.440, 0.000], # r_hand
    ],
    dtype=np.float64,
)

# Capsule radius per bone, keyed by the child joint of the bone.
_BONE_RADIUS = {
    1: 0.065, 2: 0.065, 3: 0.105,
    4: 0.070, 5: 0.070, 6: 0.115,
    7: 0.052, 8: 0.052, 9: 0.110,
    10: 0.040, 11: 0.040, 12: 0.048,
    13: 0.045, 14: 0.045, 15: 0.085,
    16: 0.048, 17: 0.048,
    18: 0.042, 19: 0.042,
    20: 0.036, 21: 0.036,
    22: 0.032, 23: 0.032,
}

_RADIAL_SEGS = 7   # vertices per ring
_CAP_RINGS = 1     # latitude rings per hemispherical cap


@dataclass
class BodyTemplate:
    """Static body definition shared by every posed instance."""

    rest_joints: torch.Tensor      # K X 3
    parents: list[int]
    rest_vertices: torch.Tensor    # V X 3
    faces: torch.Tensor            # F X 3 int64
    skin_weights: torch.Tensor     # V X K, rows sum to 1
    shape_basis: torch.Tensor      # NUM_SHAPE X V X 3, orthonormal over flattened fields
    joint_regressor: torch.Tensor  # K X V, rows sum to 1
    joint_names: list[str] = field(default_factory=lambda: list(JOINT_NAMES))

    @property
    def num_vertices(self) -> int:
        return self.rest_vertices.shape[0]


@dataclass
class BodyParams:
    """Pose in 6d rotation form plus shape and root translation."""

    pose6d: torch.Tensor       # K X 6
    shape: torch.Tensor        # NUM_SHAPE
    translation: torch.Tensor  # 3


def _orthobasis(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2


def _capsule(p0: np.ndarray, p1: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed capsule mesh from p0 to p1.

    Returns (vertices, faces, ring_flags) where ring_flags marks which ring a
    vertex lies on: 0 for the ring centered exactly at p0, 1 for the ring at
    p1, -1 otherwise. Winding is outward.
    """
    axis = p1 - p0
    length = np.linalg.norm(axis)
    axis = axis / length
    e1, e2 = _orthobasis(axis)
    theta = 2.0 * np.pi * np.arange(_RADIAL_SEGS) / _RADIAL_SEGS
    circle = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2  # S X 3

    rings = []
    flags = []
    # Bottom cap rings sweep the pole-to-equator angle, excluding the pole.
    for k in range(1, _CAP_RINGS + 1):
        alpha = 0.5 * np.pi * k / (_CAP_RINGS + 1)
        rings.append(p0 - radius * np.cos(alpha) * axis + radius * np.sin(alpha) * circle)
        flags.append(-1)
    rings.append(p0 + radius * circle)
    flags.append(0)
    rings.append(p1 + radius * circle)
    flags.append(1)
    for k in range(_CAP_RINGS, 0, -1):
        alpha = 0.5 * np.pi * k / (_CAP_RINGS + 1)
        rings.append(p1 + radius * np.cos(alpha) * axis + radius * np.sin(alpha) * circle)
        flags.append(-1)

    apex0 = p0 - radius * axis
    apex1 = p1 + radius * axis
    verts = np.concatenate([apex0[None], np.concatenate(rings, axis=0), apex1[None]], axis=0)
    ring_flags = np.full(len(verts), -1, dtype=np.int64)
    for ridx, flag in enumerate(flags):
        if flag >= 0:
            start = 1 + ridx * _RADIAL_SEGS
            ring_flags[start:start + _RADIAL_SEGS] = flag

    faces = []
    s = _RADIAL_SEGS
    nrings = len(rings)
    last_apex = len(verts) - 1
    for i in range(s):
        j = (i + 1) % s
        # Fan around apex0: ring0 viewed from outside below, wind so the
        # normal points away from the axis midpoint.
        faces.append([0, 1 + j, 1 + i])
    for r in range(nrings - 1):
        a = 1 + r * s
        b = 1 + (r + 1) * s
        for i in range(s):
            j = (i + 1) % s
            faces.append([a + i, a + j, b + i])
            faces.append([a + j, b + j, b + i])
    top = 1 + (nrings - 1) * s
    for i in range(s):
        j = (i + 1) % s
        faces.append([top + i, top + j, last_apex])
    faces = np.asarray(faces, dtype=np.int64)

    if _signed_volume(verts, faces) < 0:
        faces = faces[:, [0, 2, 1]]
    return verts, faces, ring_flags


def _signed_volume(verts: np.ndarray, faces: np.ndarray) -> float:
    tri = verts[faces]
    return float(np.einsum("fi,fi->", np.cross(tri[:, 0], tri[:, 1]), tri[:, 2]) / 6.0)


def _point_segment_dist(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        return np.linalg.norm(points - a, axis=-1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=-1)


def _skin_weights(verts: np.ndarray) -> np.ndarray:
    """Gaussian falloff on distance to each joint's driven segments.

    Joint j drives the bones from j to each of its children; leaf joints get
    a point stub so posing them still nudges nearby surface.
    """
    segments: list[tuple[int, np.ndarray, np.ndarray, float]] = []
    children: dict[int, list[int]] = {j: [] for j in range(NUM_JOINTS)}
    for c, p in enumerate(PARENTS):
        if p >= 0:
            children[p].append(c)
    for j in range(NUM_JOINTS):
        if children[j]:
            for c in children[j]:
                segments.append((j, _REST_JOINTS[j], _REST_JOINTS[c], _BONE_RADIUS[c]))
        else:
            parent_r = _BONE_RADIUS[j]
            segments.append((j, _REST_JOINTS[j], _REST_JOINTS[j], parent_r))

    weights = np.zeros((len(verts), NUM_JOINTS), dtype=np.float64)
    for j, a, b, radius in segments:
        d = _point_segment_dist(verts, a, b)
        sigma = max(radius, 0.03)
        weights[:, j] = np.maximum(weights[:, j], np.exp(-((d / sigma) ** 2)))
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def _smooth_mask(weights: np.ndarray, joints: list[int]) -> np.ndarray:
    return weights[:, joints].sum(axis=1)


def _shape_fields(verts: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Ten raw displacement fields, later orthonormalized by QR."""
    x, y, z = verts[:, 0], verts[:, 1], verts[:, 2]
    arm = _smooth_mask(weights, [13, 14, 16, 17, 18, 19, 20, 21, 22, 23])
    leg = _smooth_mask(weights, [1, 2, 4, 5, 7, 8, 10, 11])
    torso = _smooth_mask(weights, [0, 3, 6, 9])
    head = _smooth_mask(weights, [12, 15])
    shoulders = _smooth_mask(weights, [13, 14, 16, 17])

    fields = np.zeros((NUM_SHAPE, len(verts), 3), dtype=np.float64)
    fields[0] = verts                                   # overall scale
    fields[1][:, 1] = y                                 # stature
    fields[2][:, 0] = x
    fields[2][:, 2] = z                                 # global girth
    fields[3][:, 0] = np.sign(x) * np.maximum(np.abs(x) - 0.17, 0.0) * arm  # arm length
    fields[4][:, 1] = np.maximum(y, 0.0) * leg          # leg length
    fields[5][:, 0] = x * torso
    fields[5][:, 2] = z * torso                         # torso girth
    head_center = _REST_JOINTS[15]
    fields[6] = (verts - head_center) * head[:, None]   # head size
    fields[7][:, 0] = np.sign(x) * shoulders            # shoulder width
    limb = np.clip(arm + leg, 0.0, 1.0)
    fields[8][:, 0] = x * limb
    fields[8][:, 2] = z * limb                          # limb girth
    belly_center = (_REST_JOINTS[3] + _REST_JOINTS[6]) / 2.0
    belly = np.exp(-(np.linalg.norm(verts - belly_center, axis=1) / 0.22) ** 2)
    fields[9] = (verts - belly_center) * belly[:, None] # belly

    flat = fields.reshape(NUM_SHAPE, -1).T  # 3V X NUM_SHAPE
    q, r = np.linalg.qr(flat)
    sign = np.sign(np.diag(r))
    sign[sign == 0] = 1.0
    q = q * sign[None, :]
    return q.T.reshape(NUM_SHAPE, len(verts), 3)


def build_default_template() -> BodyTemplate:
    """Construct the procedural template. Deterministic, no RNG involved."""
    all_verts = []
    all_faces = []
    ring_members: dict[int, list[int]] = {j: [] for j in range(NUM_JOINTS)}
    offset = 0
    for child, parent in enumerate(PARENTS):
        if parent < 0:
            continue
        v, f, flags = _capsule(_REST_JOINTS[parent], _REST_JOINTS[child], _BONE_RADIUS[child])
        all_verts.append(v)
        all_faces.append(f + offset)
        for local_idx in np.nonzero(flags == 0)[0]:
            ring_members[parent].append(offset + int(local_idx))
        for local_idx in np.nonzero(flags == 1)[0]:
            ring_members[child].append(offset + int(local_idx))
        offset += len(v)

    verts = np.concatenate(all_verts, axis=0)
    faces = np.concatenate(all_faces, axis=0)
    weights = _skin_weights(verts)
    basis = _shape_fields(verts, weights)

    regressor = np.zeros((NUM_JOINTS, len(verts)), dtype=np.float64)
    for j in range(NUM_JOINTS):
        members = ring_members[j]
        regressor[j, members] = 1.0 / len(members)

    return BodyTemplate(
        rest_joints=torch.tensor(_REST_JOINTS, dtype=torch.float32),
        parents=list(PARENTS),
        rest_vertices=torch.tensor(verts, dtype=torch.float32),
        faces=torch.tensor(faces, dtype=torch.int64),
        skin_weights=torch.tensor(weights, dtype=torch.float32),
        shape_basis=torch.tensor(basis, dtype=torch.float32),
        joint_regressor=torch.tensor(regressor, dtype=torch.float32),
    )


def shaped_vertices(template: BodyTemplate, shape: torch.Tensor) -> torch.Tensor:
    """Rest vertices displaced by the shape coefficients. shape: ... X 10."""
    disp = torch.einsum("...s,svi->...vi", shape, template.shape_basis)
    return template.rest_vertices + disp


def shaped_joints(template: BodyTemplate, shape: torch.Tensor) -> torch.Tensor:
    """Rest joints for the given shape, via the regressor. shape: ... X 10."""
    return torch.einsum("kv,...vi->...ki", template.joint_regressor, shaped_vertices(template, shape))


def joint_transforms(
    template: BodyTemplate,
    pose6d: torch.Tensor,
    shape: torch.Tensor,
    translation: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """World rotation and position per joint.

    pose6d: ... X K X 6, shape: ... X 10, translation: ... X 3.
    Returns (world_rot ... X K X 3 X 3, joints ... X K X 3, rest ... X K X 3).
    The root joint is the rest root rotated by the root orientation, offset
    by the translation; every other joint hangs off its parent.
    """
    rot = rot6d_to_matrix(pose6d)  # ... X K X 3 X 3
    rest = shaped_joints(template, shape)  # ... X K X 3

    world_rot = [rot[..., 0, :, :]]
    pos = [
        torch.einsum("...ij,...j->...i", rot[..., 0, :, :], rest[..., 0, :]) + translation
    ]
    for j in range(1, NUM_JOINTS):
        p = template.parents[j]
        world_rot.append(torch.einsum("...ij,...jk->...ik", world_rot[p], rot[..., j, :, :]))
        bone = rest[..., j, :] - rest[..., p, :]
        pos.append(pos[p] + torch.einsum("...ij,...j->...i", world_rot[p], bone))
    return torch.stack(world_rot, dim=-3), torch.stack(pos, dim=-2), rest


def joints_from_params(
    template: BodyTemplate,
    pose6d: torch.Tensor,
    shape: torch.Tensor,
    translation: torch.Tensor,
) -> torch.Tensor:
    """Posed joint positions, ... X K X 3. Broadcasts over leading dims."""
    _, joints, _ = joint_transforms(template, pose6d, shape, translation)
    return joints


def vertices_from_params(
    template: BodyTemplate,
    pose6d: torch.Tensor,
    shape: torch.Tensor,
    translation: torch.Tensor,
) -> torch.Tensor:
    """Linear blend skinned surface vertices, ... X V X 3."""
    world_rot, joints, rest = joint_transforms(template, pose6d, shape, translation)
    v_shaped = shaped_vertices(template, shape)  # ... X V X 3
    # Per-joint affine: x -> world_rot @ (x - rest_joint) + joint_pos.
    trans_part = joints - torch.einsum("...kij,...kj->...ki", world_rot, rest)
    per_joint = torch.einsum("...kij,...vj->...kvi", world_rot, v_shaped) + trans_part[..., :, None, :]
    return torch.einsum("vk,...kvi->...vi", template.skin_weights, per_joint)


def forward_kinematics(params: BodyParams, template: BodyTemplate) -> torch.Tensor:
    """Joint positions for a single body, K X 3."""
    return joints_from_params(template, params.pose6d, params.shape, params.translation)


def skin_mesh(params: BodyParams, template: BodyTemplate) -> torch.Tensor:
    """Surface vertices for a single body, V X 3."""
    return vertices_from_params(template, params.pose6d, params.shape, params.translation)


def save_template(template: BodyTemplate, path) -> None:
    arrayio.save_arrays(
        path,
        {
            "rest_joints": template.rest_joints.numpy(),
            "parents": np.asarray(template.parents, dtype=np.int32),
            "rest_vertices": template.rest_vertices.numpy(),
            "faces": template.faces.numpy(),
            "skin_weights": template.skin_weights.numpy(),
            "shape_basis": template.shape_basis.numpy(),
            "joint_regressor": template.joint_regressor.numpy(),
        },
        meta={"kind": "body-template", "joint_names": JOINT_NAMES},
    )


def load_template(path) -> BodyTemplate:
    arrays, meta = arrayio.load_arrays(path)
    if meta.get("kind") != "body-template":
        raise ValueError(f"{path}: not a body template file")
    return BodyTemplate(
        rest_joints=torch.from_numpy(arrays["rest_joints"]),
        parents=[int(p) for p in arrays["parents"]],
        rest_vertices=torch.from_numpy(arrays["rest_vertices"]),
        faces=torch.from_numpy(arrays["faces"]).to(torch.int64),
        skin_weights=torch.from_numpy(arrays["skin_weights"]),
        shape_basis=torch.from_numpy(arrays["shape_basis"]),
        joint_regressor=torch.from_numpy(arrays["joint_regressor"]),
        joint_names=list(meta.get("joint_names", JOINT_NAMES)),
    )
