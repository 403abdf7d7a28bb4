"""Motion containers for two-person sequences and pair canonicalization.

A person's motion over N frames is pose (N X K X 6), a constant shape
vector, and a root translation track (N X 3). The packed form used by the
networks flattens each frame to 157 numbers (144 pose + 10 shape + 3
translation); the shape block repeats the person's constant shape so the
networks see and adapt full per-frame body parameters, and unpacking
averages it back to a single vector.
Canonicalization moves the first person's first-frame root joint to the
origin and removes that person's heading about the gravity axis (+y points
down, so gravity is the y axis); the same rigid motion is applied to both
people, which keeps all relative geometry intact.
"""

from dataclasses import dataclass, field

import torch

from . import body as body_mod
from .body import NUM_JOINTS, NUM_SHAPE, BodyTemplate
from .errors import SequenceTooShortError
from .rotation import matrix_to_rot6d, rot6d_to_matrix, yaw_matrix

POSE_BLOCK = NUM_JOINTS * 6
FRAME_DIM = POSE_BLOCK + NUM_SHAPE + 3  # 157
MIN_FRAMES = 2


@dataclass
class PersonMotion:
    pose6d: torch.Tensor       # N X K X 6
    shape: torch.Tensor        # NUM_SHAPE
    translation: torch.Tensor  # N X 3

    @property
    def num_frames(self) -> int:
        return self.pose6d.shape[0]

    def clone(self) -> "PersonMotion":
        return PersonMotion(self.pose6d.clone(), self.shape.clone(), self.translation.clone())

    def validate(self) -> None:
        if self.pose6d.ndim != 3 or self.pose6d.shape[1:] != (NUM_JOINTS, 6):
            raise ValueError(f"pose6d must be N X {NUM_JOINTS} X 6, got {tuple(self.pose6d.shape)}")
        if self.shape.shape != (NUM_SHAPE,):
            raise ValueError(f"shape must be ({NUM_SHAPE},), got {tuple(self.shape.shape)}")
        if self.translation.shape != (self.pose6d.shape[0], 3):
            raise ValueError("translation must be N X 3 with N matching pose6d")
        if self.num_frames < MIN_FRAMES:
            raise SequenceTooShortError(
                f"sequence has {self.num_frames} frames, need at least {MIN_FRAMES}"
            )


@dataclass
class PairMotion:
    person_a: PersonMotion
    person_b: PersonMotion
    meta: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.person_a.num_frames

    def clone(self) -> "PairMotion":
        return PairMotion(self.person_a.clone(), self.person_b.clone(), dict(self.meta))

    def validate(self) -> None:
        self.person_a.validate()
        self.person_b.validate()
        if self.person_a.num_frames != self.person_b.num_frames:
            raise ValueError("both people must cover the same frames")


def pack_person(person: PersonMotion) -> torch.Tensor:
    """Flatten to N X FRAME_DIM (pose, shape, translation)."""
    n = person.num_frames
    return torch.cat(
        [person.pose6d.reshape(n, -1), person.shape.expand(n, -1), person.translation],
        dim=-1,
    )


def unpack_person(packed: torch.Tensor) -> PersonMotion:
    """Inverse of pack_person. packed: N X FRAME_DIM.

    The shape block may vary per frame in network output; it collapses to
    its mean since a person's shape is constant over a sequence.
    """
    n = packed.shape[0]
    pose = packed[:, :POSE_BLOCK].reshape(n, NUM_JOINTS, 6)
    shape = packed[:, POSE_BLOCK : POSE_BLOCK + NUM_SHAPE].mean(dim=0)
    trans = packed[:, POSE_BLOCK + NUM_SHAPE :]
    return PersonMotion(pose, shape, trans)


def split_packed(packed: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Views of the pose, shape, and translation blocks. packed: ... X FRAME_DIM.

    Pose comes back as ... X K X 6.
    """
    pose = packed[..., :POSE_BLOCK].reshape(*packed.shape[:-1], NUM_JOINTS, 6)
    shape = packed[..., POSE_BLOCK : POSE_BLOCK + NUM_SHAPE]
    trans = packed[..., POSE_BLOCK + NUM_SHAPE :]
    return pose, shape, trans


def packed_joints(packed: torch.Tensor, template: BodyTemplate) -> torch.Tensor:
    """FK joints straight from packed frames, ... X N X K X 3."""
    pose, shape, trans = split_packed(packed)
    return body_mod.joints_from_params(template, pose, shape, trans)


def pack_pair(pair: PairMotion) -> tuple[torch.Tensor, torch.Tensor]:
    return pack_person(pair.person_a), pack_person(pair.person_b)


def swap_pair(pair: PairMotion) -> PairMotion:
    """Exchange the two people. Used as a training-time augmentation."""
    return PairMotion(pair.person_b.clone(), pair.person_a.clone(), dict(pair.meta))


@dataclass
class RigidTransform:
    """x -> rotation @ (x - pivot). Rotation is about the gravity axis here."""

    rotation: torch.Tensor  # 3 X 3
    pivot: torch.Tensor     # 3

    def apply_points(self, points: torch.Tensor) -> torch.Tensor:
        return torch.einsum("ij,...j->...i", self.rotation, points - self.pivot)

    def inverse_points(self, points: torch.Tensor) -> torch.Tensor:
        return torch.einsum("ji,...j->...i", self.rotation, points) + self.pivot

    def inverse(self) -> "RigidTransform":
        """The transform mapping canonical points back: y -> R^T y + pivot."""
        rt = self.rotation.T.contiguous()
        return RigidTransform(rotation=rt, pivot=-self.rotation @ self.pivot)


def _heading_angle(root_rot: torch.Tensor) -> torch.Tensor:
    """Yaw of a root orientation about +y, from the facing (z) column.

    Falls back to the lateral (x) column when the person looks straight
    along gravity, and to zero when both are ambiguous.
    """
    facing = root_rot[:, 2]
    norm = torch.hypot(facing[0], facing[2])
    if norm < 1e-6:
        facing = root_rot[:, 0]
        norm = torch.hypot(facing[0], facing[2])
        if norm < 1e-6:
            return torch.zeros(())
    return torch.atan2(facing[0], facing[2])


def _transform_person(person: PersonMotion, tf: RigidTransform) -> PersonMotion:
    out = person.clone()
    root_rot = rot6d_to_matrix(person.pose6d[:, 0])  # N X 3 X 3
    new_root = torch.einsum("ij,njk->nik", tf.rotation, root_rot)
    out.pose6d[:, 0] = matrix_to_rot6d(new_root)
    out.translation = torch.einsum("ij,nj->ni", tf.rotation, person.translation - tf.pivot)
    return out


def transform_pair(pair: PairMotion, tf: RigidTransform) -> PairMotion:
    """Apply a rigid transform to both people (roots and translations)."""
    return PairMotion(
        _transform_person(pair.person_a, tf),
        _transform_person(pair.person_b, tf),
        dict(pair.meta),
    )


def canonicalize_pair(pair: PairMotion, template: BodyTemplate) -> tuple[PairMotion, RigidTransform]:
    """Anchor the pair to the first person's first frame.

    Returns the transformed pair and the transform itself so the result can
    be mapped back to the original (camera) frame later.
    """
    pair.validate()
    a0_rot = rot6d_to_matrix(pair.person_a.pose6d[0, 0])
    root = body_mod.joints_from_params(
        template,
        pair.person_a.pose6d[0],
        pair.person_a.shape,
        pair.person_a.translation[0],
    )[0]
    yaw = _heading_angle(a0_rot)
    tf = RigidTransform(rotation=yaw_matrix(-yaw), pivot=root)
    out = PairMotion(
        _transform_person(pair.person_a, tf),
        _transform_person(pair.person_b, tf),
        dict(pair.meta),
    )
    return out, tf


def pair_joints(pair: PairMotion, template: BodyTemplate) -> tuple[torch.Tensor, torch.Tensor]:
    """Joint tracks for both people, each N X K X 3."""
    ja = body_mod.joints_from_params(
        template, pair.person_a.pose6d, pair.person_a.shape, pair.person_a.translation
    )
    jb = body_mod.joints_from_params(
        template, pair.person_b.pose6d, pair.person_b.shape, pair.person_b.translation
    )
    return ja, jb
