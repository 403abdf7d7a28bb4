"""Motion packing and canonicalization invariants.

Canonicalization is validated geometrically: joint tracks produced by
forward kinematics must transform rigidly, the anchor person's first
root must land on the origin with its heading removed, and the inverse
transform must restore the original sequences.
"""

import numpy as np
import pytest
import torch

from duopose.body import NUM_JOINTS, NUM_SHAPE, joints_from_params
from duopose.errors import SequenceTooShortError
from duopose.motion import (
    FRAME_DIM,
    POSE_BLOCK,
    PairMotion,
    PersonMotion,
    RigidTransform,
    canonicalize_pair,
    pack_pair,
    pack_person,
    packed_joints,
    pair_joints,
    split_packed,
    swap_pair,
    transform_pair,
    unpack_person,
)
from duopose.rotation import identity_rot6d, rot6d_to_matrix, yaw_matrix


def random_person(seed: int, frames: int = 5, depth: float = 3.0) -> PersonMotion:
    rng = np.random.default_rng(seed)
    pose = identity_rot6d(NUM_JOINTS).expand(frames, -1, -1).clone()
    pose = pose + torch.from_numpy(rng.normal(scale=0.3, size=(frames, NUM_JOINTS, 6))).to(
        torch.float32
    )
    shape = torch.from_numpy(rng.normal(size=NUM_SHAPE)).to(torch.float32)
    trans = torch.from_numpy(rng.normal(scale=0.4, size=(frames, 3))).to(torch.float32)
    trans[:, 2] += depth
    return PersonMotion(pose6d=pose, shape=shape, translation=trans)


def random_pair(seed: int, frames: int = 5) -> PairMotion:
    pair = PairMotion(
        person_a=random_person(seed, frames),
        person_b=random_person(seed + 1000, frames),
        meta={"name": f"pair{seed}"},
    )
    pair.person_b.translation[:, 0] += 0.8
    return pair


def test_frame_dim_layout():
    assert POSE_BLOCK == NUM_JOINTS * 6
    assert FRAME_DIM == POSE_BLOCK + NUM_SHAPE + 3


def test_pack_unpack_round_trip():
    person = random_person(0)
    packed = pack_person(person)
    assert packed.shape == (5, FRAME_DIM)
    back = unpack_person(packed)
    assert torch.equal(back.pose6d, person.pose6d)
    assert torch.equal(back.translation, person.translation)
    np.testing.assert_allclose(back.shape.numpy(), person.shape.numpy(), atol=1e-6)


def test_pack_layout_blocks():
    person = random_person(1)
    packed = pack_person(person)
    np.testing.assert_array_equal(
        packed[:, :POSE_BLOCK].numpy(), person.pose6d.reshape(5, -1).numpy()
    )
    for n in range(5):
        np.testing.assert_array_equal(
            packed[n, POSE_BLOCK : POSE_BLOCK + NUM_SHAPE].numpy(), person.shape.numpy()
        )
    np.testing.assert_array_equal(packed[:, -3:].numpy(), person.translation.numpy())


def test_unpack_averages_per_frame_shape():
    person = random_person(2)
    packed = pack_person(person)
    packed[:, POSE_BLOCK : POSE_BLOCK + NUM_SHAPE] += torch.linspace(-0.5, 0.5, 5).reshape(5, 1)
    back = unpack_person(packed)
    # The linspace offsets average to zero, so the mean recovers the shape.
    np.testing.assert_allclose(back.shape.numpy(), person.shape.numpy(), atol=1e-6)


def test_split_packed_broadcasts():
    person = random_person(3)
    packed = pack_person(person).reshape(1, 5, FRAME_DIM).expand(4, -1, -1)
    pose, shape, trans = split_packed(packed)
    assert pose.shape == (4, 5, NUM_JOINTS, 6)
    assert shape.shape == (4, 5, NUM_SHAPE)
    assert trans.shape == (4, 5, 3)
    np.testing.assert_array_equal(pose[2].numpy(), person.pose6d.numpy())


def test_packed_joints_matches_fk(template):
    person = random_person(4)
    got = packed_joints(pack_person(person), template)
    want = joints_from_params(template, person.pose6d, person.shape, person.translation)
    np.testing.assert_allclose(got.numpy(), want.numpy(), atol=1e-5)


def test_swap_pair_exchanges_people():
    pair = random_pair(5)
    swapped = swap_pair(pair)
    assert torch.equal(swapped.person_a.pose6d, pair.person_b.pose6d)
    assert torch.equal(swapped.person_b.translation, pair.person_a.translation)
    assert swapped.meta == pair.meta
    swapped.person_a.pose6d += 1.0  # clones, so the source must be untouched
    assert not torch.equal(swapped.person_a.pose6d, pair.person_b.pose6d)


def test_validate_rejects_bad_shapes():
    person = random_person(6)
    bad = PersonMotion(person.pose6d[:, :, :5], person.shape, person.translation)
    with pytest.raises(ValueError):
        bad.validate()
    bad = PersonMotion(person.pose6d, person.shape[:5], person.translation)
    with pytest.raises(ValueError):
        bad.validate()
    bad = PersonMotion(person.pose6d, person.shape, person.translation[:3])
    with pytest.raises(ValueError):
        bad.validate()


def test_validate_rejects_single_frame():
    person = random_person(7, frames=2)
    short = PersonMotion(person.pose6d[:1], person.shape, person.translation[:1])
    with pytest.raises(SequenceTooShortError):
        short.validate()


def test_validate_rejects_mismatched_pair():
    pair = PairMotion(random_person(8, frames=4), random_person(9, frames=5))
    with pytest.raises(ValueError):
        pair.validate()


def test_rigid_transform_point_round_trip():
    rng = np.random.default_rng(10)
    tf = RigidTransform(
        rotation=yaw_matrix(torch.tensor(0.7)),
        pivot=torch.from_numpy(rng.normal(size=3)).to(torch.float32),
    )
    pts = torch.from_numpy(rng.normal(size=(6, 3))).to(torch.float32)
    np.testing.assert_allclose(tf.inverse_points(tf.apply_points(pts)).numpy(), pts.numpy(), atol=1e-6)
    inv = tf.inverse()
    np.testing.assert_allclose(inv.apply_points(tf.apply_points(pts)).numpy(), pts.numpy(), atol=1e-6)
    np.testing.assert_allclose(inv.inverse_points(pts).numpy(), tf.apply_points(pts).numpy(), atol=1e-6)


def test_transform_pair_moves_joints_rigidly(template):
    pair = random_pair(11)
    tf = RigidTransform(rotation=yaw_matrix(torch.tensor(-1.2)), pivot=torch.tensor([0.3, -0.2, 2.5]))
    ja, jb = pair_joints(pair, template)
    moved = transform_pair(pair, tf)
    ma, mb = pair_joints(moved, template)
    np.testing.assert_allclose(ma.numpy(), tf.apply_points(ja).numpy(), atol=1e-5)
    np.testing.assert_allclose(mb.numpy(), tf.apply_points(jb).numpy(), atol=1e-5)


def test_canonicalize_anchors_first_root_at_origin(template):
    pair = random_pair(12)
    canon, _ = canonicalize_pair(pair, template)
    ja, _ = pair_joints(canon, template)
    np.testing.assert_allclose(ja[0, 0].numpy(), np.zeros(3), atol=1e-5)


def test_canonicalize_removes_heading(template):
    pair = random_pair(13)
    canon, _ = canonicalize_pair(pair, template)
    root = rot6d_to_matrix(canon.person_a.pose6d[0, 0])
    facing = root[:, 2]
    # The facing column's ground-plane part must point along +z.
    assert abs(float(facing[0])) < 1e-5
    assert float(facing[2]) > 0


def test_canonicalize_preserves_cross_person_geometry(template):
    pair = random_pair(14)
    ja, jb = pair_joints(pair, template)
    canon, _ = canonicalize_pair(pair, template)
    ca, cb = pair_joints(canon, template)
    dist = torch.cdist(ja.reshape(-1, 3), jb.reshape(-1, 3))
    cdist = torch.cdist(ca.reshape(-1, 3), cb.reshape(-1, 3))
    np.testing.assert_allclose(cdist.numpy(), dist.numpy(), atol=1e-4)


def test_canonicalize_round_trip(template):
    pair = random_pair(15)
    canon, tf = canonicalize_pair(pair, template)
    restored = transform_pair(canon, tf.inverse())
    for orig, back in (
        (pair.person_a, restored.person_a),
        (pair.person_b, restored.person_b),
    ):
        np.testing.assert_allclose(back.translation.numpy(), orig.translation.numpy(), atol=1e-5)
        np.testing.assert_allclose(
            rot6d_to_matrix(back.pose6d[:, 0]).numpy(),
            rot6d_to_matrix(orig.pose6d[:, 0]).numpy(),
            atol=1e-5,
        )
        # Non-root joints are untouched by rigid transforms.
        np.testing.assert_array_equal(back.pose6d[:, 1:].numpy(), orig.pose6d[:, 1:].numpy())


def test_canonicalize_is_idempotent(template):
    pair = random_pair(16)
    once, _ = canonicalize_pair(pair, template)
    twice, tf2 = canonicalize_pair(once, template)
    np.testing.assert_allclose(tf2.rotation.numpy(), np.eye(3), atol=1e-5)
    np.testing.assert_allclose(
        twice.person_a.translation.numpy(), once.person_a.translation.numpy(), atol=1e-5
    )


def test_pack_pair_matches_individuals():
    pair = random_pair(17)
    xa, xb = pack_pair(pair)
    assert torch.equal(xa, pack_person(pair.person_a))
    assert torch.equal(xb, pack_person(pair.person_b))
