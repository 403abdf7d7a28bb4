"""Building denoiser conditions from the pair currently being sampled.

The condition carries four channels per step: observation features (encoded
2D keypoints, confidences, and boxes), the exact mesh penetration energy of
the current pair, closed-form reprojection gradients at the current joints,
and the detection boxes. Training and inference share this builder so the
distribution the model sees is identical in both phases; only the dropout
masking differs.

States live in the canonical (heading-and-root-removed) frame while the
observations live in the camera frame, so the context records the rigid
transform between them. Penetration is rigid-invariant and is evaluated in
the canonical frame directly; reprojection gradients are computed in the
camera frame and rotated back.
"""

from dataclasses import dataclass

import numpy as np
import torch

from . import collision
from .body import BodyTemplate, vertices_from_params
from .camera import PinholeCamera, reprojection_gradient
from .diffusion import DualBranchDenoiser, GuidanceCondition, assemble_condition
from .motion import packed_joints, split_packed


@dataclass
class GuidanceContext:
    """Per-batch constants needed to rebuild the condition each step."""

    template: BodyTemplate
    camera: PinholeCamera
    keypoints: torch.Tensor  # B X 2 X N X K X 2 pixels
    confidence: torch.Tensor  # B X 2 X N X K
    bbox: torch.Tensor  # B X 2 X N X 4 pixels
    world_rot: torch.Tensor  # B X 3 X 3, canonical -> camera rotation
    world_pivot: torch.Tensor  # B X 3
    pen_frames: int = 0  # >0: evaluate that many frames, interpolate the rest


def subsample_frames(num_frames: int, count: int) -> np.ndarray:
    """Evenly spaced frame indices including both ends."""
    if count <= 0 or count >= num_frames:
        return np.arange(num_frames)
    return np.unique(np.round(np.linspace(0, num_frames - 1, count)).astype(np.int64))


def mesh_penetration(
    template: BodyTemplate,
    packed_a: torch.Tensor,
    packed_b: torch.Tensor,
    frame_idx: np.ndarray | None = None,
) -> torch.Tensor:
    """Exact plane-field penetration energy per (batch item, frame).

    packed_*: B X N X FRAME_DIM. When frame_idx subsamples the sequence the
    remaining frames are filled by linear interpolation. Returns B X N.
    """
    b, n = packed_a.shape[0], packed_a.shape[1]
    idx = np.arange(n) if frame_idx is None else np.asarray(frame_idx, dtype=np.int64)
    with torch.no_grad():
        sel_a = packed_a[:, idx]
        sel_b = packed_b[:, idx]
        pa, sa, ta = split_packed(sel_a)
        pb, sb, tb = split_packed(sel_b)
        va = vertices_from_params(template, pa, sa, ta).numpy().astype(np.float64)
        vb = vertices_from_params(template, pb, sb, tb).numpy().astype(np.float64)
    faces = template.faces.numpy()

    mesh_a = collision.TriangleMesh(va[0, 0], faces)
    mesh_b = collision.TriangleMesh(vb[0, 0], faces)
    bvh_a = collision.build_bvh(mesh_a)
    bvh_b = collision.build_bvh(mesh_b)
    out = np.zeros((b, n), dtype=np.float64)
    for i in range(b):
        vals = np.zeros(len(idx), dtype=np.float64)
        for k, f in enumerate(idx):
            mesh_a.vertices = va[i, k]
            mesh_b.vertices = vb[i, k]
            bvh_a.refit(va[i, k])
            bvh_b.refit(vb[i, k])
            report = collision.penetration_loss(mesh_a, mesh_b, bvh_a, bvh_b)
            vals[k] = report.penetration_loss
        if len(idx) == n:
            out[i] = vals
        else:
            out[i] = np.interp(np.arange(n), idx, vals)
    return torch.from_numpy(out).to(torch.float32)


def camera_frame_joints(
    packed: torch.Tensor,
    template: BodyTemplate,
    world_rot: torch.Tensor,
    world_pivot: torch.Tensor,
) -> torch.Tensor:
    """Joints of a packed canonical state, moved into the camera frame."""
    j = packed_joints(packed, template)  # B X N X K X 3
    return (
        torch.einsum("bij,bnkj->bnki", world_rot, j)
        + world_pivot[:, None, None, :]
    )


def build_condition(
    model: DualBranchDenoiser,
    x_a: torch.Tensor,
    x_b: torch.Tensor,
    ctx: GuidanceContext,
    training: bool = False,
    mask_rate: float = 0.0,
    generator: torch.Generator | None = None,
    physics: bool = True,
) -> GuidanceCondition:
    """Assemble the full condition for the current sample pair.

    physics=False zeroes the penetration channel (the "no physical
    guidance" ablation); everything else is unchanged. Only the observation
    features keep gradients (their encoder trains jointly); penetration and
    projection gradients are treated as constants of the current state.
    """
    cam = ctx.camera
    feats = torch.stack(
        [
            model.observation_encoder(
                ctx.keypoints[:, p], ctx.confidence[:, p], ctx.bbox[:, p], cam
            )
            for p in (0, 1)
        ],
        dim=1,
    )

    focal_sq = cam.fx * cam.fy
    grads = []
    for p, x in ((0, x_a), (1, x_b)):
        j_cam = camera_frame_joints(x.detach(), ctx.template, ctx.world_rot, ctx.world_pivot)
        g_cam = reprojection_gradient(
            cam, j_cam, ctx.keypoints[:, p], ctx.confidence[:, p]
        )
        # Chain rule back into the canonical frame; scale to O(1) units.
        g = torch.einsum("bji,bnkj->bnki", ctx.world_rot, g_cam) / focal_sq
        grads.append(g)
    proj_grads = torch.stack(grads, dim=1)

    n = x_a.shape[1]
    if physics:
        idx = subsample_frames(n, ctx.pen_frames)
        pen = mesh_penetration(ctx.template, x_a.detach(), x_b.detach(), idx)
    else:
        pen = torch.zeros(x_a.shape[0], n)

    size = torch.tensor(
        [cam.width, cam.height, cam.width, cam.height], dtype=ctx.bbox.dtype
    )
    return assemble_condition(
        features=feats,
        pen_value=pen,
        proj_grads=proj_grads,
        bbox=ctx.bbox / size,
        mask_rate=mask_rate,
        training=training,
        generator=generator,
    )
