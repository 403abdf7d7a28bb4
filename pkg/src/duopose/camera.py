"""Pinhole camera, projection, and the closed-form reprojection gradient."""

from dataclasses import asdict, dataclass

import torch

from .errors import BehindCameraError

MIN_DEPTH = 1e-6


@dataclass
class PinholeCamera:
    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 512.0
    cy: float = 512.0
    width: int = 1024
    height: int = 1024

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PinholeCamera":
        return cls(**d)


def project(camera: PinholeCamera, points: torch.Tensor, strict: bool = True) -> torch.Tensor:
    """Perspective projection of ... X 3 points to ... X 2 pixels.

    With strict=True a non-positive depth raises BehindCameraError naming the
    first offending point and its depth; with strict=False depth is clamped
    to a small positive floor so the result stays finite (used inside
    guidance where intermediate states may wander).
    """
    z = points[..., 2]
    if strict:
        bad = z <= 0.0
        if bad.any():
            flat = bad.reshape(-1)
            idx = int(torch.nonzero(flat, as_tuple=False)[0])
            raise BehindCameraError(idx, float(z.reshape(-1)[idx]))
    z = z.clamp_min(MIN_DEPTH)
    u = camera.fx * points[..., 0] / z + camera.cx
    v = camera.fy * points[..., 1] / z + camera.cy
    return torch.stack([u, v], dim=-1)


def reprojection_energy(
    camera: PinholeCamera,
    points: torch.Tensor,
    targets: torch.Tensor,
    weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Sum of weighted squared pixel residuals. points ... X J X 3."""
    pix = project(camera, points, strict=False)
    sq = ((pix - targets) ** 2).sum(dim=-1)  # ... X J
    if weights is not None:
        sq = sq * weights
    return sq.sum(dim=-1)


def reprojection_gradient(
    camera: PinholeCamera,
    points: torch.Tensor,
    targets: torch.Tensor,
    weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """d/dX of reprojection_energy, evaluated in closed form.

    points: ... X J X 3, targets: ... X J X 2, weights: ... X J or None.
    Differentiating u = fx x / z + cx and v = fy y / z + cy through the
    perspective division gives, per point with residual r = (u - pu, v - pv):

        dL/dx = 2 w r_u fx / z
        dL/dy = 2 w r_v fy / z
        dL/dz = -2 w (r_u fx x + r_v fy y) / z^2

    Points at or behind the clamp depth contribute zero gradient: the
    clamped projection no longer depends on z there and pushing x or y with
    a bogus clamped depth would inject junk.
    """
    x, y = points[..., 0], points[..., 1]
    z_raw = points[..., 2]
    valid = z_raw > MIN_DEPTH
    z = z_raw.clamp_min(MIN_DEPTH)
    ru = camera.fx * x / z + camera.cx - targets[..., 0]
    rv = camera.fy * y / z + camera.cy - targets[..., 1]
    w = torch.ones_like(z) if weights is None else weights
    w = w * valid.to(points.dtype)
    gx = 2.0 * w * ru * camera.fx / z
    gy = 2.0 * w * rv * camera.fy / z
    gz = -2.0 * w * (ru * camera.fx * x + rv * camera.fy * y) / (z * z)
    return torch.stack([gx, gy, gz], dim=-1)


def bbox_from_points(points2d: torch.Tensor, camera: PinholeCamera, margin: float = 0.1) -> torch.Tensor:
    """Axis-aligned box around ... X J X 2 points, padded and clipped.

    Returns ... X 4 as (x_min, y_min, x_max, y_max) in pixels.
    """
    lo = points2d.amin(dim=-2)
    hi = points2d.amax(dim=-2)
    pad = (hi - lo) * margin
    lo = lo - pad
    hi = hi + pad
    bounds = torch.tensor([camera.width, camera.height], dtype=points2d.dtype)
    lo = lo.clamp_min(0.0)
    hi = torch.minimum(hi, bounds)
    return torch.cat([lo, hi], dim=-1)


def bbox_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """IoU of ... X 4 boxes in (x_min, y_min, x_max, y_max) form."""
    lo = torch.maximum(a[..., :2], b[..., :2])
    hi = torch.minimum(a[..., 2:], b[..., 2:])
    inter = (hi - lo).clamp_min(0.0).prod(dim=-1)
    area_a = (a[..., 2:] - a[..., :2]).clamp_min(0.0).prod(dim=-1)
    area_b = (b[..., 2:] - b[..., :2]).clamp_min(0.0).prod(dim=-1)
    union = area_a + area_b - inter
    return inter / union.clamp_min(1e-12)
