"""Continuous 6D rotation representation.

A rotation is encoded by the first two columns of its matrix, flattened to
``[a1, a2]``. Decoding normalizes ``a1``, Gram-Schmidt-orthogonalizes ``a2``
against it, and completes the frame with a cross product, so the decoded
matrix is always a proper rotation.
"""

import torch

from .errors import DegenerateRotationError

_EPS = 1e-8


def rot6d_to_matrix(r6: torch.Tensor) -> torch.Tensor:
    """Decode 6D vectors (..., 6) to rotation matrices (..., 3, 3).

    Raises DegenerateRotationError when the first vector is (near) zero or
    the two vectors are (near) parallel.
    """
    r6 = torch.as_tensor(r6)
    if r6.shape[-1] != 6:
        raise ValueError(f"expected trailing dim 6, got {tuple(r6.shape)}")
    a1 = r6[..., 0:3]
    a2 = r6[..., 3:6]

    n1 = torch.linalg.vector_norm(a1, dim=-1)
    if bool((n1 < _EPS).any()):
        raise DegenerateRotationError("first 6D vector has near-zero norm")
    b1 = a1 / n1.unsqueeze(-1)

    proj = (b1 * a2).sum(dim=-1, keepdim=True)
    u2 = a2 - proj * b1
    n2 = torch.linalg.vector_norm(u2, dim=-1)
    if bool((n2 < _EPS).any()):
        raise DegenerateRotationError("6D vectors are near-parallel")
    b2 = u2 / n2.unsqueeze(-1)

    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_rot6d(rot: torch.Tensor) -> torch.Tensor:
    """Encode rotation matrices (..., 3, 3) as 6D vectors (..., 6).

    Takes the first two columns, so decode(encode(R)) == R for rotations.
    """
    rot = torch.as_tensor(rot)
    if rot.shape[-2:] != (3, 3):
        raise ValueError(f"expected trailing shape (3, 3), got {tuple(rot.shape)}")
    return torch.cat([rot[..., :, 0], rot[..., :, 1]], dim=-1)


def identity_rot6d(*leading: int, dtype=torch.float32) -> torch.Tensor:
    """6D encoding of the identity rotation, broadcast to a leading shape."""
    base = torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], dtype=dtype)
    return base.expand(*leading, 6).clone() if leading else base.clone()


def yaw_matrix(angle: torch.Tensor | float, dtype=torch.float32) -> torch.Tensor:
    """Rotation about the +Y (gravity) axis by ``angle`` radians."""
    angle = torch.as_tensor(angle, dtype=dtype)
    c, s = torch.cos(angle), torch.sin(angle)
    zero = torch.zeros_like(c)
    one = torch.ones_like(c)
    rows = [
        torch.stack([c, zero, s], dim=-1),
        torch.stack([zero, one, zero], dim=-1),
        torch.stack([-s, zero, c], dim=-1),
    ]
    return torch.stack(rows, dim=-2)
