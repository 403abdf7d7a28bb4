"""Dual-branch guided diffusion adaptor.

The forward process is shifted so that full noise lands on the initial
prediction rather than on zero: x_t = x_init + sqrt(ab_t) (x0 - x_init)
+ sqrt(1 - ab_t) eps with eps drawn at per-parameter variance sigma. On the
residual y = x - x_init this is a textbook diffusion, so posterior means
and DDIM updates carry over by substitution. The denoiser predicts the
clean pair directly and is conditioned per frame on observation features,
a penetration scalar, closed-form reprojection gradients, and boxes, with
a timestep embedding mixed into the adaptive norms.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .body import NUM_JOINTS
from .camera import reprojection_energy
from .errors import ConfigError, ModelNotReadyError
from .motion import FRAME_DIM, packed_joints, split_packed
from .nets import DualBranchStack, TimestepEmbedding, zero_module
from .prior import PARAM_BLOCK

FEATURE_DIM = 64
MAX_BETA = 0.999


@dataclass
class DiffusionSchedule:
    num_steps: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bar: torch.Tensor
    alpha_bar_prev: torch.Tensor
    posterior_variance_coeff: torch.Tensor  # beta tilde


def make_schedule(num_steps: int) -> DiffusionSchedule:
    """Cosine cumulative-alpha schedule with capped betas."""
    if num_steps < 2:
        raise ConfigError("diffusion needs at least 2 timesteps")

    def alpha_bar_fn(u: float) -> float:
        return math.cos((u + 0.008) / 1.008 * math.pi / 2) ** 2

    betas = []
    for i in range(num_steps):
        lo = alpha_bar_fn(i / num_steps)
        hi = alpha_bar_fn((i + 1) / num_steps)
        betas.append(min(1.0 - hi / lo, MAX_BETA))
    betas = torch.tensor(betas, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bar = torch.cumprod(alphas, dim=0)
    alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
    posterior = betas * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return DiffusionSchedule(
        num_steps=num_steps,
        betas=betas,
        alphas=alphas,
        alpha_bar=alpha_bar,
        alpha_bar_prev=alpha_bar_prev,
        posterior_variance_coeff=posterior,
    )


def _shape_like(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Cast schedule values and pad dims so they broadcast over like."""
    out = values.to(like.dtype)
    while out.ndim < like.ndim:
        out = out.unsqueeze(-1)
    return out


def _gather(values: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
    """Pick schedule entries for (possibly batched) t, shaped to broadcast."""
    return _shape_like(values[torch.as_tensor(t, dtype=torch.int64)], like)


def forward_diffuse(
    schedule: DiffusionSchedule,
    x0: torch.Tensor,
    x_init: torch.Tensor,
    sigma: torch.Tensor,
    t,
    eps: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Shifted forward process at step t.

    When eps is omitted it is drawn with per-parameter standard deviation
    sqrt(sigma); a supplied eps is used as-is (already scaled).
    """
    if x0.shape != x_init.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x_init.shape)}")
    if eps is None:
        eps = torch.sqrt(sigma) * torch.randn(x0.shape, generator=generator)
    ab = _gather(schedule.alpha_bar, t, x0)
    return x_init + torch.sqrt(ab) * (x0 - x_init) + torch.sqrt(1.0 - ab) * eps


@dataclass
class GuidanceCondition:
    """Per-frame conditioning for the denoiser.

    features: B X 2 X N X FEATURE_DIM (per person)
    penetration: B X N nonnegative scalars, shared by both people
    proj_grads: B X 2 X N X K X 3 reprojection gradients per person
    bbox: B X 2 X N X 4 boxes per person, in image-normalized units
    mask_flags: records which components were zeroed per batch item
    """

    features: torch.Tensor
    penetration: torch.Tensor
    proj_grads: torch.Tensor
    bbox: torch.Tensor
    mask_flags: dict

    def person(self, which: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.features[:, which], self.proj_grads[:, which], self.bbox[:, which]


def assemble_condition(
    features: torch.Tensor,
    pen_value: torch.Tensor,
    proj_grads: torch.Tensor,
    bbox: torch.Tensor,
    mask_rate: float = 0.0,
    training: bool = False,
    generator: torch.Generator | None = None,
) -> GuidanceCondition:
    """Bundle guidance inputs, applying train-time condition dropout.

    Features and projection gradients are independently zeroed per batch
    item with probability mask_rate; the penetration value is never masked.
    """
    if not 0.0 <= mask_rate <= 1.0:
        raise ConfigError("mask_rate must lie in [0, 1]")
    b = features.shape[0]
    feat_mask = torch.zeros(b, dtype=torch.bool)
    grad_mask = torch.zeros(b, dtype=torch.bool)
    if training and mask_rate > 0.0:
        feat_mask = torch.rand(b, generator=generator) < mask_rate
        grad_mask = torch.rand(b, generator=generator) < mask_rate
        features = features.clone()
        proj_grads = proj_grads.clone()
        features[feat_mask] = 0.0
        proj_grads[grad_mask] = 0.0
    return GuidanceCondition(
        features=features,
        penetration=pen_value,
        proj_grads=proj_grads,
        bbox=bbox,
        mask_flags={"features": feat_mask, "proj_grads": grad_mask},
    )


class ObservationEncoder(nn.Module):
    """Maps 2D keypoints, confidences, and a box to per-frame features.

    The observation stand-in for image features: joints are normalized by
    the focal length around the principal point, the box by the image size.
    Frames whose confidences are all zero return a learned
    missing-observation embedding instead.
    """

    def __init__(self, feature_dim: int = FEATURE_DIM):
        super().__init__()
        in_dim = NUM_JOINTS * 3 + 4
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, 128), nn.SiLU(), nn.Linear(128, feature_dim)
        )
        self.missing = nn.Parameter(torch.zeros(feature_dim))

    def forward(
        self,
        keypoints: torch.Tensor,  # ... X N X K X 2 (pixels)
        confidence: torch.Tensor, # ... X N X K
        bbox: torch.Tensor,       # ... X N X 4 (pixels)
        camera,
    ) -> torch.Tensor:
        scale = torch.tensor([camera.fx, camera.fy], dtype=keypoints.dtype)
        center = torch.tensor([camera.cx, camera.cy], dtype=keypoints.dtype)
        kp = (keypoints - center) / scale
        kp = kp * confidence.unsqueeze(-1)  # occluded joints carry no signal
        size = torch.tensor(
            [camera.width, camera.height, camera.width, camera.height],
            dtype=bbox.dtype,
        )
        flat = torch.cat(
            [kp.flatten(-2), confidence, bbox / size], dim=-1
        )
        out = self.mlp(flat)
        missing = (confidence.sum(dim=-1, keepdim=True) == 0)
        return torch.where(missing, self.missing.expand_as(out), out)


class DualBranchDenoiser(nn.Module):
    """Predicts the clean pair from the diffused pair and the condition."""

    def __init__(
        self,
        num_blocks: int = 4,
        heads: int = 4,
        width: int = 256,
        ff_hidden: int = 512,
        feature_dim: int = FEATURE_DIM,
    ):
        super().__init__()
        self.width = width
        self.embed = nn.Linear(2 * FRAME_DIM, width)
        self.stack = DualBranchStack(num_blocks, width, heads, ff_hidden, width)
        self.head = nn.Sequential(
            nn.LayerNorm(width), zero_module(nn.Linear(width, FRAME_DIM))
        )
        self.t_embed = TimestepEmbedding(width)
        self.pen_embed = nn.Sequential(nn.Linear(1, 16), nn.SiLU(), nn.Linear(16, 16))
        cond_in = feature_dim + 16 + NUM_JOINTS * 3 + 4
        self.cond_proj = nn.Linear(cond_in, width)
        self.observation_encoder = ObservationEncoder(feature_dim)
        self.trained = False

    def _branch_condition(
        self, condition: GuidanceCondition, which: int, t_vec: torch.Tensor
    ) -> torch.Tensor:
        feats, grads, bbox = condition.person(which)
        pen = self.pen_embed(condition.penetration.unsqueeze(-1))
        raw = torch.cat([feats, pen, grads.flatten(-2), bbox], dim=-1)
        return self.cond_proj(raw) + t_vec.unsqueeze(1)

    def forward(
        self,
        x_a: torch.Tensor,
        x_b: torch.Tensor,
        condition: GuidanceCondition,
        t,
        x_init: tuple[torch.Tensor, torch.Tensor],
        single_branch: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """x_a, x_b: B X N X FRAME_DIM diffused inputs; returns clean pair.

        The clean estimate is predicted as a correction on top of the
        initial estimate the forward process shifts toward. The output
        head starts at zero, so an untrained model reproduces the initial
        estimate exactly and sampling degenerates to the identity.
        """
        t = torch.as_tensor(t, dtype=torch.int64)
        if t.ndim == 0:
            t = t.expand(x_a.shape[0])
        init_a, init_b = x_init
        t_vec = self.t_embed(t)
        cond_a = self._branch_condition(condition, 0, t_vec)
        cond_b = self._branch_condition(condition, 1, t_vec)
        h_a, h_b = self.stack(
            self.embed(torch.cat([x_a, init_a], dim=-1)),
            self.embed(torch.cat([x_b, init_b], dim=-1)),
            cond_a,
            cond_b,
            single_branch=single_branch,
        )
        return init_a + self.head(h_a), init_b + self.head(h_b)


def denoise_step(
    x_t: tuple[torch.Tensor, torch.Tensor],
    condition: GuidanceCondition,
    t: int,
    model: DualBranchDenoiser,
    schedule: DiffusionSchedule,
    x_init: tuple[torch.Tensor, torch.Tensor],
    sigma: tuple[torch.Tensor, torch.Tensor],
):
    """Posterior of the previous step under the shifted process.

    Returns ((mean_a, mean_b), (var_a, var_b), (pred_a, pred_b)). On the
    residual y = x - x_init the process is standard, so the usual posterior
    mean applies to y and shifts back; the variance is beta-tilde times the
    per-parameter sigma.
    """
    if not model.trained:
        raise ModelNotReadyError("diffusion model has not been trained or loaded")
    xa, xb = x_t
    pred_a, pred_b = model(xa, xb, condition, t, x_init)

    t_idx = torch.as_tensor(t, dtype=torch.int64)
    ab = schedule.alpha_bar[t_idx]
    ab_prev = schedule.alpha_bar_prev[t_idx]
    beta = schedule.betas[t_idx]
    alpha = schedule.alphas[t_idx]
    coef0 = _shape_like(torch.sqrt(ab_prev) * beta / (1.0 - ab), xa)
    coeft = _shape_like(torch.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab), xa)
    bt = _shape_like(schedule.posterior_variance_coeff[t_idx], xa)

    means = []
    variances = []
    for x, init, pred, sig in ((xa, x_init[0], pred_a, sigma[0]), (xb, x_init[1], pred_b, sigma[1])):
        y_t = x - init
        y0 = pred - init
        means.append(init + coef0 * y0 + coeft * y_t)
        variances.append(bt * sig)
    return (means[0], means[1]), (variances[0], variances[1]), (pred_a, pred_b)


def ddim_timesteps(num_train_steps: int, steps: int) -> list[int]:
    """Evenly spaced timestep subsequence, descending, includes the ends."""
    if steps < 1:
        raise ConfigError("need at least one sampling step")
    if steps == 1:
        return [num_train_steps - 1]
    raw = torch.linspace(0, num_train_steps - 1, steps)
    ts = sorted({int(round(float(v))) for v in raw}, reverse=True)
    return ts


def ddim_sample(
    x_init: tuple[torch.Tensor, torch.Tensor],
    sigma: tuple[torch.Tensor, torch.Tensor],
    model: DualBranchDenoiser,
    schedule: DiffusionSchedule,
    conditions_provider,
    steps: int = 5,
    prior_project=None,
    generator: torch.Generator | None = None,
    start_noise_scale: float = 1.0,
    single_branch: bool = False,
):
    """Deterministic DDIM adaption from the initial distribution.

    conditions_provider(x_a, x_b, t) -> GuidanceCondition is called after
    the optional prior projection each timestep, so penetration values and
    projection gradients always describe the pair the model actually sees.
    prior_project(x_a, x_b) -> (x_a, x_b) hooks in the interaction prior.

    Returns ((x_a, x_b), (sigma_a, sigma_b), trace) where trace holds one
    record per step.
    """
    if not model.trained:
        raise ModelNotReadyError("diffusion model has not been trained or loaded")
    ts = ddim_timesteps(schedule.num_steps, steps)
    xa, xb = x_init[0].clone(), x_init[1].clone()
    ab_start = float(schedule.alpha_bar[ts[0]])
    if start_noise_scale > 0.0:
        scale = start_noise_scale * math.sqrt(1.0 - ab_start)
        xa = xa + scale * torch.sqrt(sigma[0]) * torch.randn(xa.shape, generator=generator)
        xb = xb + scale * torch.sqrt(sigma[1]) * torch.randn(xb.shape, generator=generator)

    trace = []
    model.eval()
    with torch.no_grad():
        for i, t in enumerate(ts):
            if prior_project is not None:
                xa, xb = prior_project(xa, xb)
            condition = conditions_provider(xa, xb, t)
            pred_a, pred_b = model(
                xa, xb, condition, t, x_init, single_branch=single_branch
            )

            ab_t = float(schedule.alpha_bar[t])
            ab_prev = float(schedule.alpha_bar[ts[i + 1]]) if i + 1 < len(ts) else 1.0
            new = []
            for x, init, pred in ((xa, x_init[0], pred_a), (xb, x_init[1], pred_b)):
                y_t = x - init
                y0 = pred - init
                eps_hat = (y_t - math.sqrt(ab_t) * y0) / math.sqrt(max(1.0 - ab_t, 1e-12))
                y_prev = math.sqrt(ab_prev) * y0 + math.sqrt(max(1.0 - ab_prev, 0.0)) * eps_hat
                new.append(init + y_prev)
            step_delta = float((new[0] - xa).norm() + (new[1] - xb).norm())
            xa, xb = new
            trace.append(
                {
                    "step": i,
                    "t": int(t),
                    "penetration": float(condition.penetration.mean()),
                    "delta": step_delta,
                }
            )
        t_last = ts[-1]
        bt = float(schedule.posterior_variance_coeff[t_last])
        sigma_out = (bt * sigma[0], bt * sigma[1])
    return (xa, xb), sigma_out, trace


def capsule_penetration(
    joints_a: torch.Tensor,
    joints_b: torch.Tensor,
    parents: list[int],
    radii: torch.Tensor,
) -> torch.Tensor:
    """Differentiable inter-person overlap of bone capsules.

    joints: ... X K X 3. Every bone of one person is a segment with a
    radius; overlapping cross-person capsule pairs contribute the squared
    overlap depth. Serves as the training-time penetration term where the
    exact mesh energy is not differentiable; evaluation always uses the
    mesh. Returns ... (per leading batch shape).
    """
    bones = [(p, c) for c, p in enumerate(parents) if p >= 0]
    pa = torch.stack([joints_a[..., p, :] for p, _ in bones], dim=-2)
    qa = torch.stack([joints_a[..., c, :] for _, c in bones], dim=-2)
    pb = torch.stack([joints_b[..., p, :] for p, _ in bones], dim=-2)
    qb = torch.stack([joints_b[..., c, :] for _, c in bones], dim=-2)

    d = _segment_segment_distance(
        pa.unsqueeze(-2), qa.unsqueeze(-2), pb.unsqueeze(-3), qb.unsqueeze(-3)
    )  # ... X Ba X Bb
    rsum = radii.unsqueeze(-1) + radii.unsqueeze(-2)
    overlap = torch.relu(rsum - d)
    return (overlap**2).sum(dim=(-2, -1))


def _segment_segment_distance(p1, q1, p2, q2) -> torch.Tensor:
    """Closest distance between segments [p1,q1] and [p2,q2], broadcastable."""
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = (d1 * d1).sum(-1)
    e = (d2 * d2).sum(-1)
    f = (d2 * r).sum(-1)
    c = (d1 * r).sum(-1)
    b = (d1 * d2).sum(-1)
    denom = a * e - b * b
    s = torch.where(denom > 1e-12, (b * f - c * e) / denom.clamp_min(1e-12), torch.zeros_like(denom))
    s = s.clamp(0.0, 1.0)
    t = torch.where(e > 1e-12, (b * s + f) / e.clamp_min(1e-12), torch.zeros_like(e))
    t_clamped = t.clamp(0.0, 1.0)
    # Re-solve s for the clamped t, then clamp again (Ericson's method).
    s = torch.where(a > 1e-12, (b * t_clamped - c) / a.clamp_min(1e-12), torch.zeros_like(a))
    s = s.clamp(0.0, 1.0)
    t = torch.where(e > 1e-12, (b * s + f) / e.clamp_min(1e-12), torch.zeros_like(e))
    t = t.clamp(0.0, 1.0)
    c1 = p1 + s.unsqueeze(-1) * d1
    c2 = p2 + t.unsqueeze(-1) * d2
    return torch.linalg.vector_norm(c1 - c2, dim=-1)


def diffusion_training_loss(
    pred_a: torch.Tensor,
    pred_b: torch.Tensor,
    gt_a: torch.Tensor,
    gt_b: torch.Tensor,
    template,
    camera,
    keypoints: torch.Tensor,   # B X 2 X N X K X 2
    confidence: torch.Tensor,  # B X 2 X N X K
    world_rot: torch.Tensor,   # B X 3 X 3 canonical->camera rotation
    world_pivot: torch.Tensor, # B X 3
    pen_value: torch.Tensor,
    weights: dict | None = None,
) -> tuple[torch.Tensor, dict]:
    """Six-term adaption loss: reprojection, parameters, joints, velocity,
    interaction, penetration. Each term is reported separately; weights
    default to 1. Reprojection residuals are measured in normalized image
    units (pixels over focal length) so the default weights are balanced.
    pen_value is handed in by the caller (differentiable proxy in training).
    """
    w = {"reproj": 1.0, "smpl": 1.0, "joint": 1.0, "vel": 1.0, "int": 1.0, "pen": 1.0}
    if weights:
        w.update(weights)

    l_smpl = ((pred_a[..., :PARAM_BLOCK] - gt_a[..., :PARAM_BLOCK]) ** 2).mean() + (
        (pred_b[..., :PARAM_BLOCK] - gt_b[..., :PARAM_BLOCK]) ** 2
    ).mean()

    pj_a = packed_joints(pred_a, template)
    pj_b = packed_joints(pred_b, template)
    gj_a = packed_joints(gt_a, template)
    gj_b = packed_joints(gt_b, template)
    l_joint = ((pj_a - gj_a) ** 2).mean() + ((pj_b - gj_b) ** 2).mean()
    l_vel = ((pj_a.diff(dim=1) - gj_a.diff(dim=1)) ** 2).mean() + (
        (pj_b.diff(dim=1) - gj_b.diff(dim=1)) ** 2
    ).mean()
    l_int = (((pj_a - pj_b).abs() - (gj_a - gj_b).abs()) ** 2).mean()

    # Back to the camera frame for projection: x_cam = world_rot @ x + pivot.
    focal = 0.5 * (camera.fx + camera.fy)
    l_reproj = torch.zeros(())
    for which, pj in ((0, pj_a), (1, pj_b)):
        cam_j = torch.einsum("bij,bnkj->bnki", world_rot, pj) + world_pivot[:, None, None, :]
        energy = reprojection_energy(
            camera, cam_j, keypoints[:, which], confidence[:, which]
        )
        l_reproj = l_reproj + (energy / focal**2).mean() / NUM_JOINTS

    l_pen = pen_value.mean() if torch.is_tensor(pen_value) else torch.tensor(float(pen_value))

    total = (
        w["reproj"] * l_reproj
        + w["smpl"] * l_smpl
        + w["joint"] * l_joint
        + w["vel"] * l_vel
        + w["int"] * l_int
        + w["pen"] * l_pen
    )
    breakdown = {
        "l_reproj": float(l_reproj.detach()),
        "l_smpl": float(l_smpl.detach()),
        "l_joint": float(l_joint.detach()),
        "l_vel": float(l_vel.detach()),
        "l_int": float(l_int.detach()),
        "l_pen": float(l_pen.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown


def save_denoiser(model: DualBranchDenoiser, schedule: DiffusionSchedule, path,
                  config_hash: str = "") -> None:
    import os

    payload = {
        "kind": "diffusion-checkpoint",
        "version": 1,
        "config_hash": config_hash,
        "model": model.state_dict(),
        "arch": {
            "num_blocks": len(model.stack.blocks),
            "heads": model.stack.blocks[0].attn_self.num_heads,
            "width": model.width,
            "ff_hidden": model.stack.blocks[0].ff[0].out_features,
            "feature_dim": model.observation_encoder.missing.shape[0],
        },
        "num_train_steps": schedule.num_steps,
        "trained": model.trained,
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_denoiser(path) -> tuple[DualBranchDenoiser, DiffusionSchedule]:
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "diffusion-checkpoint":
        raise ValueError(f"{path}: not a diffusion checkpoint")
    arch = payload["arch"]
    model = DualBranchDenoiser(
        num_blocks=arch["num_blocks"],
        heads=arch["heads"],
        width=arch["width"],
        ff_hidden=arch["ff_hidden"],
        feature_dim=arch["feature_dim"],
    )
    model.load_state_dict(payload["model"])
    model.trained = bool(payload.get("trained", True))
    model.eval()
    return model, make_schedule(payload["num_train_steps"])
