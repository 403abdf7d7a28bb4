"""Training loops for the interaction prior and the diffusion adaptor.

Both trainers are plain full-batch-sampling loops on AdamW with gradient
clipping; they log scalar terms at a fixed interval, checkpoint atomically,
and abort on non-finite losses while keeping the last finite state. All
randomness flows through explicitly seeded generators so a rerun of the
same config reproduces the same model.
"""

import copy
from dataclasses import dataclass

import numpy as np
import torch

from . import body as body_mod
from .body import BodyTemplate, PARENTS
from .camera import PinholeCamera
from .config import ExperimentConfig
from .diffusion import (
    DiffusionSchedule,
    DualBranchDenoiser,
    capsule_penetration,
    diffusion_training_loss,
    forward_diffuse,
    make_schedule,
)
from .errors import StageError
from .guidance import GuidanceContext, build_condition
from .motion import (
    FRAME_DIM,
    PairMotion,
    PersonMotion,
    canonicalize_pair,
    pack_pair,
    packed_joints,
    transform_pair,
)
from .prior import InteractionPrior, code_reset, ema_update, utilization, vqvae_loss
from .synth import load_ground_truth, load_observation
from .tracking import Detection, associate_tracks


@dataclass
class SequenceSample:
    """Everything one sequence contributes, already canonicalized."""

    seq_dir: str
    init_packed: torch.Tensor  # 2 X N X FRAME_DIM canonical
    gt_packed: torch.Tensor  # 2 X N X FRAME_DIM canonical
    sigma: torch.Tensor  # 2 X N X FRAME_DIM canonical variances
    keypoints: torch.Tensor  # 2 X N X K X 2 pixels
    confidence: torch.Tensor  # 2 X N X K
    bbox: torch.Tensor  # 2 X N X 4 pixels
    world_rot: torch.Tensor  # 3 X 3 canonical -> camera
    world_pivot: torch.Tensor  # 3
    camera: PinholeCamera


def canonical_sigma(sigma: torch.Tensor, rotation: torch.Tensor) -> torch.Tensor:
    """Diagonal variances after rotating the state into the canonical frame.

    A yaw rotation mixes the components of every 3-vector that lives in
    world coordinates: the two root-orientation columns and the
    translation. For independent components var' = (R*R) var; all local
    joint rotations and the shape are invariant.
    """
    rot2 = (rotation.to(sigma.dtype) ** 2)
    out = sigma.clone()
    lead = sigma.shape[:-1]
    root = sigma[..., 0:6].reshape(*lead, 2, 3)
    out[..., 0:6] = torch.einsum("ij,...cj->...ci", rot2, root).reshape(*lead, 6)
    out[..., FRAME_DIM - 3 :] = torch.einsum(
        "ij,...j->...i", rot2, sigma[..., FRAME_DIM - 3 :]
    )
    return out


def prepare_sample(seq_dir: str, template: BodyTemplate, cfg: ExperimentConfig) -> SequenceSample:
    """Load one sequence, associate tracks, and canonicalize."""
    record = load_observation(seq_dir)
    gt = load_ground_truth(seq_dir)

    init = record.initial
    detections = [
        [
            Detection(
                pose6d=init.person_a.pose6d[f].numpy(),
                shape=init.person_a.shape.numpy(),
                translation=init.person_a.translation[f].numpy(),
                bbox=record.bbox[0, f].numpy(),
            ),
            Detection(
                pose6d=init.person_b.pose6d[f].numpy(),
                shape=init.person_b.shape.numpy(),
                translation=init.person_b.translation[f].numpy(),
                bbox=record.bbox[1, f].numpy(),
            ),
        ]
        for f in range(init.num_frames)
    ]
    tracks = associate_tracks(detections, cfg.tracking)

    tracked = PairMotion(
        PersonMotion(
            pose6d=torch.from_numpy(tracks.pose6d[0]).to(torch.float32),
            shape=torch.from_numpy(tracks.shape[0, 0]).to(torch.float32),
            translation=torch.from_numpy(tracks.translation[0]).to(torch.float32),
        ),
        PersonMotion(
            pose6d=torch.from_numpy(tracks.pose6d[1]).to(torch.float32),
            shape=torch.from_numpy(tracks.shape[1, 0]).to(torch.float32),
            translation=torch.from_numpy(tracks.translation[1]).to(torch.float32),
        ),
    )

    init_canon, tf = canonicalize_pair(tracked, template)
    gt_canon = transform_pair(gt, tf)
    ia, ib = pack_pair(init_canon)
    ga, gb = pack_pair(gt_canon)
    sig = torch.stack(
        [canonical_sigma(record.sigma_a, tf.rotation), canonical_sigma(record.sigma_b, tf.rotation)]
    )
    return SequenceSample(
        seq_dir=seq_dir,
        init_packed=torch.stack([ia, ib]),
        gt_packed=torch.stack([ga, gb]),
        sigma=sig,
        keypoints=record.keypoints.clone(),
        confidence=record.confidence.clone(),
        bbox=torch.from_numpy(tracks.bbox).to(torch.float32),
        world_rot=tf.rotation.T.clone().to(torch.float32),
        world_pivot=tf.pivot.clone().to(torch.float32),
        camera=record.camera,
    )


def prepare_samples(
    seq_dirs: list[str], template: BodyTemplate, cfg: ExperimentConfig
) -> list[SequenceSample]:
    return [prepare_sample(d, template, cfg) for d in seq_dirs]


def _snapshot_prior(model: InteractionPrior) -> dict:
    # Codebook state dicts hand back live tensors; clone so later in-place
    # EMA updates cannot reach into the snapshot.
    return {
        "model": copy.deepcopy(model.state_dict()),
        "codebook_a": {k: v.clone() for k, v in model.codebook_a.state_dict().items()},
        "codebook_b": {k: v.clone() for k, v in model.codebook_b.state_dict().items()},
    }


def _restore_prior(model: InteractionPrior, snap: dict) -> None:
    from .prior import Codebook

    model.load_state_dict(snap["model"])
    model.codebook_a = Codebook.from_state_dict(snap["codebook_a"])
    model.codebook_b = Codebook.from_state_dict(snap["codebook_b"])


def train_prior(
    cfg: ExperimentConfig,
    template: BodyTemplate,
    samples: list[SequenceSample],
    reset: bool = True,
    seed: int | None = None,
    steps: int | None = None,
) -> tuple[InteractionPrior, list[dict]]:
    """Train the VQ codebook prior on ground-truth canonical pairs.

    ``reset`` toggles the dead-code re-seeding step (kept separate so the
    with/without comparison can run the same seed). Returns the trained
    model and the log rows.
    """
    p = cfg.prior
    seed = p.seed if seed is None else seed
    num_steps = p.steps if steps is None else steps
    if not samples:
        raise StageError("train-prior", "no training sequences")

    torch.manual_seed(seed)
    model = InteractionPrior(
        num_blocks=p.blocks,
        heads=p.heads,
        width=p.width,
        ff_hidden=p.ff_hidden,
        num_codes=p.num_codes,
        seed=seed,
    )
    g = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.AdamW(model.parameters(), lr=p.lr)
    data = torch.stack([s.gt_packed for s in samples])  # S X 2 X N X D

    logs: list[dict] = []
    last_good = _snapshot_prior(model)
    for step in range(num_steps):
        idx = torch.randint(0, data.shape[0], (p.batch_size,), generator=g)
        batch = data[idx]
        xa, xb = batch[:, 0].clone(), batch[:, 1].clone()
        # Swap augmentation keeps both codebooks on statistically identical
        # streams; the architecture itself is already symmetric.
        swap = torch.rand(p.batch_size, generator=g) < 0.5
        xa[swap], xb[swap] = batch[swap, 1], batch[swap, 0]

        recon_a, recon_b, z_pair, zq_pair, idx_a, idx_b = model(xa, xb)
        loss, parts = vqvae_loss(
            recon_a, recon_b, xa, xb, z_pair, zq_pair, p.alpha, template
        )
        if not torch.isfinite(loss):
            _restore_prior(model, last_good)
            logs.append({"step": step, "event": "non-finite loss, restored last good state"})
            break
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), p.grad_clip)
        opt.step()

        with torch.no_grad():
            z_a = z_pair[:, 0].detach().reshape(-1, model.width)
            z_b = z_pair[:, 1].detach().reshape(-1, model.width)
            ema_update(model.codebook_a, idx_a.reshape(-1), z_a, decay=p.ema_decay)
            ema_update(model.codebook_b, idx_b.reshape(-1), z_b, decay=p.ema_decay)
            n_reset = 0
            if reset and (step + 1) % p.reset_window == 0:
                _, ra = code_reset(model.codebook_a, p.reset_threshold, z_a, generator=g)
                _, rb = code_reset(model.codebook_b, p.reset_threshold, z_b, generator=g)
                n_reset = max(ra, 0) + max(rb, 0)

        if step % p.log_every == 0 or step == num_steps - 1:
            last_good = _snapshot_prior(model)
            logs.append(
                {
                    "step": step,
                    "l_rec": parts["l_rec"],
                    "l_commit": parts["l_commit"],
                    "total": parts["total"],
                    "util_a": utilization(model.codebook_a, idx_a),
                    "util_b": utilization(model.codebook_b, idx_b),
                    "n_reset": n_reset,
                }
            )
    model.trained = True
    model.eval()
    return model, logs


def loss_weights(cfg: ExperimentConfig) -> dict:
    d = cfg.diffusion
    return {
        "reproj": d.w_reproj,
        "smpl": d.w_smpl,
        "joint": d.w_joint,
        "vel": d.w_vel,
        "int": d.w_int,
        "pen": d.w_pen,
    }


def bone_radii() -> torch.Tensor:
    """Capsule radius per bone, in the order of the parent table's bones."""
    return torch.tensor(
        [body_mod._BONE_RADIUS[c] for c, p in enumerate(PARENTS) if p >= 0],
        dtype=torch.float32,
    )


def train_diffusion(
    cfg: ExperimentConfig,
    template: BodyTemplate,
    samples: list[SequenceSample],
    seed: int | None = None,
    steps: int | None = None,
) -> tuple[DualBranchDenoiser, DiffusionSchedule, list[dict]]:
    """Train the guided adaptor to recover clean pairs from diffused ones.

    Each step diffuses the ground truth toward the corrupted initial
    estimate at a random timestep, rebuilds the guidance condition from the
    diffused state (with train-time masking), and regresses the clean pair
    under the six-term loss. The penetration term uses the differentiable
    capsule proxy on the prediction.
    """
    d = cfg.diffusion
    seed = d.seed if seed is None else seed
    num_steps = d.steps if steps is None else steps
    if not samples:
        raise StageError("train-diffusion", "no training sequences")

    torch.manual_seed(seed)
    model = DualBranchDenoiser(
        num_blocks=d.blocks,
        heads=d.heads,
        width=d.width,
        ff_hidden=d.ff_hidden,
        feature_dim=d.feature_dim,
    )
    schedule = make_schedule(d.train_timesteps)
    g = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.AdamW(model.parameters(), lr=d.lr)

    init = torch.stack([s.init_packed for s in samples])
    gt = torch.stack([s.gt_packed for s in samples])
    sig = torch.stack([s.sigma for s in samples])
    kp = torch.stack([s.keypoints for s in samples])
    conf = torch.stack([s.confidence for s in samples])
    bbox = torch.stack([s.bbox for s in samples])
    rot = torch.stack([s.world_rot for s in samples])
    pivot = torch.stack([s.world_pivot for s in samples])
    camera = samples[0].camera
    radii = bone_radii()
    weights = loss_weights(cfg)

    logs: list[dict] = []
    last_good = copy.deepcopy(model.state_dict())
    for step in range(num_steps):
        idx = torch.randint(0, init.shape[0], (d.batch_size,), generator=g)
        t = torch.randint(0, schedule.num_steps, (d.batch_size,), generator=g)
        gt_a, gt_b = gt[idx, 0], gt[idx, 1]
        x_ta = forward_diffuse(schedule, gt_a, init[idx, 0], sig[idx, 0], t, generator=g)
        x_tb = forward_diffuse(schedule, gt_b, init[idx, 1], sig[idx, 1], t, generator=g)

        ctx = GuidanceContext(
            template=template,
            camera=camera,
            keypoints=kp[idx],
            confidence=conf[idx],
            bbox=bbox[idx],
            world_rot=rot[idx],
            world_pivot=pivot[idx],
            pen_frames=d.pen_frames,
        )
        condition = build_condition(
            model, x_ta, x_tb, ctx, training=True, mask_rate=d.mask_rate, generator=g
        )
        pred_a, pred_b = model(x_ta, x_tb, condition, t, (init[idx, 0], init[idx, 1]))
        pen = capsule_penetration(
            packed_joints(pred_a, template), packed_joints(pred_b, template), PARENTS, radii
        ).mean()
        loss, parts = diffusion_training_loss(
            pred_a,
            pred_b,
            gt_a,
            gt_b,
            template,
            camera,
            kp[idx],
            conf[idx],
            rot[idx],
            pivot[idx],
            pen,
            weights,
        )
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            logs.append({"step": step, "event": "non-finite loss, restored last good state"})
            break
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), d.grad_clip)
        opt.step()

        if step % d.log_every == 0 or step == num_steps - 1:
            last_good = copy.deepcopy(model.state_dict())
            row = {"step": step}
            row.update(parts)
            logs.append(row)
    model.trained = True
    model.eval()
    return model, schedule, logs
