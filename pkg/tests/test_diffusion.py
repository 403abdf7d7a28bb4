"""Diffusion schedule, shifted forward process, sampler, and training loss.

The schedule is rebuilt independently from the cosine definition; the
forward process is compared against its closed form and against Monte
Carlo marginals; the sampler is driven by synthetic models with known
behavior (a zero correction and a perfect clean-state oracle), which pin
down the identity and convergence properties exactly.
"""

import math

import numpy as np
import pytest
import torch

from duopose.body import NUM_JOINTS
from duopose.camera import PinholeCamera, project
from duopose.errors import ConfigError, ModelNotReadyError
from duopose.motion import FRAME_DIM, packed_joints
from duopose.diffusion import (
    DualBranchDenoiser,
    GuidanceCondition,
    ObservationEncoder,
    assemble_condition,
    capsule_penetration,
    ddim_sample,
    ddim_timesteps,
    denoise_step,
    diffusion_training_loss,
    forward_diffuse,
    load_denoiser,
    make_schedule,
    save_denoiser,
)
from duopose.rotation import identity_rot6d, yaw_matrix


def rest_packed(batch=2, frames=4, scale=0.15, seed=0, depth=3.0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    rest = torch.cat(
        [identity_rot6d(NUM_JOINTS).reshape(-1), torch.zeros(FRAME_DIM - NUM_JOINTS * 6)]
    )
    x = rest.expand(batch, frames, -1).clone()
    x = x + scale * torch.randn(x.shape, generator=g)
    x[..., -1] += depth
    return x


def dummy_condition(batch: int, frames: int) -> GuidanceCondition:
    return GuidanceCondition(
        features=torch.zeros(batch, 2, frames, 64),
        penetration=torch.zeros(batch, frames),
        proj_grads=torch.zeros(batch, 2, frames, NUM_JOINTS, 3),
        bbox=torch.zeros(batch, 2, frames, 4),
        mask_flags={},
    )


# --- schedule ----------------------------------------------------------------


def test_schedule_matches_independent_cosine_rebuild():
    t_steps = 100
    sched = make_schedule(t_steps)

    def ab(u: float) -> float:
        return math.cos((u + 0.008) / 1.008 * math.pi / 2) ** 2

    betas = np.array(
        [min(1.0 - ab((i + 1) / t_steps) / ab(i / t_steps), 0.999) for i in range(t_steps)]
    )
    np.testing.assert_allclose(sched.betas.numpy(), betas, atol=1e-10)
    np.testing.assert_allclose(sched.alphas.numpy(), 1.0 - betas, atol=1e-10)
    np.testing.assert_allclose(sched.alpha_bar.numpy(), np.cumprod(1.0 - betas), atol=1e-10)


def test_schedule_invariants():
    sched = make_schedule(100)
    ab = sched.alpha_bar.numpy()
    assert (np.diff(ab) < 0).all()  # strictly decreasing
    assert ab[0] >= 0.999
    assert ab[-1] < 0.01
    assert (sched.betas.numpy() > 0).all() and (sched.betas.numpy() <= 0.999).all()
    # alpha_bar_prev is the shift with a leading one.
    np.testing.assert_allclose(sched.alpha_bar_prev[1:].numpy(), ab[:-1], atol=1e-15)
    assert float(sched.alpha_bar_prev[0]) == 1.0
    # beta-tilde consistency with its defining ratio.
    want = sched.betas.numpy() * (1.0 - sched.alpha_bar_prev.numpy()) / (1.0 - ab)
    np.testing.assert_allclose(sched.posterior_variance_coeff.numpy(), want, atol=1e-10)
    # Composition: alpha_bar ratios recover alpha.
    np.testing.assert_allclose(ab[1:] / ab[:-1], sched.alphas[1:].numpy(), atol=1e-10)


def test_schedule_rejects_tiny():
    with pytest.raises(ConfigError):
        make_schedule(1)


# --- forward process ---------------------------------------------------------


def test_forward_diffuse_matches_closed_form():
    sched = make_schedule(50)
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(3, 5, generator=g, dtype=torch.float64)
    init = torch.randn(3, 5, generator=g, dtype=torch.float64)
    sigma = torch.rand(3, 5, generator=g, dtype=torch.float64) + 0.1
    eps = torch.sqrt(sigma) * torch.randn(3, 5, generator=g, dtype=torch.float64)
    for t in (0, 7, 23, 49):
        got = forward_diffuse(sched, x0, init, sigma, t, eps=eps)
        ab = float(sched.alpha_bar[t])
        want = init + math.sqrt(ab) * (x0 - init) + math.sqrt(1.0 - ab) * eps
        np.testing.assert_allclose(got.numpy(), want.numpy(), atol=1e-12)


def test_forward_diffuse_endpoints():
    sched = make_schedule(100)
    x0 = torch.tensor([[1.0, -2.0, 0.5]])
    init = torch.tensor([[0.2, 0.4, -0.3]])
    sigma = torch.ones(1, 3)
    zero = torch.zeros(1, 3)
    # The noise-free start of the chain is essentially the clean state.
    start = forward_diffuse(sched, x0, init, sigma, 0, eps=zero)
    np.testing.assert_allclose(start.numpy(), x0.numpy(), atol=0.02)
    # The noise-free end of the chain collapses onto the initial estimate.
    end = forward_diffuse(sched, x0, init, sigma, 99, eps=zero)
    drift = np.abs(end.numpy() - init.numpy()).max()
    assert drift <= 0.05 * float((x0 - init).abs().max())


def test_forward_diffuse_batched_timesteps():
    sched = make_schedule(20)
    x0 = torch.zeros(4, 2)
    init = torch.ones(4, 2)
    sigma = torch.ones(4, 2)
    t = torch.tensor([0, 5, 10, 19])
    got = forward_diffuse(sched, x0, init, sigma, t, eps=torch.zeros(4, 2))
    for b in range(4):
        ab = float(sched.alpha_bar[int(t[b])])
        np.testing.assert_allclose(got[b].numpy(), 1.0 - math.sqrt(ab), atol=1e-6)


def test_forward_diffuse_shape_mismatch_raises():
    sched = make_schedule(10)
    with pytest.raises(ValueError):
        forward_diffuse(sched, torch.zeros(2, 3), torch.zeros(3, 3), torch.ones(2, 3), 0)


def test_forward_diffuse_monte_carlo_marginal():
    """Sample mean within 3 standard errors of the analytic marginal mean."""
    sched = make_schedule(100)
    n = 10_000
    x0 = torch.tensor([1.5, -0.8, 0.3]).expand(n, 3)
    init = torch.tensor([0.1, 0.9, -0.4]).expand(n, 3)
    sigma = torch.tensor([0.5, 1.0, 2.0]).expand(n, 3)
    g = torch.Generator().manual_seed(2024)
    for t in (10, 50, 90):
        draws = forward_diffuse(sched, x0, init, sigma, t, generator=g)
        ab = float(sched.alpha_bar[t])
        mean = init[0] + math.sqrt(ab) * (x0[0] - init[0])
        se = torch.sqrt((1.0 - ab) * sigma[0] / n)
        err = (draws.mean(dim=0) - mean).abs()
        assert (err <= 3.0 * se).all(), f"t={t}: {err} vs 3*{se}"
        # Spread sanity: sample std within 5% of sqrt((1-ab) sigma).
        want_std = torch.sqrt((1.0 - ab) * sigma[0])
        np.testing.assert_allclose(draws.std(dim=0).numpy(), want_std.numpy(), rtol=0.05)


# --- timestep subsequence ----------------------------------------------------


def test_ddim_timesteps_properties():
    ts = ddim_timesteps(100, 5)
    assert len(ts) == 5
    assert ts[0] == 99 and ts[-1] == 0
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert ddim_timesteps(100, 1) == [99]
    full = ddim_timesteps(10, 10)
    assert full == list(range(9, -1, -1))
    with pytest.raises(ConfigError):
        ddim_timesteps(100, 0)


# --- denoiser and sampler ----------------------------------------------------


def fresh_denoiser(seed: int = 0) -> DualBranchDenoiser:
    torch.manual_seed(seed)
    return DualBranchDenoiser(num_blocks=1, heads=2, width=32, ff_hidden=48, feature_dim=64)


def test_untrained_model_predicts_the_initial_estimate():
    model = fresh_denoiser()
    init = (rest_packed(seed=1), rest_packed(seed=2))
    x_t = (rest_packed(seed=3), rest_packed(seed=4))
    cond = dummy_condition(2, 4)
    pred_a, pred_b = model(x_t[0], x_t[1], cond, 5, init)
    np.testing.assert_allclose(pred_a.detach().numpy(), init[0].numpy(), atol=1e-6)
    np.testing.assert_allclose(pred_b.detach().numpy(), init[1].numpy(), atol=1e-6)


def test_untrained_sampler_raises():
    model = fresh_denoiser()
    sched = make_schedule(100)
    init = (rest_packed(seed=1), rest_packed(seed=2))
    sigma = (torch.ones(2, 4, FRAME_DIM), torch.ones(2, 4, FRAME_DIM))
    with pytest.raises(ModelNotReadyError):
        ddim_sample(init, sigma, model, sched, lambda a, b, t: dummy_condition(2, 4))


def test_zero_correction_sampler_is_identity():
    """With a zero-initialized head and no start noise the adaption returns
    the initial estimate bit for bit at every step count."""
    model = fresh_denoiser()
    model.trained = True
    sched = make_schedule(100)
    init = (rest_packed(seed=5), rest_packed(seed=6))
    sigma = (0.1 * torch.ones(2, 4, FRAME_DIM), 0.1 * torch.ones(2, 4, FRAME_DIM))
    for steps in (1, 3, 5):
        (xa, xb), _, trace = ddim_sample(
            init, sigma, model, sched,
            lambda a, b, t: dummy_condition(2, 4),
            steps=steps, start_noise_scale=0.0,
        )
        np.testing.assert_allclose(xa.numpy(), init[0].numpy(), atol=1e-5)
        np.testing.assert_allclose(xb.numpy(), init[1].numpy(), atol=1e-5)
        assert len(trace) == steps


class PerfectModel:
    """Oracle model that always answers with the true clean pair."""

    trained = True

    def __init__(self, gt_a: torch.Tensor, gt_b: torch.Tensor):
        self.gt = (gt_a, gt_b)

    def eval(self):
        return self

    def __call__(self, x_a, x_b, condition, t, x_init, single_branch=False):
        return self.gt


def test_sampler_converges_with_perfect_model():
    sched = make_schedule(100)
    gt = (rest_packed(seed=7), rest_packed(seed=8))
    init = (gt[0] + 0.3, gt[1] - 0.2)
    sigma = (torch.ones(2, 4, FRAME_DIM), torch.ones(2, 4, FRAME_DIM))
    model = PerfectModel(*gt)
    for steps in (1, 5, 10):
        (xa, xb), _, _ = ddim_sample(
            init, sigma, model, sched,
            lambda a, b, t: dummy_condition(2, 4),
            steps=steps, start_noise_scale=1.0,
            generator=torch.Generator().manual_seed(0),
        )
        np.testing.assert_allclose(xa.numpy(), gt[0].numpy(), atol=1e-5)
        np.testing.assert_allclose(xb.numpy(), gt[1].numpy(), atol=1e-5)


def test_sampler_prior_hook_and_trace():
    sched = make_schedule(100)
    gt = (rest_packed(seed=9), rest_packed(seed=10))
    init = (gt[0] + 0.1, gt[1] + 0.1)
    sigma = (torch.ones(2, 4, FRAME_DIM), torch.ones(2, 4, FRAME_DIM))
    calls = []

    def fake_project(xa, xb):
        calls.append(1)
        return xa, xb

    (_, _), _, trace = ddim_sample(
        init, sigma, PerfectModel(*gt), sched,
        lambda a, b, t: dummy_condition(2, 4),
        steps=5, prior_project=fake_project, start_noise_scale=0.0,
    )
    assert len(calls) == 5  # projection hook runs every step
    assert [r["step"] for r in trace] == list(range(5))
    ts = [r["t"] for r in trace]
    assert ts == ddim_timesteps(100, 5)
    assert all("penetration" in r and "delta" in r for r in trace)


def test_denoise_step_posterior_matches_hand_formula():
    model = fresh_denoiser()
    model.trained = True
    sched = make_schedule(50)
    init = (rest_packed(seed=11), rest_packed(seed=12))
    x_t = (init[0] + 0.2, init[1] - 0.1)
    sigma = (0.3 * torch.ones(2, 4, FRAME_DIM), 0.7 * torch.ones(2, 4, FRAME_DIM))
    t = 17
    means, variances, preds = denoise_step(
        x_t, dummy_condition(2, 4), t, model, sched, init, sigma
    )
    # Untrained: prediction is the initial estimate, so y0 = 0 and the
    # posterior mean reduces to init + coeft * (x_t - init).
    ab = float(sched.alpha_bar[t])
    ab_prev = float(sched.alpha_bar_prev[t])
    alpha = float(sched.alphas[t])
    coeft = math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    np.testing.assert_allclose(preds[0].detach().numpy(), init[0].numpy(), atol=1e-6)
    want_mean = init[0] + coeft * (x_t[0] - init[0])
    np.testing.assert_allclose(means[0].detach().numpy(), want_mean.numpy(), atol=1e-5)
    bt = float(sched.posterior_variance_coeff[t])
    np.testing.assert_allclose(variances[1].numpy(), (bt * sigma[1]).numpy(), rtol=1e-5)


def test_single_branch_changes_trained_output():
    model = fresh_denoiser(seed=3)
    # Give the head nonzero weights so branches actually mix.
    torch.manual_seed(4)
    for p in model.head[-1].parameters():
        p.data = torch.randn(p.shape) * 0.05
    init = (rest_packed(seed=13), rest_packed(seed=14, scale=0.3))
    x_t = (init[0] + 0.05, init[1] - 0.05)
    cond = dummy_condition(2, 4)
    dual = model(x_t[0], x_t[1], cond, 3, init)
    single = model(x_t[0], x_t[1], cond, 3, init, single_branch=True)
    assert not torch.allclose(dual[0], single[0], atol=1e-7)


# --- condition assembly ------------------------------------------------------


def test_assemble_condition_masking_rules():
    g = torch.Generator().manual_seed(5)
    feats = torch.ones(64, 2, 4, 64)
    pen = torch.ones(64, 4)
    grads = torch.ones(64, 2, 4, NUM_JOINTS, 3)
    bbox = torch.ones(64, 2, 4, 4)
    cond = assemble_condition(feats, pen, grads, bbox, mask_rate=0.5, training=True, generator=g)
    f_masked = cond.mask_flags["features"]
    g_masked = cond.mask_flags["proj_grads"]
    assert 5 < int(f_masked.sum()) < 59  # some but not all
    assert torch.equal(cond.features[f_masked], torch.zeros_like(cond.features[f_masked]))
    assert torch.equal(cond.features[~f_masked], feats[~f_masked])
    assert torch.equal(cond.proj_grads[g_masked], torch.zeros_like(cond.proj_grads[g_masked]))
    # Penetration is never masked.
    assert torch.equal(cond.penetration, pen)
    # The caller's tensors stay untouched.
    assert torch.equal(feats, torch.ones(64, 2, 4, 64))


def test_assemble_condition_no_mask_outside_training():
    feats = torch.ones(8, 2, 4, 64)
    cond = assemble_condition(
        feats, torch.ones(8, 4), torch.ones(8, 2, 4, NUM_JOINTS, 3), torch.ones(8, 2, 4, 4),
        mask_rate=1.0, training=False,
    )
    assert torch.equal(cond.features, feats)
    assert not cond.mask_flags["features"].any()


def test_assemble_condition_rejects_bad_rate():
    with pytest.raises(ConfigError):
        assemble_condition(
            torch.ones(2, 2, 4, 64), torch.ones(2, 4),
            torch.ones(2, 2, 4, NUM_JOINTS, 3), torch.ones(2, 2, 4, 4),
            mask_rate=1.5,
        )


# --- observation encoder -----------------------------------------------------


def test_observation_encoder_shapes_and_missing_frames():
    torch.manual_seed(0)
    enc = ObservationEncoder(feature_dim=64)
    with torch.no_grad():
        enc.missing.copy_(torch.arange(64, dtype=torch.float32))
    camera = PinholeCamera()
    kp = 400 + 100 * torch.rand(2, 3, NUM_JOINTS, 2)
    conf = torch.ones(2, 3, NUM_JOINTS)
    conf[1, 2] = 0.0  # one frame fully unobserved
    bbox = torch.tensor([100.0, 120.0, 400.0, 500.0]).expand(2, 3, 4)
    out = enc(kp, conf, bbox, camera)
    assert out.shape == (2, 3, 64)
    np.testing.assert_allclose(
        out[1, 2].detach().numpy(), np.arange(64, dtype=np.float32)
    )
    assert not torch.allclose(out[1, 1], enc.missing)


def test_observation_encoder_ignores_keypoints_without_confidence():
    torch.manual_seed(1)
    enc = ObservationEncoder(feature_dim=64)
    camera = PinholeCamera()
    kp = 300 + 200 * torch.rand(1, 2, NUM_JOINTS, 2)
    conf = torch.ones(1, 2, NUM_JOINTS)
    conf[0, :, 5] = 0.0
    bbox = torch.tensor([0.0, 0.0, 1024.0, 1024.0]).expand(1, 2, 4)
    base = enc(kp, conf, bbox, camera)
    moved = kp.clone()
    moved[0, :, 5] += 250.0  # only the zero-confidence joint moves
    again = enc(moved, conf, bbox, camera)
    assert torch.equal(base, again)


# --- capsule proxy -----------------------------------------------------------


def test_capsule_penetration_two_bone_hand_case():
    parents = [-1, 0]
    radii = torch.tensor([0.1])
    joints_a = torch.tensor([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]])
    # Parallel bone 0.15 apart: overlap = 0.2 - 0.15 = 0.05.
    joints_b = joints_a + torch.tensor([0.0, 0.15, 0.0])
    got = capsule_penetration(joints_a, joints_b, parents, radii)
    np.testing.assert_allclose(got.numpy(), [0.05**2], rtol=1e-5)
    # Far apart: zero.
    joints_c = joints_a + torch.tensor([0.0, 5.0, 0.0])
    assert float(capsule_penetration(joints_a, joints_c, parents, radii)) == 0.0


def test_capsule_penetration_differentiable():
    parents = [-1, 0]
    radii = torch.tensor([0.1])
    joints_a = torch.tensor([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]], requires_grad=True)
    joints_b = torch.tensor([[[0.0, 0.12, 0.0], [1.0, 0.12, 0.0]]])
    loss = capsule_penetration(joints_a, joints_b, parents, radii).sum()
    loss.backward()
    assert torch.isfinite(joints_a.grad).all()
    assert float(joints_a.grad.abs().sum()) > 0


def test_capsule_penetration_monotone_in_depth():
    parents = [-1, 0]
    radii = torch.tensor([0.2])
    base = torch.tensor([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]])
    vals = [
        float(capsule_penetration(base, base + torch.tensor([0.0, dy, 0.0]), parents, radii))
        for dy in (0.35, 0.25, 0.15, 0.05)
    ]
    assert vals[0] < vals[1] < vals[2] < vals[3]


# --- training loss -----------------------------------------------------------


def loss_inputs(batch=2, frames=4):
    camera = PinholeCamera()
    gt_a = rest_packed(batch, frames, seed=20)
    gt_b = rest_packed(batch, frames, seed=21)
    yaw = yaw_matrix(torch.tensor(0.6))
    world_rot = yaw.T.expand(batch, 3, 3).contiguous()
    world_pivot = torch.tensor([0.1, -0.05, 2.8]).expand(batch, 3)
    return camera, gt_a, gt_b, world_rot, world_pivot


def project_keypoints(template, camera, packed, world_rot, world_pivot):
    j = packed_joints(packed, template)
    cam_j = torch.einsum("bij,bnkj->bnki", world_rot, j) + world_pivot[:, None, None, :]
    return project(camera, cam_j)


def test_training_loss_zero_at_ground_truth(template):
    camera, gt_a, gt_b, world_rot, world_pivot = loss_inputs()
    kp = torch.stack(
        [
            project_keypoints(template, camera, gt_a, world_rot, world_pivot),
            project_keypoints(template, camera, gt_b, world_rot, world_pivot),
        ],
        dim=1,
    )
    conf = torch.ones(2, 2, 4, NUM_JOINTS)
    total, parts = diffusion_training_loss(
        gt_a, gt_b, gt_a, gt_b, template, camera, kp, conf,
        world_rot, world_pivot, torch.zeros(()),
    )
    # Keypoints were generated by the same projection chain, so every term
    # vanishes; this pins the world transform direction used by the loss.
    assert parts["l_smpl"] == 0.0
    assert parts["l_joint"] == 0.0
    np.testing.assert_allclose(parts["l_reproj"], 0.0, atol=1e-9)
    np.testing.assert_allclose(float(total), 0.0, atol=1e-9)


def test_training_loss_terms_respond_to_errors(template):
    camera, gt_a, gt_b, world_rot, world_pivot = loss_inputs()
    kp = torch.stack(
        [
            project_keypoints(template, camera, gt_a, world_rot, world_pivot),
            project_keypoints(template, camera, gt_b, world_rot, world_pivot),
        ],
        dim=1,
    )
    conf = torch.ones(2, 2, 4, NUM_JOINTS)
    pred_a = gt_a.clone()
    pred_a[..., -3:] += 0.05
    total, parts = diffusion_training_loss(
        pred_a, gt_b, gt_a, gt_b, template, camera, kp, conf,
        world_rot, world_pivot, torch.tensor(0.25),
    )
    assert parts["l_smpl"] == 0.0  # translation sits outside the param block
    assert parts["l_joint"] > 0.0
    assert parts["l_reproj"] > 0.0
    assert parts["l_pen"] == 0.25
    assert float(total) > 0.0


def test_training_loss_weights_scale_terms(template):
    camera, gt_a, gt_b, world_rot, world_pivot = loss_inputs()
    kp = torch.zeros(2, 2, 4, NUM_JOINTS, 2)
    conf = torch.ones(2, 2, 4, NUM_JOINTS)
    _, base = diffusion_training_loss(
        gt_a, gt_b, gt_a, gt_b, template, camera, kp, conf,
        world_rot, world_pivot, torch.tensor(1.0),
    )
    total_scaled, _ = diffusion_training_loss(
        gt_a, gt_b, gt_a, gt_b, template, camera, kp, conf,
        world_rot, world_pivot, torch.tensor(1.0),
        weights={"pen": 3.0, "reproj": 0.0},
    )
    np.testing.assert_allclose(float(total_scaled), 3.0, atol=1e-6)
    assert base["l_pen"] == 1.0


# --- checkpointing -----------------------------------------------------------


def test_denoiser_save_load_round_trip(tmp_path):
    model = fresh_denoiser(seed=6)
    model.trained = True
    torch.manual_seed(7)
    for p in model.head[-1].parameters():
        p.data = torch.randn(p.shape) * 0.02
    sched = make_schedule(100)
    path = tmp_path / "denoiser.pt"
    save_denoiser(model, sched, path, config_hash="xyz")
    loaded, sched2 = load_denoiser(path)
    assert loaded.trained
    model.eval()  # load_denoiser returns eval mode; compare like with like
    assert torch.equal(sched2.alpha_bar, sched.alpha_bar)
    init = (rest_packed(seed=30), rest_packed(seed=31))
    x_t = (init[0] + 0.1, init[1] + 0.1)
    cond = dummy_condition(2, 4)
    with torch.no_grad():
        want = model(x_t[0], x_t[1], cond, 4, init)
        got = loaded(x_t[0], x_t[1], cond, 4, init)
    assert torch.equal(got[0], want[0])
    assert torch.equal(got[1], want[1])


def test_load_denoiser_rejects_foreign(tmp_path):
    path = tmp_path / "foreign.pt"
    torch.save({"kind": "prior-checkpoint"}, path)
    with pytest.raises(ValueError):
        load_denoiser(path)
