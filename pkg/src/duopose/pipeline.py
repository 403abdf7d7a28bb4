"""End-to-end stages: generate, train, reconstruct, evaluate, audit, plot.

Every stage is a plain function taking an :class:`ExperimentConfig`;
the service endpoints and the CLI subcommands are thin wrappers around
these. All outputs land under the config's output root (overridable via
the environment) in a fixed layout:

    corpus/              synthetic sequences + manifest.json
    checkpoints/         prior.pt, denoiser.pt
    logs/                training log CSVs
    recon/<tag>/         per-sequence adapted.duo + meshes.duo, trace.csv
    recon/<tag>/eval/    metrics.csv, table.txt, metrics.png
    audit/               per-sequence penetration audits + summary.csv
"""

import csv
import json
import os

import numpy as np
import torch

from . import collision
from .arrayio import load_arrays, save_arrays
from .body import BodyTemplate, build_default_template, vertices_from_params
from .config import ExperimentConfig, noise_config
from .diffusion import ddim_sample, load_denoiser, save_denoiser
from .errors import StageError
from .guidance import GuidanceContext, build_condition
from .metrics import (
    EvalReport,
    SequenceMetrics,
    accel_error,
    interaction_error,
    mpjpe,
    mpvpe,
    pa_mpjpe,
    root_align,
)
from .motion import (
    PairMotion,
    RigidTransform,
    pack_pair,
    pair_joints,
    transform_pair,
    unpack_person,
)
from .prior import load_prior, save_prior
from .synth import (
    generate_corpus,
    load_ground_truth,
    load_manifest,
    split_sequences,
)
from .training import (
    SequenceSample,
    prepare_samples,
    train_diffusion,
    train_prior,
)

ADAPTED_FILE = "adapted.duo"
MESHES_FILE = "meshes.duo"
TRACE_FILE = "trace.csv"
PRIOR_CKPT = "prior.pt"
DENOISER_CKPT = "denoiser.pt"


def corpus_dir(cfg: ExperimentConfig) -> str:
    d = cfg.data.corpus_dir
    return d if os.path.isabs(d) else cfg.path(d)


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _template() -> BodyTemplate:
    return build_default_template()


def _write_log_csv(rows: list[dict], path: str) -> None:
    _ensure_dir(os.path.dirname(path))
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def run_generate(cfg: ExperimentConfig) -> dict:
    out = corpus_dir(cfg)
    template = _template()
    generate_corpus(
        out,
        count=cfg.data.count,
        seed_base=cfg.data.seed_base,
        frames=cfg.data.frames,
        noise_cfg=noise_config(cfg),
        test_fraction=cfg.data.test_fraction,
        template_body=template,
    )
    manifest = load_manifest(out)
    splits = [e["split"] for e in manifest["sequences"]]
    return {
        "corpus_dir": out,
        "count": len(splits),
        "train": splits.count("train"),
        "test": splits.count("test"),
    }


def _load_split_samples(
    cfg: ExperimentConfig, split: str, template: BodyTemplate
) -> tuple[list[str], list[SequenceSample]]:
    dirs = split_sequences(corpus_dir(cfg), split)
    if not dirs:
        raise StageError("data", f"no sequences in split {split!r} under {corpus_dir(cfg)}")
    return dirs, prepare_samples(dirs, template, cfg)


def run_train_prior(cfg: ExperimentConfig) -> dict:
    template = _template()
    _, samples = _load_split_samples(cfg, "train", template)
    model, logs = train_prior(cfg, template, samples)
    ckpt = os.path.join(_ensure_dir(cfg.path("checkpoints")), PRIOR_CKPT)
    save_prior(model, ckpt, config_hash=cfg.config_hash())
    log_path = cfg.path("logs", "prior_log.csv")
    _write_log_csv(logs, log_path)
    return {
        "checkpoint": ckpt,
        "log": log_path,
        "sequences": len(samples),
        "final": logs[-1] if logs else {},
    }


def run_train_diffusion(cfg: ExperimentConfig) -> dict:
    template = _template()
    _, samples = _load_split_samples(cfg, "train", template)
    model, schedule, logs = train_diffusion(cfg, template, samples)
    ckpt = os.path.join(_ensure_dir(cfg.path("checkpoints")), DENOISER_CKPT)
    save_denoiser(model, schedule, ckpt, config_hash=cfg.config_hash())
    log_path = cfg.path("logs", "diffusion_log.csv")
    _write_log_csv(logs, log_path)
    return {
        "checkpoint": ckpt,
        "log": log_path,
        "sequences": len(samples),
        "final": logs[-1] if logs else {},
    }


def _decanon_transform(sample: SequenceSample) -> RigidTransform:
    # world_rot/world_pivot give x_cam = R x_canon + p; written as the
    # RigidTransform form R (x - pivot), the pivot is -R^T p.
    return RigidTransform(
        rotation=sample.world_rot,
        pivot=-(sample.world_rot.T @ sample.world_pivot),
    )


def reconstruct_batch(
    cfg: ExperimentConfig,
    template: BodyTemplate,
    samples: list[SequenceSample],
    prior,
    model,
    schedule,
    steps: int | None = None,
    physics: bool = True,
    single_branch: bool = False,
    use_prior: bool = True,
) -> tuple[list[PairMotion], list[dict], list[tuple[torch.Tensor, torch.Tensor]]]:
    """Adapt a batch of sequences; returns world-frame pairs and the trace."""
    init = torch.stack([s.init_packed for s in samples])
    sig = torch.stack([s.sigma for s in samples])
    ctx = GuidanceContext(
        template=template,
        camera=samples[0].camera,
        keypoints=torch.stack([s.keypoints for s in samples]),
        confidence=torch.stack([s.confidence for s in samples]),
        bbox=torch.stack([s.bbox for s in samples]),
        world_rot=torch.stack([s.world_rot for s in samples]),
        world_pivot=torch.stack([s.world_pivot for s in samples]),
        pen_frames=0,  # exact penetration on every frame at inference
    )

    def provider(xa, xb, t):
        return build_condition(model, xa, xb, ctx, training=False, physics=physics)

    proj = None
    if use_prior and prior is not None:
        if cfg.diffusion.prior_project_every_step:
            def proj(xa, xb):
                return prior.project(xa, xb, single_branch=single_branch)
        else:
            # Project only once, at the first step: the prior seeds the
            # trajectory on its manifold and the denoiser refines freely.
            state = {"done": False}

            def proj(xa, xb):
                if state["done"]:
                    return xa, xb
                state["done"] = True
                return prior.project(xa, xb, single_branch=single_branch)

    g = torch.Generator().manual_seed(cfg.seed)
    (xa, xb), sigma_out, trace = ddim_sample(
        (init[:, 0], init[:, 1]),
        (sig[:, 0], sig[:, 1]),
        model,
        schedule,
        provider,
        steps=steps or cfg.diffusion.ddim_steps,
        prior_project=proj,
        generator=g,
        start_noise_scale=cfg.diffusion.start_noise_scale,
        single_branch=single_branch,
    )

    pairs: list[PairMotion] = []
    sigmas: list[tuple[torch.Tensor, torch.Tensor]] = []
    for i, sample in enumerate(samples):
        canon = PairMotion(unpack_person(xa[i]), unpack_person(xb[i]))
        back = _decanon_transform(sample)
        pairs.append(transform_pair(canon, back))
        sigmas.append((sigma_out[0][i], sigma_out[1][i]))
    return pairs, trace, sigmas


def _load_models(cfg: ExperimentConfig):
    prior_path = cfg.path("checkpoints", PRIOR_CKPT)
    den_path = cfg.path("checkpoints", DENOISER_CKPT)
    if not os.path.exists(prior_path):
        raise FileNotFoundError(f"prior checkpoint missing: {prior_path}")
    if not os.path.exists(den_path):
        raise FileNotFoundError(f"diffusion checkpoint missing: {den_path}")
    prior = load_prior(prior_path)
    model, schedule = load_denoiser(den_path)
    return prior, model, schedule


def run_reconstruct(
    cfg: ExperimentConfig,
    split: str = "test",
    tag: str = "adapted",
    steps: int | None = None,
    physics: bool = True,
    single_branch: bool = False,
    use_prior: bool = True,
) -> dict:
    template = _template()
    dirs, samples = _load_split_samples(cfg, split, template)
    prior, model, schedule = _load_models(cfg)
    pairs, trace, sigmas = reconstruct_batch(
        cfg,
        template,
        samples,
        prior,
        model,
        schedule,
        steps=steps,
        physics=physics,
        single_branch=single_branch,
        use_prior=use_prior,
    )

    out_root = _ensure_dir(cfg.path("recon", tag))
    names = []
    for seq_dir, sample, pair, (sig_a, sig_b) in zip(dirs, samples, pairs, sigmas):
        name = os.path.basename(seq_dir)
        names.append(name)
        seq_out = _ensure_dir(os.path.join(out_root, name))
        pa, pb = pack_pair(pair)
        save_arrays(
            os.path.join(seq_out, ADAPTED_FILE),
            {
                "packed_a": pa.numpy().astype(np.float32),
                "packed_b": pb.numpy().astype(np.float32),
                "sigma_a": sig_a.numpy().astype(np.float32),
                "sigma_b": sig_b.numpy().astype(np.float32),
            },
            meta={"kind": "adapted-pair", "sequence": name},
        )
        va = vertices_from_params(
            template, pair.person_a.pose6d, pair.person_a.shape, pair.person_a.translation
        )
        vb = vertices_from_params(
            template, pair.person_b.pose6d, pair.person_b.shape, pair.person_b.translation
        )
        save_arrays(
            os.path.join(seq_out, MESHES_FILE),
            {
                "verts_a": va.numpy().astype(np.float32),
                "verts_b": vb.numpy().astype(np.float32),
                "faces": template.faces.numpy().astype(np.int32),
            },
            meta={"kind": "adapted-meshes", "sequence": name},
        )

    trace_path = os.path.join(out_root, TRACE_FILE)
    _write_log_csv(trace, trace_path)
    summary = {
        "tag": tag,
        "out_dir": out_root,
        "sequences": names,
        "steps": steps or cfg.diffusion.ddim_steps,
        "physics": physics,
        "single_branch": single_branch,
        "use_prior": use_prior,
        "trace": trace_path,
    }
    with open(os.path.join(out_root, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    return summary


def load_adapted(seq_out: str) -> PairMotion:
    arrays, _ = load_arrays(os.path.join(seq_out, ADAPTED_FILE))
    return PairMotion(
        unpack_person(torch.from_numpy(arrays["packed_a"])),
        unpack_person(torch.from_numpy(arrays["packed_b"])),
    )


def sequence_apd_mm(pair: PairMotion, template: BodyTemplate) -> float:
    """Mean depth of penetrating surface points over the sequence, mm."""
    va = vertices_from_params(
        template, pair.person_a.pose6d, pair.person_a.shape, pair.person_a.translation
    ).numpy().astype(np.float64)
    vb = vertices_from_params(
        template, pair.person_b.pose6d, pair.person_b.shape, pair.person_b.translation
    ).numpy().astype(np.float64)
    faces = template.faces.numpy()
    depths = []
    mesh_a = collision.TriangleMesh(va[0], faces)
    mesh_b = collision.TriangleMesh(vb[0], faces)
    for f in range(va.shape[0]):
        mesh_a.vertices = va[f]
        mesh_b.vertices = vb[f]
        d = collision.penetrating_depths(mesh_a, mesh_b)
        if d.size:
            depths.append(d)
    if not depths:
        return 0.0
    return float(np.concatenate(depths).mean() * 1000.0)


def evaluate_pair(
    name: str,
    pred: PairMotion,
    gt: PairMotion,
    template: BodyTemplate,
    alignment: str = "root",
) -> SequenceMetrics:
    pj_a, pj_b = pair_joints(pred, template)
    gj_a, gj_b = pair_joints(gt, template)
    if alignment == "root":
        a_pj_a, a_pj_b = root_align(pj_a), root_align(pj_b)
        a_gj_a, a_gj_b = root_align(gj_a), root_align(gj_b)
    else:
        a_pj_a, a_pj_b, a_gj_a, a_gj_b = pj_a, pj_b, gj_a, gj_b

    pv_a = vertices_from_params(
        template, pred.person_a.pose6d, pred.person_a.shape, pred.person_a.translation
    )
    pv_b = vertices_from_params(
        template, pred.person_b.pose6d, pred.person_b.shape, pred.person_b.translation
    )
    gv_a = vertices_from_params(
        template, gt.person_a.pose6d, gt.person_a.shape, gt.person_a.translation
    )
    gv_b = vertices_from_params(
        template, gt.person_b.pose6d, gt.person_b.shape, gt.person_b.translation
    )
    if alignment == "root":
        root_p_a = pj_a[:, :1].numpy()
        root_p_b = pj_b[:, :1].numpy()
        root_g_a = gj_a[:, :1].numpy()
        root_g_b = gj_b[:, :1].numpy()
        v_err = 0.5 * (
            mpvpe(pv_a.numpy() - root_p_a, gv_a.numpy() - root_g_a)
            + mpvpe(pv_b.numpy() - root_p_b, gv_b.numpy() - root_g_b)
        )
    else:
        v_err = 0.5 * (mpvpe(pv_a, gv_a) + mpvpe(pv_b, gv_b))

    return SequenceMetrics(
        name=name,
        mpjpe=0.5 * (mpjpe(a_pj_a, a_gj_a) + mpjpe(a_pj_b, a_gj_b)),
        pa_mpjpe=0.5 * (pa_mpjpe(pj_a, gj_a) + pa_mpjpe(pj_b, gj_b)),
        mpvpe=v_err,
        interaction_error=interaction_error(pj_a, pj_b, gj_a, gj_b),
        accel_error=0.5 * (accel_error(pj_a, gj_a) + accel_error(pj_b, gj_b)),
        apd=sequence_apd_mm(pred, template),
    )


def run_evaluate(
    cfg: ExperimentConfig, tag: str = "adapted", split: str = "test"
) -> tuple[EvalReport, dict]:
    template = _template()
    dirs = split_sequences(corpus_dir(cfg), split)
    if not dirs:
        raise StageError("evaluate", f"no sequences in split {split!r}")
    recon_root = cfg.path("recon", tag)
    report = EvalReport()
    unmatched = []
    for seq_dir in dirs:
        name = os.path.basename(seq_dir)
        seq_out = os.path.join(recon_root, name)
        if not os.path.exists(os.path.join(seq_out, ADAPTED_FILE)):
            unmatched.append(name)
            continue
        pred = load_adapted(seq_out)
        gt = load_ground_truth(seq_dir)
        report.sequences.append(
            evaluate_pair(name, pred, gt, template, alignment=cfg.eval.mpjpe_alignment)
        )

    eval_dir = _ensure_dir(os.path.join(recon_root, "eval"))
    with open(os.path.join(eval_dir, "metrics.csv"), "w") as f:
        f.write(report.to_csv())
    with open(os.path.join(eval_dir, "table.txt"), "w") as f:
        f.write(report.to_table())
        if unmatched:
            f.write("\nunmatched (excluded): " + ", ".join(unmatched) + "\n")
    _plot_metrics(report, os.path.join(eval_dir, "metrics.png"))
    summary = {
        "eval_dir": eval_dir,
        "evaluated": len(report.sequences),
        "unmatched": unmatched,
        "mean": {
            "mpjpe": report.mpjpe,
            "pa_mpjpe": report.pa_mpjpe,
            "mpvpe": report.mpvpe,
            "interaction": report.interaction_error,
            "accel": report.accel_error,
            "apd": report.apd,
        },
    }
    return report, summary


def _plot_metrics(report: EvalReport, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = ["MPJPE", "PA-MPJPE", "MPVPE", "Interaction", "Accel", "A-PD"]
    values = [
        report.mpjpe,
        report.pa_mpjpe,
        report.mpvpe,
        report.interaction_error,
        report.accel_error,
        report.apd,
    ]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(names, values, color="#4477aa")
    ax.set_ylabel("mm (Accel: mm/frame^2)")
    ax.set_title(f"mean over {len(report.sequences)} sequences")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def run_audit(cfg: ExperimentConfig, split: str | None = None) -> dict:
    """Check every ground-truth sequence for interpenetration."""
    template = _template()
    root = corpus_dir(cfg)
    if split:
        dirs = split_sequences(root, split)
    else:
        manifest = load_manifest(root)
        dirs = [os.path.join(root, e["name"]) for e in manifest["sequences"]]
    if not dirs:
        raise StageError("audit-penetration", "no sequences to audit")

    audit_dir = _ensure_dir(cfg.path("audit"))
    faces = template.faces.numpy()
    rows = []
    clean = True
    for seq_dir in dirs:
        name = os.path.basename(seq_dir)
        gt = load_ground_truth(seq_dir)
        va = vertices_from_params(
            template, gt.person_a.pose6d, gt.person_a.shape, gt.person_a.translation
        ).numpy().astype(np.float64)
        vb = vertices_from_params(
            template, gt.person_b.pose6d, gt.person_b.shape, gt.person_b.translation
        ).numpy().astype(np.float64)
        mesh_a = collision.TriangleMesh(va[0], faces)
        mesh_b = collision.TriangleMesh(vb[0], faces)
        bvh_a = collision.build_bvh(mesh_a)
        bvh_b = collision.build_bvh(mesh_b)
        frames_with_contact = 0
        total_loss = 0.0
        lines = []
        for f in range(va.shape[0]):
            mesh_a.vertices = va[f]
            mesh_b.vertices = vb[f]
            bvh_a.refit(va[f])
            bvh_b.refit(vb[f])
            rep = collision.penetration_loss(mesh_a, mesh_b, bvh_a, bvh_b)
            if rep.colliding_pairs:
                frames_with_contact += 1
                total_loss += rep.penetration_loss
            lines.append(f"frame {f}")
            lines.append(collision.report_to_text(rep))
        apd = sequence_apd_mm(gt, template)
        with open(os.path.join(audit_dir, f"{name}.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        if frames_with_contact:
            clean = False
        rows.append(
            {
                "sequence": name,
                "frames_with_contact": frames_with_contact,
                "penetration_loss": f"{total_loss:.9e}",
                "apd_mm": f"{apd:.6f}",
            }
        )
    _write_log_csv(rows, os.path.join(audit_dir, "summary.csv"))
    return {
        "audit_dir": audit_dir,
        "sequences": len(rows),
        "clean": clean,
        "dirty": [r["sequence"] for r in rows if r["frames_with_contact"]],
    }


def run_plot_trace(cfg: ExperimentConfig, tag: str = "adapted") -> dict:
    """Static per-step figures for a reconstruction run's trace."""
    trace_path = cfg.path("recon", tag, TRACE_FILE)
    if not os.path.exists(trace_path):
        raise FileNotFoundError(f"trace not found: {trace_path}")
    with open(trace_path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise StageError("plot-trace", f"trace is empty: {trace_path}")

    steps = [int(r["step"]) for r in rows]
    pen = [float(r["penetration"]) for r in rows]
    delta = [float(r["delta"]) for r in rows]

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(steps, pen, marker="o")
    axes[0].set_xlabel("sampling step")
    axes[0].set_ylabel("mean penetration energy")
    axes[0].set_title("penetration along the trajectory")
    axes[1].plot(steps, delta, marker="o", color="#cc6677")
    axes[1].set_xlabel("sampling step")
    axes[1].set_ylabel("state change (L2)")
    axes[1].set_title("per-step update size")
    fig.tight_layout()
    out_png = cfg.path("recon", tag, "trace.png")
    fig.savefig(out_png, dpi=110)
    plt.close(fig)

    out_csv = cfg.path("recon", tag, "trace_plotted.csv")
    with open(trace_path, "rb") as src, open(out_csv, "wb") as dst:
        dst.write(src.read())
    return {"figure": out_png, "csv": out_csv, "rows": len(rows)}
