"""Dual-branch VQ-VAE interaction prior.

Two people's packed motions are encoded by a weight-shared dual-branch
transformer into per-frame latents, quantized against two separate
codebooks (one per branch), and decoded back to body parameters. At
inference the encode-quantize-decode round trip acts as a projection onto
the learned interaction manifold. Codebooks train by exponential moving
averages with Laplace smoothing instead of gradients, plus a dead-code
reset that re-seeds rarely used entries from live encoder outputs.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import ConfigError, ModelNotReadyError
from .body import NUM_JOINTS
from .motion import FRAME_DIM, POSE_BLOCK, packed_joints
from .rotation import identity_rot6d
from .nets import DualBranchStack, zero_module

PARAM_BLOCK = POSE_BLOCK + 10  # pose plus shape; translation is supervised via joints

EMA_DECAY = 0.99
LAPLACE_EPS = 1e-5


@dataclass
class Codebook:
    entries: torch.Tensor           # K X D
    usage_counts: torch.Tensor = None  # K, int64, window usage
    ema_cluster_size: torch.Tensor = None
    ema_embed_sum: torch.Tensor = None

    def __post_init__(self):
        k = self.entries.shape[0]
        if self.usage_counts is None:
            self.usage_counts = torch.zeros(k, dtype=torch.int64)
        if self.ema_cluster_size is None:
            self.ema_cluster_size = torch.ones(k)
        if self.ema_embed_sum is None:
            self.ema_embed_sum = self.entries.clone()

    @property
    def num_codes(self) -> int:
        return self.entries.shape[0]

    def state_dict(self) -> dict:
        return {
            "entries": self.entries,
            "usage_counts": self.usage_counts,
            "ema_cluster_size": self.ema_cluster_size,
            "ema_embed_sum": self.ema_embed_sum,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "Codebook":
        return cls(
            entries=state["entries"],
            usage_counts=state["usage_counts"],
            ema_cluster_size=state["ema_cluster_size"],
            ema_embed_sum=state["ema_embed_sum"],
        )


def new_codebook(num_codes: int = 256, dim: int = 256, seed: int = 0) -> Codebook:
    g = torch.Generator().manual_seed(seed)
    entries = 0.02 * torch.randn(num_codes, dim, generator=g)
    return Codebook(entries=entries)


def quantize(z: torch.Tensor, codebook: Codebook) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest codebook entry per latent. z: ... X D.

    Returns (indices ..., quantized ... X D). Ties go to the lowest index
    (first minimum). No gradient flows here; the straight-through path is
    assembled by the caller.
    """
    flat = z.reshape(-1, z.shape[-1])
    entries = codebook.entries
    d = (
        (flat**2).sum(dim=1, keepdim=True)
        - 2.0 * flat @ entries.t()
        + (entries**2).sum(dim=1)
    )
    idx = d.argmin(dim=1)
    zq = entries[idx]
    return idx.reshape(z.shape[:-1]), zq.reshape(z.shape)


def ema_update(codebook: Codebook, indices: torch.Tensor, latents: torch.Tensor,
               decay: float = EMA_DECAY) -> Codebook:
    """EMA codebook step from a batch of assigned latents.

    indices: flat M, latents: M X D. Cluster sizes and embedding sums decay
    toward the batch statistics; entries are the Laplace-smoothed ratio.
    Updates in place and returns the codebook.
    """
    k, dim = codebook.entries.shape
    flat_idx = indices.reshape(-1)
    flat_z = latents.reshape(-1, dim)
    counts = torch.bincount(flat_idx, minlength=k).float()
    sums = torch.zeros(k, dim, dtype=flat_z.dtype)
    sums.index_add_(0, flat_idx, flat_z)

    codebook.ema_cluster_size.mul_(decay).add_(counts, alpha=1.0 - decay)
    codebook.ema_embed_sum.mul_(decay).add_(sums, alpha=1.0 - decay)

    total = codebook.ema_cluster_size.sum()
    smoothed = (
        (codebook.ema_cluster_size + LAPLACE_EPS)
        / (total + k * LAPLACE_EPS)
        * total
    )
    codebook.entries = codebook.ema_embed_sum / smoothed.unsqueeze(1)
    codebook.usage_counts += torch.bincount(flat_idx, minlength=k)
    return codebook


def code_reset(
    codebook: Codebook,
    threshold: int,
    pool: torch.Tensor,
    generator: torch.Generator | None = None,
) -> tuple[Codebook, int]:
    """Re-seed codes used fewer than threshold times in the current window.

    pool: M X D live encoder outputs. Dead entries are replaced by randomly
    drawn pool vectors and their EMA state restarts at unit mass; the usage
    window restarts for every code. Returns (codebook, number reset).
    An empty pool skips the reset with a warning count of -1.
    """
    if pool.numel() == 0:
        return codebook, -1
    dead = torch.nonzero(codebook.usage_counts < threshold).reshape(-1)
    if len(dead):
        pick = torch.randint(0, pool.shape[0], (len(dead),), generator=generator)
        fresh = pool[pick].detach().clone()
        codebook.entries[dead] = fresh
        codebook.ema_embed_sum[dead] = fresh
        codebook.ema_cluster_size[dead] = 1.0
    codebook.usage_counts.zero_()
    return codebook, int(len(dead))


def utilization(codebook: Codebook, indices: torch.Tensor) -> float:
    """Fraction of codes hit at least once by the given assignments."""
    hit = torch.unique(indices.reshape(-1))
    return float(len(hit)) / codebook.num_codes


class InteractionPrior(nn.Module):
    """Encoder, two codebooks, decoder. Branches share every weight."""

    def __init__(
        self,
        num_blocks: int = 4,
        heads: int = 4,
        width: int = 256,
        ff_hidden: int = 512,
        num_codes: int = 256,
        seed: int = 0,
    ):
        super().__init__()
        self.width = width
        self.embed = nn.Linear(FRAME_DIM, width)
        self.encoder = DualBranchStack(num_blocks, width, heads, ff_hidden, width)
        self.dec_in = nn.Linear(width, width)
        self.decoder = DualBranchStack(num_blocks, width, heads, ff_hidden, width)
        self.head = nn.Sequential(
            nn.LayerNorm(width), zero_module(nn.Linear(width, FRAME_DIM))
        )
        # The prior has no external condition; a single learned token feeds
        # the adaptive norms so the same block wiring serves the diffusion
        # model later.
        self.default_condition = nn.Parameter(torch.zeros(width))
        # The decoder predicts offsets from the rest frame so the zero-init
        # head still emits decodable rotations (identity, not the zero
        # vector, which the strict 6D decoder rejects).
        rest = torch.cat(
            [
                identity_rot6d(NUM_JOINTS).reshape(-1),
                torch.zeros(FRAME_DIM - NUM_JOINTS * 6),
            ]
        )
        self.register_buffer("rest_frame", rest)
        self.codebook_a = new_codebook(num_codes, width, seed=seed + 1)
        self.codebook_b = new_codebook(num_codes, width, seed=seed + 2)
        self.tied_codebooks = False  # test hook: branch b quantizes against a
        self.trained = False

    def _cond(self, batch: int) -> torch.Tensor:
        return self.default_condition.unsqueeze(0).expand(batch, -1)

    def encode(
        self, x_a: torch.Tensor, x_b: torch.Tensor, single_branch: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """x_a, x_b: B X N X FRAME_DIM -> latents B X N X width."""
        cond = self._cond(x_a.shape[0])
        return self.encoder(
            self.embed(x_a), self.embed(x_b), cond, cond, single_branch=single_branch
        )

    def decode(
        self, zq_a: torch.Tensor, zq_b: torch.Tensor, single_branch: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor]:
        cond = self._cond(zq_a.shape[0])
        h_a, h_b = self.decoder(
            self.dec_in(zq_a), self.dec_in(zq_b), cond, cond, single_branch=single_branch
        )
        return self.rest_frame + self.head(h_a), self.rest_frame + self.head(h_b)

    def forward(self, x_a: torch.Tensor, x_b: torch.Tensor, single_branch: bool = False):
        """Full round trip with straight-through quantization.

        Returns (recon_a, recon_b, z_pair, zq_pair, idx_a, idx_b) where
        z_pair and zq_pair stack both branches on dim 1.
        """
        z_a, z_b = self.encode(x_a, x_b, single_branch=single_branch)
        book_b = self.codebook_a if self.tied_codebooks else self.codebook_b
        idx_a, zq_a = quantize(z_a, self.codebook_a)
        idx_b, zq_b = quantize(z_b, book_b)
        st_a = z_a + (zq_a - z_a).detach()
        st_b = z_b + (zq_b - z_b).detach()
        recon_a, recon_b = self.decode(st_a, st_b, single_branch=single_branch)
        z_pair = torch.stack([z_a, z_b], dim=1)
        zq_pair = torch.stack([zq_a, zq_b], dim=1)
        return recon_a, recon_b, z_pair, zq_pair, idx_a, idx_b

    @torch.no_grad()
    def project(
        self, x_a: torch.Tensor, x_b: torch.Tensor, single_branch: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Projection onto the prior manifold: encode, quantize, decode."""
        if not self.trained:
            raise ModelNotReadyError("interaction prior has not been trained or loaded")
        recon_a, recon_b, *_ = self.forward(x_a, x_b, single_branch=single_branch)
        return recon_a, recon_b


def vqvae_loss(
    pred_a: torch.Tensor,
    pred_b: torch.Tensor,
    gt_a: torch.Tensor,
    gt_b: torch.Tensor,
    z: torch.Tensor,
    zq: torch.Tensor,
    alpha: float,
    template,
) -> tuple[torch.Tensor, dict]:
    """Reconstruction plus commitment loss for a batch of pairs.

    Packed tensors are B X N X FRAME_DIM. The reconstruction part sums a
    parameter term, a joint term, a joint-velocity term, and an interaction
    term on per-joint coordinate gaps between the two people; each is a mean
    of squares. The commitment term is alpha times the Frobenius norm of
    z - sg(zq) over the whole batch.
    """
    if alpha < 0:
        raise ConfigError("commitment weight alpha must be nonnegative")

    l_param = ((pred_a[..., :PARAM_BLOCK] - gt_a[..., :PARAM_BLOCK]) ** 2).mean() + (
        (pred_b[..., :PARAM_BLOCK] - gt_b[..., :PARAM_BLOCK]) ** 2
    ).mean()

    pj_a = packed_joints(pred_a, template)
    pj_b = packed_joints(pred_b, template)
    gj_a = packed_joints(gt_a, template)
    gj_b = packed_joints(gt_b, template)
    l_joint = ((pj_a - gj_a) ** 2).mean() + ((pj_b - gj_b) ** 2).mean()

    pv_a = pj_a[:, 1:] - pj_a[:, :-1]
    pv_b = pj_b[:, 1:] - pj_b[:, :-1]
    gv_a = gj_a[:, 1:] - gj_a[:, :-1]
    gv_b = gj_b[:, 1:] - gj_b[:, :-1]
    l_vel = ((pv_a - gv_a) ** 2).mean() + ((pv_b - gv_b) ** 2).mean()

    rel_p = (pj_a - pj_b).abs()
    rel_g = (gj_a - gj_b).abs()
    l_int = ((rel_p - rel_g) ** 2).mean()

    l_rec = l_param + l_joint + l_vel + l_int
    l_commit = torch.linalg.vector_norm(z - zq.detach())
    total = l_rec + alpha * l_commit
    breakdown = {
        "l_param": float(l_param.detach()),
        "l_joint": float(l_joint.detach()),
        "l_vel": float(l_vel.detach()),
        "l_int": float(l_int.detach()),
        "l_rec": float(l_rec.detach()),
        "l_commit": float(l_commit.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown


def save_prior(model: InteractionPrior, path, config_hash: str = "") -> None:
    import os

    payload = {
        "kind": "prior-checkpoint",
        "version": 1,
        "config_hash": config_hash,
        "model": model.state_dict(),
        "codebook_a": model.codebook_a.state_dict(),
        "codebook_b": model.codebook_b.state_dict(),
        "arch": {
            "num_blocks": len(model.encoder.blocks),
            "heads": model.encoder.blocks[0].attn_self.num_heads,
            "width": model.width,
            "ff_hidden": model.encoder.blocks[0].ff[0].out_features,
            "num_codes": model.codebook_a.num_codes,
        },
        "trained": model.trained,
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_prior(path) -> InteractionPrior:
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "prior-checkpoint":
        raise ValueError(f"{path}: not a prior checkpoint")
    arch = payload["arch"]
    model = InteractionPrior(
        num_blocks=arch["num_blocks"],
        heads=arch["heads"],
        width=arch["width"],
        ff_hidden=arch["ff_hidden"],
        num_codes=arch["num_codes"],
    )
    model.load_state_dict(payload["model"])
    model.codebook_a = Codebook.from_state_dict(payload["codebook_a"])
    model.codebook_b = Codebook.from_state_dict(payload["codebook_b"])
    model.trained = bool(payload.get("trained", True))
    model.eval()
    return model
