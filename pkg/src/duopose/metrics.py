"""Evaluation metrics for two-person motion reconstruction.

All functions take numpy arrays (torch tensors are converted) with joints
in meters and return millimeters, except accel_error which returns
mm/frame^2. The bare metric functions apply no alignment; the reporting
layer decides the alignment convention. Reported MPJPE and MPVPE are
root-aligned per person by default (the dominant convention of the methods
this lines up against), switchable to absolute via config; the interaction
error always uses absolute positions since per-person alignment would
destroy exactly the relative geometry it measures.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentDegenerateError, SequenceTooShortError

M_TO_MM = 1000.0


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_same_shape(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")


def mpjpe(pred_joints, gt_joints) -> float:
    """Mean Euclidean joint distance in mm, no alignment. ... X J X 3."""
    pred, gt = _np(pred_joints), _np(gt_joints)
    _check_same_shape(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * M_TO_MM)


def root_align(joints, root_index: int = 0) -> np.ndarray:
    """Subtract the root joint from every joint, per frame. ... X J X 3."""
    j = _np(joints)
    return j - j[..., root_index : root_index + 1, :]


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Best similarity transform (rotation, translation, uniform scale) of
    pred onto gt in the least-squares sense. Single frame, J X 3.

    Raises AlignmentDegenerateError when the prediction is collinear or
    collapsed (no unique rotation).
    """
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    pc = pred - mu_p
    gc = gt - mu_g
    cov = gc.T @ pc  # 3 X 3
    u, s, vt = np.linalg.svd(cov)
    # Collinear/collapsed inputs leave the rotation under-determined.
    if s[1] <= 1e-12 * max(s[0], 1e-30):
        raise AlignmentDegenerateError("degenerate joint configuration for alignment")
    d = np.sign(np.linalg.det(u @ vt))
    flip = np.diag([1.0, 1.0, d])
    rot = u @ flip @ vt
    var_p = (pc ** 2).sum()
    if var_p <= 1e-30:
        raise AlignmentDegenerateError("prediction has zero variance")
    scale = (s[:2].sum() + d * s[2]) / var_p
    return scale * pc @ rot.T + mu_g


def pa_mpjpe(pred_joints, gt_joints) -> float:
    """MPJPE after per-frame similarity Procrustes alignment, mm.

    pred, gt: ... X J X 3; leading dims are flattened to frames.
    """
    pred, gt = _np(pred_joints), _np(gt_joints)
    _check_same_shape(pred, gt)
    pred = pred.reshape(-1, pred.shape[-2], 3)
    gt = gt.reshape(-1, gt.shape[-2], 3)
    if pred.shape[-2] < 3:
        raise AlignmentDegenerateError("need at least 3 joints for alignment")
    total = 0.0
    for f in range(pred.shape[0]):
        aligned = procrustes_align(pred[f], gt[f])
        total += float(np.linalg.norm(aligned - gt[f], axis=-1).mean())
    return total / pred.shape[0] * M_TO_MM


def mpvpe(pred_vertices, gt_vertices) -> float:
    """Mean per-vertex position error in mm, no alignment."""
    return mpjpe(pred_vertices, gt_vertices)


def interaction_error(pred_a, pred_b, gt_a, gt_b) -> float:
    """Cross-person distance discrepancy in mm.

    For each frame, the K X K matrix of distances between person a's and
    person b's joints is compared entrywise against ground truth; the mean
    absolute discrepancy is averaged over frames. Inputs ... X K X 3.
    """
    pa, pb, ga, gb = _np(pred_a), _np(pred_b), _np(gt_a), _np(gt_b)
    _check_same_shape(pa, ga)
    _check_same_shape(pb, gb)
    d_pred = np.linalg.norm(pa[..., :, None, :] - pb[..., None, :, :], axis=-1)
    d_gt = np.linalg.norm(ga[..., :, None, :] - gb[..., None, :, :], axis=-1)
    return float(np.abs(d_pred - d_gt).mean() * M_TO_MM)


def accel_error(pred_joints_seq, gt_joints_seq) -> float:
    """Mean norm of the second-difference discrepancy, mm/frame^2.

    Inputs N X J X 3 with N >= 3.
    """
    pred, gt = _np(pred_joints_seq), _np(gt_joints_seq)
    _check_same_shape(pred, gt)
    if pred.shape[0] < 3:
        raise SequenceTooShortError("acceleration needs at least 3 frames")
    acc_p = pred[2:] - 2.0 * pred[1:-1] + pred[:-2]
    acc_g = gt[2:] - 2.0 * gt[1:-1] + gt[:-2]
    return float(np.linalg.norm(acc_p - acc_g, axis=-1).mean() * M_TO_MM)


@dataclass
class SequenceMetrics:
    name: str
    mpjpe: float
    pa_mpjpe: float
    mpvpe: float
    interaction_error: float
    accel_error: float
    apd: float


@dataclass
class EvalReport:
    sequences: list[SequenceMetrics] = field(default_factory=list)

    def _mean(self, attr: str) -> float:
        if not self.sequences:
            return 0.0
        return float(np.mean([getattr(s, attr) for s in self.sequences]))

    @property
    def mpjpe(self) -> float:
        return self._mean("mpjpe")

    @property
    def pa_mpjpe(self) -> float:
        return self._mean("pa_mpjpe")

    @property
    def mpvpe(self) -> float:
        return self._mean("mpvpe")

    @property
    def interaction_error(self) -> float:
        return self._mean("interaction_error")

    @property
    def accel_error(self) -> float:
        return self._mean("accel_error")

    @property
    def apd(self) -> float:
        return self._mean("apd")

    def to_csv(self) -> str:
        header = "sequence,mpjpe_mm,pa_mpjpe_mm,mpvpe_mm,interaction_mm,accel_mm_frame2,apd_mm"
        lines = [header]
        for s in self.sequences:
            lines.append(
                f"{s.name},{s.mpjpe:.6f},{s.pa_mpjpe:.6f},{s.mpvpe:.6f},"
                f"{s.interaction_error:.6f},{s.accel_error:.6f},{s.apd:.6f}"
            )
        lines.append(
            f"mean,{self.mpjpe:.6f},{self.pa_mpjpe:.6f},{self.mpvpe:.6f},"
            f"{self.interaction_error:.6f},{self.accel_error:.6f},{self.apd:.6f}"
        )
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """Aligned text table, columns in the usual reporting order."""
        cols = ["MPJPE", "PA-MPJPE", "MPVPE", "Interaction", "Accel", "A-PD"]
        rows = [
            (s.name, s.mpjpe, s.pa_mpjpe, s.mpvpe, s.interaction_error, s.accel_error, s.apd)
            for s in self.sequences
        ]
        rows.append(
            ("mean", self.mpjpe, self.pa_mpjpe, self.mpvpe,
             self.interaction_error, self.accel_error, self.apd)
        )
        name_w = max(len("sequence"), *(len(r[0]) for r in rows))
        header = "sequence".ljust(name_w) + "".join(c.rjust(12) for c in cols)
        lines = [header]
        for r in rows:
            lines.append(r[0].ljust(name_w) + "".join(f"{v:12.2f}" for v in r[1:]))
        return "\n".join(lines) + "\n"
