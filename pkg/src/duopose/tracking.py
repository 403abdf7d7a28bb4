"""Associating per-frame detections into two person tracks.

At most two people are supported, so assignment per frame is solved exactly
by comparing both permutations instead of running a general matcher. The
cost of putting a detection on a track combines root-translation distance,
mean pose difference in the 6D representation, and bounding-box overlap.
Frames with a missing detection carry the previous state forward for up to
``max_gap`` consecutive frames; longer gaps reject the sequence.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .camera import bbox_iou
from .config import TrackingConfig
from .errors import TrackingError


@dataclass
class Detection:
    """One person candidate in one frame."""

    pose6d: np.ndarray  # (K, 6)
    shape: np.ndarray  # (10,)
    translation: np.ndarray  # (3,)
    bbox: np.ndarray  # (4,) pixels [x0, y0, x1, y1]


@dataclass
class TrackPair:
    """Two associated tracks over a sequence.

    ``carried`` flags frames whose state was copied from the previous frame
    because the detection was missing.
    """

    pose6d: np.ndarray  # (2, N, K, 6)
    shape: np.ndarray  # (2, N, 10)
    translation: np.ndarray  # (2, N, 3)
    bbox: np.ndarray  # (2, N, 4)
    carried: np.ndarray  # (2, N) bool


def _cost(track: Detection, det: Detection, cfg: TrackingConfig) -> float:
    root = float(np.linalg.norm(track.translation - det.translation))
    pose = float(np.mean(np.abs(track.pose6d - det.pose6d)))
    iou = float(bbox_iou(torch.as_tensor(track.bbox), torch.as_tensor(det.bbox)))
    return cfg.w_root * root + cfg.w_pose * pose + cfg.w_iou * (1.0 - iou)


def associate_tracks(
    detections: list[list[Detection]],
    cfg: TrackingConfig | None = None,
) -> TrackPair:
    """Build two tracks from per-frame detection lists.

    The first frame must contain exactly two detections (they seed the
    tracks in the given order). Later frames may contain 0, 1, or 2; more
    than two raises :class:`TrackingError`.
    """
    cfg = cfg or TrackingConfig()
    n = len(detections)
    if n == 0:
        raise TrackingError("no frames to associate")
    first = detections[0]
    if len(first) != 2:
        raise TrackingError(
            f"first frame must contain exactly 2 detections, got {len(first)}"
        )

    state = [first[0], first[1]]
    gaps = [0, 0]
    rows: list[list[Detection]] = [[first[0]], [first[1]]]
    carried = np.zeros((2, n), dtype=bool)

    for i in range(1, n):
        dets = detections[i]
        if len(dets) > 2:
            raise TrackingError(
                f"frame {i} has {len(dets)} detections; at most 2 are supported"
            )
        assigned: list[Detection | None] = [None, None]
        if len(dets) == 2:
            straight = _cost(state[0], dets[0], cfg) + _cost(state[1], dets[1], cfg)
            crossed = _cost(state[0], dets[1], cfg) + _cost(state[1], dets[0], cfg)
            if straight <= crossed:
                assigned = [dets[0], dets[1]]
            else:
                assigned = [dets[1], dets[0]]
        elif len(dets) == 1:
            det = dets[0]
            if _cost(state[0], det, cfg) <= _cost(state[1], det, cfg):
                assigned[0] = det
            else:
                assigned[1] = det
        for person in range(2):
            det = assigned[person]
            if det is None:
                gaps[person] += 1
                if gaps[person] > cfg.max_gap:
                    raise TrackingError(
                        f"track {person} missing for {gaps[person]} consecutive "
                        f"frames at frame {i} (max gap {cfg.max_gap})"
                    )
                rows[person].append(state[person])
                carried[person, i] = True
            else:
                gaps[person] = 0
                state[person] = det
                rows[person].append(det)

    def stack(attr: str) -> np.ndarray:
        return np.stack(
            [
                np.stack([getattr(d, attr) for d in rows[0]]),
                np.stack([getattr(d, attr) for d in rows[1]]),
            ]
        ).astype(np.float64)

    return TrackPair(
        pose6d=stack("pose6d"),
        shape=stack("shape"),
        translation=stack("translation"),
        bbox=stack("bbox"),
        carried=carried,
    )
