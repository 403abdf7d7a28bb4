"""Exception types shared across the package."""


class DuoposeError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DuoposeError):
    """Invalid configuration value or unknown config key."""


class DegenerateRotationError(DuoposeError):
    """6D rotation input cannot be orthonormalized (zero or parallel vectors)."""


class BehindCameraError(DuoposeError):
    """A 3D point has nonpositive depth and cannot be projected."""

    def __init__(self, joint_index: int, depth: float):
        self.joint_index = joint_index
        self.depth = depth
        super().__init__(
            f"point {joint_index} has depth {depth:.6g} m (must be > 0 to project)"
        )


class SequenceTooShortError(DuoposeError):
    """A temporal operation received fewer frames than it needs."""


class ModelNotReadyError(DuoposeError):
    """A trained model was required but none is loaded."""


class GenerationError(DuoposeError):
    """Synthetic motion generation failed (e.g. could not avoid penetration)."""


class AlignmentDegenerateError(DuoposeError):
    """Procrustes alignment is ill-posed (collinear or degenerate points)."""


class TrackingError(DuoposeError):
    """Track association failed (unsupported cardinality or over-long gap)."""


class StageError(DuoposeError):
    """A pipeline stage failed; carries the stage tag for diagnostics."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
