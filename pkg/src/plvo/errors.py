"""Exception types shared across the package."""


class PlvoError(Exception):
    """Base class for all structured errors raised by plvo."""


class ShapeError(PlvoError):
    """An operation received tensors with incompatible shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class AutodiffError(PlvoError):
    """Misuse of the differentiation tape (non-scalar root, double backward, ...)."""


class FormatError(PlvoError):
    """A file did not match its declared binary or text format."""


class ConfigError(PlvoError):
    """Configuration document is malformed or contains unknown keys."""


class UsageError(PlvoError):
    """Command line was malformed (maps to exit code 1)."""


class DegenerateQuaternionError(PlvoError):
    """Quaternion head produced a vector too close to zero to normalize."""


class DivergedPoseError(PlvoError):
    """A coarse pose warped every point out of view; refinement cannot proceed."""


class DegenerateSceneError(PlvoError):
    """Synthetic scene generation failed to produce a co-visible frame pair."""
