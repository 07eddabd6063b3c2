"""Exception types shared across the package."""


class VidTagError(Exception):
    """Base class for all package errors."""


class ShapeError(VidTagError, ValueError):
    def __init__(self, op, left, right, detail=""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        msg = f"{op}: incompatible shapes {self.left} and {self.right}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphStateError(VidTagError, RuntimeError):
    """Autodiff or optimizer used out of order (double backward, step without grads)."""


class NonFiniteError(VidTagError, FloatingPointError):
    """An operation produced NaN or Inf."""


class FormatError(VidTagError, ValueError):
    """A data file could not be parsed."""

    def __init__(self, message, path=None, offset=None):
        self.path = None if path is None else str(path)
        self.offset = offset
        parts = [message]
        if path is not None:
            parts.append(f"path={self.path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__("; ".join(parts))


class DivergenceError(VidTagError, FloatingPointError):
    """Training loss became NaN or infinite."""


class IdMismatchError(FormatError):
    """Predictions and ground truth disagree on which (seq_id, frame_idx) keys exist."""

    def __init__(self, missing, extra, path=None):
        self.missing = list(missing)
        self.extra = list(extra)
        msg = f"{len(self.missing)} ground-truth frames lack predictions: {self.missing}; " \
              f"{len(self.extra)} predictions have no ground truth: {self.extra}"
        super().__init__(msg, path)
