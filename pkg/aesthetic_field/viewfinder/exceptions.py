"""
Error types raised by the aesthetic field pipeline.

Per-record invariant violations use Django's ValidationError (see
validators.py); everything else is one of the classes below.
"""

from typing import Optional


class AestheticFieldError(Exception):
    """Base class for pipeline errors"""


class DomainError(AestheticFieldError, ValueError):
    """An operation was called outside its domain"""


class DecompositionError(DomainError):
    """A pose could not be expressed as translation + yaw + pitch"""

    def __init__(self, roll: float):
        self.roll = roll
        super().__init__(f"Pose has non-zero roll residual {roll:.3e} rad")


class FormatError(AestheticFieldError, ValueError):
    """A binary file could not be parsed"""

    def __init__(self, reason: str, offset: int, path: Optional[str] = None):
        self.reason = reason
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{reason} at byte offset {offset}")


class RenderContractError(AestheticFieldError):
    """A backward pass was given a context it cannot be applied to"""


class UndefinedCorrelationError(DomainError):
    """A correlation coefficient is undefined for the given series"""

    def __init__(self, message: str, scene_id: Optional[str] = None):
        self.scene_id = scene_id
        if scene_id is not None:
            message = f"scene {scene_id}: {message}"
        super().__init__(message)


class DivergenceError(AestheticFieldError):
    """Distillation produced a non-finite loss"""

    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"Non-finite loss {loss} at iteration {iteration}")


class NoViableViewpointError(AestheticFieldError):
    """Every sampled viewpoint sees nothing of the scene"""
