"""
Error types for the scene explainer.
Every error carries the process exit code the CLI should use for it.
"""

from typing import Iterable, Optional


class ExplainerError(Exception):
    """Base class for all domain errors"""

    exit_code = 3


class ConfigError(ExplainerError):
    """Invalid or unknown configuration"""

    exit_code = 2


class SceneSpecError(ConfigError, ValueError):
    """Scene generation parameters that cannot produce a valid clip"""


class VocabularyError(ExplainerError, ValueError):
    """Word or phrase outside the closed template vocabulary"""

    exit_code = 2


class GeometryError(ExplainerError, ValueError):
    """Malformed box or grid that does not divide the frame"""


class ShapeMismatchError(ExplainerError, ValueError):
    """Tensor or array with the wrong layout for the model"""


class DatasetFormatError(ExplainerError):
    """Malformed dataset directory or annotation file"""

    def __init__(self, message: str, clip_id: Optional[str] = None, field: Optional[str] = None):
        self.clip_id = clip_id
        self.field = field
        prefix = ""
        if clip_id is not None:
            prefix = f"clip '{clip_id}'"
            if field is not None:
                prefix += f", field '{field}'"
            prefix += ": "
        super().__init__(prefix + message)


class NonFiniteLossError(ExplainerError):
    """Training produced a NaN or infinite loss"""

    def __init__(self, clip_ids: Iterable[str], losses: dict):
        self.clip_ids = list(clip_ids)
        self.losses = losses
        super().__init__(f"Non-finite loss {losses} in batch {self.clip_ids}")


class CheckpointError(ExplainerError):
    """Missing, incomplete or incompatible checkpoint directory"""
