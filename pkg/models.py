"""
Data models for the synthetic driving-clip corpus.
Holds the boxes, frames, detections and clips shared by the generator,
the explainer model and the evaluation harness.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from exceptions import GeometryError, SceneSpecError

OBJECT_KINDS = ("car", "truck", "pedestrian", "cyclist")
ACTION_CLASSES = ("stop", "slow down", "yield", "proceed")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel units, origin top-left, max-exclusive"""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"Box has non-finite coordinates: {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise GeometryError(f"Box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def clipped(self, width: float, height: float) -> "Box":
        """Return the box clipped to a width x height frame"""
        x0 = min(max(self.x_min, 0.0), width)
        y0 = min(max(self.y_min, 0.0), height)
        x1 = min(max(self.x_max, 0.0), width)
        y1 = min(max(self.y_max, 0.0), height)
        return Box(x0, y0, x1, y1)

    def to_list(self) -> List[float]:
        return [float(self.x_min), float(self.y_min), float(self.x_max), float(self.y_max)]

    @classmethod
    def from_list(cls, values) -> "Box":
        if len(values) != 4:
            raise GeometryError(f"Box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(eq=False)
class Frame:
    """One RGB raster of a clip, values in [0, 1]"""

    pixels: np.ndarray
    index: int


@dataclass(eq=False)
class DetectedObject:
    """One detector-stub output on a keyframe"""

    index: int
    box: Box
    crop: np.ndarray


@dataclass(eq=False)
class LabeledClip:
    """A clip with its keyframe annotations"""

    clip_id: str
    frames: List[Frame]
    keyframe_index: int
    detections: List[DetectedObject]
    gt_box: Box
    gt_detection_index: int
    gt_action: int
    gt_explanation: str

    @property
    def keyframe(self) -> Frame:
        return self.frames[self.keyframe_index]

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def pixel_stack(self) -> np.ndarray:
        """Frames stacked as (n, H, W, 3)"""
        return np.stack([frame.pixels for frame in self.frames])

    def matches(self, other: "LabeledClip") -> bool:
        """Field-for-field equality, arrays compared exactly"""
        if (
            self.clip_id != other.clip_id
            or self.keyframe_index != other.keyframe_index
            or self.gt_box != other.gt_box
            or self.gt_detection_index != other.gt_detection_index
            or self.gt_action != other.gt_action
            or self.gt_explanation != other.gt_explanation
            or len(self.frames) != len(other.frames)
            or len(self.detections) != len(other.detections)
        ):
            return False
        for a, b in zip(self.frames, other.frames):
            if a.index != b.index or a.pixels.dtype != b.pixels.dtype or not np.array_equal(a.pixels, b.pixels):
                return False
        for a, b in zip(self.detections, other.detections):
            if a.index != b.index or a.box != b.box or not np.array_equal(a.crop, b.crop):
                return False
        return True


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the synthetic scene generator"""

    height: int = 64
    width: int = 64
    num_frames: int = 4
    patch_size: int = 8
    crop_size: int = 8
    min_objects: int = 1
    max_objects: int = 5
    kinds: Tuple[str, ...] = OBJECT_KINDS
    # ego lane: center-bottom strip, as fractions of the frame
    lane_x_min: float = 1.0 / 3.0
    lane_x_max: float = 2.0 / 3.0
    lane_y_min: float = 0.5
    max_speed: float = 2.0
    stopped_speed: float = 0.5
    jitter_sigma: float = 2.0
    false_positive_max: int = 2
    drop_rate: float = 0.0
    protect_significant: bool = True
    seed: int = 0

    def validate(self) -> "SceneSpec":
        """Raise SceneSpecError when the spec cannot produce valid clips"""
        if self.height <= 0 or self.width <= 0:
            raise SceneSpecError(f"Frame size must be positive, got {self.height}x{self.width}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise SceneSpecError(
                f"Frame {self.height}x{self.width} not divisible by patch size {self.patch_size}"
            )
        if self.num_frames < 1:
            raise SceneSpecError("Clips need at least one frame")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise SceneSpecError(
                f"Object count range [{self.min_objects}, {self.max_objects}] must start at 1 or more"
            )
        unknown = [k for k in self.kinds if k not in OBJECT_KINDS]
        if not self.kinds or unknown:
            raise SceneSpecError(f"Unknown object kinds: {unknown or 'empty set'}")
        if not 0.0 <= self.lane_x_min < self.lane_x_max <= 1.0 or not 0.0 <= self.lane_y_min < 1.0:
            raise SceneSpecError("Ego-lane fractions must describe a non-empty strip inside the frame")
        if self.jitter_sigma < 0 or self.max_speed < 0 or self.false_positive_max < 0:
            raise SceneSpecError("Noise and motion parameters must be non-negative")
        if not 0.0 <= self.drop_rate < 1.0:
            raise SceneSpecError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        if self.drop_rate > 0 and not self.protect_significant:
            raise SceneSpecError(
                "drop_rate > 0 would allow the significant object to be dropped; "
                "set protect_significant"
            )
        if self.crop_size < 1:
            raise SceneSpecError("crop_size must be positive")
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = dict(self.__dict__)
        data["kinds"] = list(self.kinds)
        return data


@dataclass(eq=False)
class PatchAttentionMap:
    """Binary grid over non-overlapping image patches"""

    grid: np.ndarray
    patch_size: int
    height: int
    width: int

    @property
    def rows(self) -> int:
        return self.height // self.patch_size

    @property
    def cols(self) -> int:
        return self.width // self.patch_size

    def flat(self) -> np.ndarray:
        """Row-major 0/1 vector, one entry per patch"""
        return self.grid.reshape(-1)

    def is_all_ones(self) -> bool:
        return bool(self.grid.all())

    def is_all_zeros(self) -> bool:
        return not bool(self.grid.any())

    def to_list(self) -> List[List[int]]:
        return self.grid.astype(int).tolist()

    @classmethod
    def full(cls, height: int, width: int, patch_size: int, value: int = 1) -> "PatchAttentionMap":
        grid = np.full((height // patch_size, width // patch_size), value, dtype=np.uint8)
        return cls(grid=grid, patch_size=patch_size, height=height, width=width)


@dataclass
class EvalRecord:
    """One candidate/reference pair scored by the metrics"""

    clip_id: str
    candidate: str
    reference: str
    attention_source: str = "none"
    candidate_slots: Optional[Tuple[str, str, str]] = None
    reference_slots: Optional[Tuple[str, str, str]] = None
    diagnostics: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        """Generation-output schema, one JSON line per record"""
        return {
            "clip_id": self.clip_id,
            "generated": self.candidate,
            "reference": self.reference,
            "attention_source": self.attention_source,
        }
