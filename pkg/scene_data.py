"""
Synthetic driving-clip generator.

Renders short clips of colored glyphs moving across a road, picks the
object nearest the ego lane as the significant one, derives the ego
action from a fixed rule table, and emits noisy detector-stub boxes
plus a templated reference explanation for every keyframe.
"""

import hashlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from PIL import Image, ImageDraw

from exceptions import VocabularyError
from geometry import distance_to_region, iou, position_label
from models import ACTION_CLASSES, Box, DetectedObject, Frame, LabeledClip, SceneSpec
from vocabulary import ACTION_STATUSES, OBJECT_NAMES, SLOT_NAMES, SLOT_VOCABULARIES

# (width, height) in pixels at the default 64x64 frame
GLYPH_SIZES = {
    "car": (12.0, 8.0),
    "truck": (16.0, 12.0),
    "pedestrian": (5.0, 9.0),
    "cyclist": (7.0, 9.0),
}
GLYPH_COLORS = {
    "car": (40, 100, 230),
    "truck": (240, 150, 30),
    "pedestrian": (230, 40, 40),
    "cyclist": (50, 200, 80),
}
SKY_COLOR = (150, 190, 230)
ROAD_COLOR = (90, 90, 90)
LANE_COLOR = (235, 235, 235)

# (kind, position) -> ego action
ACTION_TABLE = {
    ("car", "on the left"): "proceed",
    ("car", "ahead"): "slow down",
    ("car", "on the right"): "yield",
    ("truck", "on the left"): "slow down",
    ("truck", "ahead"): "stop",
    ("truck", "on the right"): "proceed",
    ("pedestrian", "on the left"): "yield",
    ("pedestrian", "ahead"): "stop",
    ("pedestrian", "on the right"): "yield",
    ("cyclist", "on the left"): "yield",
    ("cyclist", "ahead"): "slow down",
    ("cyclist", "on the right"): "proceed",
}

STOPPED_PROBABILITY = 0.25
MAX_PLACEMENT_TRIES = 100
MAX_DETECTION_TRIES = 32
MAX_OVERLAP_IOU = 0.1
VALIDATION_PERCENT = 10


@dataclass
class SceneObject:
    """Ground-truth object of a layout, box given at the keyframe"""

    kind: str
    box: Box
    velocity: Tuple[float, float]
    status: str

    def box_at(self, frames_before_key: int) -> Box:
        dx = -self.velocity[0] * frames_before_key
        dy = -self.velocity[1] * frames_before_key
        b = self.box
        return Box(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy)


def clip_rng(seed: int, clip_id: str) -> np.random.Generator:
    """Generator seeded by (seed, clip_id) only"""
    digest = hashlib.sha256(f"{seed}:{clip_id}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def is_validation(clip_id: str) -> bool:
    """Fixed 10% validation split by hash of clip_id"""
    digest = hashlib.sha256(clip_id.encode("utf-8")).hexdigest()
    return int(digest, 16) % 100 < VALIDATION_PERCENT


def split_clips(clips: Sequence[LabeledClip]) -> Tuple[List[LabeledClip], List[LabeledClip]]:
    train = [c for c in clips if not is_validation(c.clip_id)]
    val = [c for c in clips if is_validation(c.clip_id)]
    return train, val


def make_explanation(object_name: str, action_status: str, position: str) -> str:
    """
    Build a template explanation: object name + action/status + position.

    Raises:
        VocabularyError: when a slot value is outside its closed vocabulary
    """
    for slot, value in zip(SLOT_NAMES, (object_name, action_status, position)):
        if value not in SLOT_VOCABULARIES[slot]:
            raise VocabularyError(f"Unknown {slot} '{value}'")
    return f"{object_name} {action_status} {position}"


def parse_explanation(text: str) -> Optional[Tuple[str, str, str]]:
    """
    Longest-match parse of a text against the slot vocabularies in template
    order. Returns None when the text is outside the grammar.
    """
    if not isinstance(text, str):
        return None
    tokens = text.lower().split()
    pos = 0
    slots = []
    for slot in SLOT_NAMES:
        candidates = sorted(SLOT_VOCABULARIES[slot], key=lambda p: len(p.split()), reverse=True)
        for phrase in candidates:
            words = phrase.split()
            if tokens[pos:pos + len(words)] == words:
                slots.append(phrase)
                pos += len(words)
                break
        else:
            return None
    if pos != len(tokens):
        return None
    return tuple(slots)


def ego_lane(spec: SceneSpec) -> Box:
    return Box(
        spec.lane_x_min * spec.width,
        spec.lane_y_min * spec.height,
        spec.lane_x_max * spec.width,
        float(spec.height),
    )


def motion_status(kind: str, velocity: Tuple[float, float], box: Box, spec: SceneSpec) -> str:
    """Action/status phrase from an object's motion relative to the ego lane"""
    vx, vy = velocity
    if np.hypot(vx, vy) < spec.stopped_speed:
        return "stopped"
    center_x, _ = box.center
    toward_center = (center_x < spec.width / 2.0 and vx > 0) or (center_x > spec.width / 2.0 and vx < 0)
    if abs(vx) >= abs(vy) and toward_center:
        return "cutting in" if kind in ("car", "truck") else "crossing"
    if vy > 0:
        return "approaching"
    return "moving away"


def _glyph_size(kind: str, spec: SceneSpec) -> Tuple[float, float]:
    w, h = GLYPH_SIZES[kind]
    return w * spec.width / 64.0, h * spec.height / 64.0


def _sample_layout(rng: np.random.Generator, spec: SceneSpec) -> List[SceneObject]:
    """Draw object kinds, keyframe boxes and velocities"""
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    road_top = spec.height / 4.0
    objects: List[SceneObject] = []

    for _ in range(count):
        kind = str(rng.choice(list(spec.kinds)))
        w, h = _glyph_size(kind, spec)
        placed = None
        for _ in range(MAX_PLACEMENT_TRIES):
            cx = float(rng.uniform(w / 2.0, spec.width - w / 2.0))
            cy = float(rng.uniform(max(road_top, h / 2.0), spec.height - h / 2.0))
            box = Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
            if all(iou(box, other.box) <= MAX_OVERLAP_IOU for other in objects):
                placed = box
                break
        if placed is None:
            continue
        if rng.random() < STOPPED_PROBABILITY:
            velocity = (0.0, 0.0)
        else:
            velocity = (
                float(rng.uniform(-spec.max_speed, spec.max_speed)),
                float(rng.uniform(-spec.max_speed, spec.max_speed)),
            )
        objects.append(SceneObject(kind, placed, velocity, motion_status(kind, velocity, placed, spec)))

    return objects


def significant_index(objects: Sequence[SceneObject], spec: SceneSpec) -> int:
    """Object whose keyframe center is nearest the ego lane"""
    lane = ego_lane(spec)
    anchor = np.array([spec.width / 2.0, float(spec.height)])

    def key(i: int):
        center = objects[i].box.center
        return (
            distance_to_region(center, lane),
            float(np.hypot(*(np.array(center) - anchor))),
            i,
        )

    return min(range(len(objects)), key=key)


def action_for(kind: str, position: str) -> int:
    return ACTION_CLASSES.index(ACTION_TABLE[(kind, position)])


def _render_frame(objects: Sequence[SceneObject], frames_before_key: int, rng: np.random.Generator,
                  spec: SceneSpec) -> np.ndarray:
    image = Image.new("RGB", (spec.width, spec.height), ROAD_COLOR)
    draw = ImageDraw.Draw(image)
    road_top = spec.height / 4.0
    draw.rectangle([0, 0, spec.width - 1, road_top - 1], fill=SKY_COLOR)
    for fx in (spec.lane_x_min, spec.lane_x_max):
        x = fx * spec.width
        for y in np.arange(road_top, spec.height, 6.0):
            draw.line([(x, y), (x, min(y + 3.0, spec.height - 1))], fill=LANE_COLOR, width=1)

    # far objects first so nearer glyphs occlude them
    for obj in sorted(objects, key=lambda o: o.box.y_max):
        b = obj.box_at(frames_before_key)
        corners = [b.x_min, b.y_min, b.x_max - 1, b.y_max - 1]
        color = GLYPH_COLORS[obj.kind]
        if obj.kind == "car":
            draw.rectangle(corners, fill=color)
        elif obj.kind == "truck":
            draw.rectangle(corners, fill=color)
            draw.rectangle([b.x_min, b.y_min, b.x_max - 1, b.y_min + b.height / 3.0], fill=(180, 90, 20))
        elif obj.kind == "pedestrian":
            draw.ellipse(corners, fill=color)
        else:
            draw.polygon([(b.center[0], b.y_min), (b.x_min, b.y_max - 1), (b.x_max - 1, b.y_max - 1)], fill=color)

    pixels = np.asarray(image, dtype=np.int16)
    noise = rng.integers(-6, 7, size=pixels.shape)
    return np.clip(pixels + noise, 0, 255).astype(np.uint8)


def to_unit(raster: np.ndarray) -> np.ndarray:
    """uint8 raster -> float32 in [0, 1]; the one conversion used everywhere"""
    return raster.astype(np.float32) / np.float32(255.0)


def crop_box(pixels: np.ndarray, box: Box, size: int) -> np.ndarray:
    """Nearest-neighbour resample of a box region to size x size x 3"""
    height, width = pixels.shape[:2]
    steps = (np.arange(size) + 0.5) / size
    xs = np.clip(np.floor(box.x_min + steps * box.width).astype(int), 0, width - 1)
    ys = np.clip(np.floor(box.y_min + steps * box.height).astype(int), 0, height - 1)
    return pixels[np.ix_(ys, xs)].copy()


def _jittered(box: Box, rng: np.random.Generator, spec: SceneSpec) -> Box:
    sigma = spec.jitter_sigma
    offsets = np.clip(rng.normal(0.0, sigma, size=4), -2.0 * sigma, 2.0 * sigma) if sigma > 0 else np.zeros(4)
    x0, y0, x1, y1 = (np.array(box.to_list()) + offsets).tolist()
    x0, x1 = sorted((x0, x1))
    y0, y1 = sorted((y0, y1))
    return _min_size(Box(x0, y0, x1, y1).clipped(spec.width, spec.height), spec)


def _min_size(box: Box, spec: SceneSpec) -> Box:
    x0, y0, x1, y1 = box.to_list()
    if x1 - x0 < 1.0:
        x0 = min(x0, spec.width - 1.0)
        x1 = x0 + 1.0
    if y1 - y0 < 1.0:
        y0 = min(y0, spec.height - 1.0)
        y1 = y0 + 1.0
    return Box(x0, y0, x1, y1)


def _spurious(rng: np.random.Generator, spec: SceneSpec) -> Box:
    w = float(rng.uniform(4.0, 16.0)) * spec.width / 64.0
    h = float(rng.uniform(4.0, 16.0)) * spec.height / 64.0
    x0 = float(rng.uniform(0.0, spec.width - w))
    y0 = float(rng.uniform(0.0, spec.height - h))
    return Box(x0, y0, x0 + w, y0 + h)


def _detect(objects: Sequence[SceneObject], sig: int, rng: np.random.Generator,
            spec: SceneSpec) -> Tuple[List[Box], int]:
    """
    Detector stub: jittered true boxes plus spurious ones, shuffled.
    Returns the boxes and the position of the significant object's box.
    """
    gt_box = objects[sig].box
    for attempt in range(MAX_DETECTION_TRIES + 1):
        exact = attempt == MAX_DETECTION_TRIES
        boxes, sig_pos = [], -1
        for j, obj in enumerate(objects):
            if j == sig:
                sig_pos = len(boxes)
                boxes.append(gt_box if exact else _jittered(obj.box, rng, spec))
            elif rng.random() >= spec.drop_rate:
                boxes.append(_jittered(obj.box, rng, spec))
        for _ in range(int(rng.integers(0, spec.false_positive_max + 1))):
            boxes.append(_spurious(rng, spec))

        ious = [iou(b, gt_box) for b in boxes]
        best = ious[sig_pos]
        if best > 0 and all(v < best for k, v in enumerate(ious) if k != sig_pos):
            break
        if exact:
            # drop whatever still ties the exact box
            keep = [k for k, v in enumerate(ious) if k == sig_pos or v < best]
            boxes = [boxes[k] for k in keep]
            sig_pos = keep.index(sig_pos)
            break

    order = rng.permutation(len(boxes))
    shuffled = [boxes[k] for k in order]
    return shuffled, int(np.where(order == sig_pos)[0][0])


def generate_scene(spec: SceneSpec, clip_id: str) -> LabeledClip:
    """
    Generate one labeled clip, a pure function of (spec, clip_id).

    Args:
        spec: Scene parameters (validated here)
        clip_id: Clip identifier, mixed into the random seed

    Returns:
        LabeledClip with keyframe = last frame
    """
    spec.validate()
    rng = clip_rng(spec.seed, clip_id)
    objects = _sample_layout(rng, spec)
    sig = significant_index(objects, spec)
    keyframe_index = spec.num_frames - 1

    rasters = [_render_frame(objects, keyframe_index - k, rng, spec) for k in range(spec.num_frames)]
    frames = [Frame(pixels=to_unit(r), index=k) for k, r in enumerate(rasters)]
    keyframe = frames[keyframe_index].pixels

    boxes, gt_detection_index = _detect(objects, sig, rng, spec)
    detections = [
        DetectedObject(index=i, box=b, crop=crop_box(keyframe, b, spec.crop_size))
        for i, b in enumerate(boxes)
    ]

    target = objects[sig]
    position = position_label(target.box, spec.width)
    return LabeledClip(
        clip_id=clip_id,
        frames=frames,
        keyframe_index=keyframe_index,
        detections=detections,
        gt_box=target.box,
        gt_detection_index=gt_detection_index,
        gt_action=action_for(target.kind, position),
        gt_explanation=make_explanation(target.kind, target.status, position),
    )


def generate_corpus(spec: SceneSpec, count: int, prefix: str = "clip") -> List[LabeledClip]:
    """Generate count clips with ids prefix_00000, prefix_00001, ..."""
    spec.validate()
    logger.info(f"Generating {count} clips (seed {spec.seed})")
    return [generate_scene(spec, f"{prefix}_{i:05d}") for i in range(count)]


def action_marginal(clips: Sequence[LabeledClip]) -> Dict[str, float]:
    counts = np.zeros(len(ACTION_CLASSES))
    for clip in clips:
        counts[clip.gt_action] += 1
    total = max(len(clips), 1)
    return {name: float(c / total) for name, c in zip(ACTION_CLASSES, counts)}


def estimate_action_marginal(spec: SceneSpec, samples: int = 20000, seed: int = 12345) -> Dict[str, float]:
    """
    Monte-Carlo estimate of the rule table's action marginal over the
    layout distribution, without rendering or detection.
    """
    spec.validate()
    counts = np.zeros(len(ACTION_CLASSES))
    for i in range(samples):
        objects = _sample_layout(clip_rng(seed, f"marginal_{i}"), spec)
        target = objects[significant_index(objects, spec)]
        counts[action_for(target.kind, position_label(target.box, spec.width))] += 1
    return {name: float(c / samples) for name, c in zip(ACTION_CLASSES, counts)}


def explanation_slots() -> List[Tuple[str, str, str]]:
    """Every (object, action/status, position) triple of the grammar"""
    return [
        (o, a, p)
        for o in OBJECT_NAMES
        for a in ACTION_STATUSES
        for p in SLOT_VOCABULARIES["position"]
    ]
