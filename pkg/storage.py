"""
On-disk storage for datasets, checkpoints and JSON artifacts.

Dataset layout:
    manifest.json
    clips/<clip_id>/frame_<k>.png
    clips/<clip_id>/crop_<i>.png
    clips/<clip_id>/annotation.json

Checkpoint layout:
    manifest.json
    <parameter name>.f32   (little-endian float32, row-major)
"""

import hashlib
import json
import os
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
from loguru import logger
from PIL import Image

from exceptions import CheckpointError, DatasetFormatError
from models import ACTION_CLASSES, Box, DetectedObject, Frame, LabeledClip, SceneSpec
from scene_data import ACTION_TABLE, parse_explanation, to_unit
from vocabulary import SLOT_VOCABULARIES

DATASET_NAME = "synthetic-driving-clips"
DATASET_VERSION = "1.0"
CHECKPOINT_FORMAT = "f32-le-rowmajor"


def write_json(path: str, data: Any):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_jsonl(path: str, rows: Iterable[Dict[str, Any]]):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"{path}:{line_no} is not valid JSON: {str(e)}") from e
    return rows


def _to_png(pixels: np.ndarray, path: str):
    raster = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(raster).save(path)


def _from_png(path: str) -> np.ndarray:
    with Image.open(path) as image:
        return to_unit(np.asarray(image.convert("RGB"), dtype=np.uint8))


def _manifest(spec: Optional[SceneSpec], clip_ids: List[str], extra: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    spec = spec or SceneSpec()
    manifest = {
        "name": DATASET_NAME,
        "version": DATASET_VERSION,
        "height": spec.height,
        "width": spec.width,
        "num_frames": spec.num_frames,
        "patch_size": spec.patch_size,
        "vocabularies": {slot: list(v) for slot, v in SLOT_VOCABULARIES.items()},
        "action_classes": list(ACTION_CLASSES),
        "action_table": [
            {"kind": kind, "position": position, "action": action}
            for (kind, position), action in ACTION_TABLE.items()
        ],
        "scene_spec": spec.to_dict(),
        "clips": clip_ids,
    }
    if extra:
        manifest.update(extra)
    return manifest


def save_dataset(clips: List[LabeledClip], directory: str, spec: Optional[SceneSpec] = None,
                 extra: Optional[Dict[str, Any]] = None):
    """
    Write clips to a dataset directory.

    Args:
        clips: Clips to store
        directory: Target directory, created when missing
        spec: Scene spec recorded in the manifest
        extra: Additional manifest entries (e.g. corpus summaries)
    """
    clips_dir = os.path.join(directory, "clips")
    os.makedirs(clips_dir, exist_ok=True)

    for clip in clips:
        clip_dir = os.path.join(clips_dir, clip.clip_id)
        os.makedirs(clip_dir, exist_ok=True)
        for frame in clip.frames:
            _to_png(frame.pixels, os.path.join(clip_dir, f"frame_{frame.index}.png"))

        detections = []
        for det in clip.detections:
            crop_file = f"crop_{det.index}.png"
            _to_png(det.crop, os.path.join(clip_dir, crop_file))
            detections.append({"index": det.index, "box": det.box.to_list(), "crop_file": crop_file})

        write_json(os.path.join(clip_dir, "annotation.json"), {
            "clip_id": clip.clip_id,
            "num_frames": clip.num_frames,
            "keyframe_index": clip.keyframe_index,
            "detections": detections,
            "gt_box": clip.gt_box.to_list(),
            "gt_detection_index": clip.gt_detection_index,
            "gt_action": ACTION_CLASSES[clip.gt_action],
            "gt_explanation": clip.gt_explanation,
        })

    write_json(os.path.join(directory, "manifest.json"), _manifest(spec, [c.clip_id for c in clips], extra))
    logger.info(f"Stored {len(clips)} clips in {directory}")


def load_manifest(directory: str) -> Dict[str, Any]:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise DatasetFormatError(f"No manifest.json in {directory}")
    try:
        return read_json(path)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"Corrupt manifest.json in {directory}: {str(e)}") from e


def _field(annotation: Dict[str, Any], clip_id: str, name: str):
    if name not in annotation:
        raise DatasetFormatError("missing field", clip_id=clip_id, field=name)
    return annotation[name]


def _int_field(annotation: Dict[str, Any], clip_id: str, name: str) -> int:
    value = _field(annotation, clip_id, name)
    if isinstance(value, bool) or not isinstance(value, int):
        raise DatasetFormatError(f"expected an integer, got {value!r}", clip_id=clip_id, field=name)
    return value


def _load_clip(clip_dir: str, clip_id: str) -> LabeledClip:
    path = os.path.join(clip_dir, "annotation.json")
    try:
        annotation = read_json(path)
    except FileNotFoundError as e:
        raise DatasetFormatError("annotation.json not found", clip_id=clip_id, field="annotation.json") from e
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"corrupt JSON: {str(e)}", clip_id=clip_id, field="annotation.json") from e
    if not isinstance(annotation, dict):
        raise DatasetFormatError("expected a JSON object", clip_id=clip_id, field="annotation.json")

    keyframe_index = _int_field(annotation, clip_id, "keyframe_index")
    num_frames = _int_field(annotation, clip_id, "num_frames") if "num_frames" in annotation else keyframe_index + 1
    try:
        frames = [
            Frame(pixels=_from_png(os.path.join(clip_dir, f"frame_{k}.png")), index=k)
            for k in range(num_frames)
        ]
    except OSError as e:
        raise DatasetFormatError(f"unreadable frame: {str(e)}", clip_id=clip_id, field="frames") from e
    if not 0 <= keyframe_index < num_frames:
        raise DatasetFormatError("keyframe outside the clip", clip_id=clip_id, field="keyframe_index")

    entries = _field(annotation, clip_id, "detections")
    if not isinstance(entries, list):
        raise DatasetFormatError(f"expected a list, got {type(entries).__name__}", clip_id=clip_id, field="detections")
    detections = []
    for entry in entries:
        try:
            detections.append(DetectedObject(
                index=int(entry["index"]),
                box=Box.from_list(entry["box"]),
                crop=_from_png(os.path.join(clip_dir, entry["crop_file"])),
            ))
        except (KeyError, TypeError, ValueError, OSError) as e:
            raise DatasetFormatError(f"bad detection entry: {str(e)}", clip_id=clip_id, field="detections") from e

    try:
        gt_box = Box.from_list(_field(annotation, clip_id, "gt_box"))
    except (TypeError, ValueError) as e:
        raise DatasetFormatError(str(e), clip_id=clip_id, field="gt_box") from e

    gt_detection_index = _field(annotation, clip_id, "gt_detection_index")
    if not isinstance(gt_detection_index, int) or not 0 <= gt_detection_index < len(detections):
        raise DatasetFormatError("index outside detections", clip_id=clip_id, field="gt_detection_index")

    gt_action = _field(annotation, clip_id, "gt_action")
    if gt_action not in ACTION_CLASSES:
        raise DatasetFormatError(f"unknown action '{gt_action}'", clip_id=clip_id, field="gt_action")

    gt_explanation = _field(annotation, clip_id, "gt_explanation")
    if parse_explanation(gt_explanation) is None:
        raise DatasetFormatError("explanation outside the template grammar", clip_id=clip_id,
                                 field="gt_explanation")

    return LabeledClip(
        clip_id=clip_id,
        frames=frames,
        keyframe_index=keyframe_index,
        detections=detections,
        gt_box=gt_box,
        gt_detection_index=gt_detection_index,
        gt_action=ACTION_CLASSES.index(gt_action),
        gt_explanation=gt_explanation,
    )


def load_dataset(directory: str) -> List[LabeledClip]:
    """
    Load every clip listed in a dataset manifest.

    Raises:
        DatasetFormatError: naming the clip and field that failed to load
    """
    manifest = load_manifest(directory)
    clip_ids = manifest.get("clips")
    if not isinstance(clip_ids, list):
        raise DatasetFormatError(f"manifest.json in {directory} has no clip list")

    clips = []
    for clip_id in clip_ids:
        try:
            clips.append(_load_clip(os.path.join(directory, "clips", clip_id), clip_id))
        except DatasetFormatError as e:
            logger.error(f"Error loading dataset {directory}: {str(e)}")
            raise
    logger.info(f"Loaded {len(clips)} clips from {directory}")
    return clips


def load_clip(directory: str, clip_id: str) -> LabeledClip:
    """Load a single clip listed in the dataset manifest"""
    if clip_id not in load_manifest(directory).get("clips", []):
        raise DatasetFormatError(f"unknown clip in {directory}", clip_id=clip_id, field="clip_id")
    return _load_clip(os.path.join(directory, "clips", clip_id), clip_id)


def config_hash(config: Dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def save_checkpoint(model: torch.nn.Module, directory: str, kind: str, model_config: Dict[str, Any],
                    seeds: Dict[str, int], step: int, extra: Optional[Dict[str, Any]] = None):
    """Write one raw float32 file per named parameter plus a manifest"""
    os.makedirs(directory, exist_ok=True)
    parameters = {}
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().to(torch.float32).numpy()
        file_name = f"{name}.f32"
        np.ascontiguousarray(array).astype("<f4").tofile(os.path.join(directory, file_name))
        parameters[name] = {"file": file_name, "shape": list(array.shape)}

    manifest = {
        "kind": kind,
        "format": CHECKPOINT_FORMAT,
        "model_config": model_config,
        "config_hash": config_hash(model_config),
        "seeds": seeds,
        "step": step,
        "parameters": parameters,
    }
    if extra:
        manifest.update(extra)
    write_json(os.path.join(directory, "manifest.json"), manifest)
    logger.info(f"Saved {kind} checkpoint ({len(parameters)} arrays, step {step}) to {directory}")


def load_checkpoint(directory: str, kind: Optional[str] = None) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    """
    Read a checkpoint directory.

    Returns:
        (manifest, state dict of float32 tensors)
    """
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise CheckpointError(f"No checkpoint manifest in {directory}")
    try:
        manifest = read_json(path)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Corrupt checkpoint manifest in {directory}: {str(e)}") from e
    if not isinstance(manifest, dict):
        raise CheckpointError(f"Checkpoint manifest in {directory} is not a JSON object")
    if kind is not None and manifest.get("kind") != kind:
        raise CheckpointError(f"{directory} holds a '{manifest.get('kind')}' checkpoint, expected '{kind}'")
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"Unsupported checkpoint format {manifest.get('format')!r}")

    state = {}
    parameters = manifest.get("parameters", {})
    if not isinstance(parameters, dict):
        raise CheckpointError(f"Checkpoint manifest in {directory} has no parameter table")
    for name, entry in parameters.items():
        try:
            file_path = os.path.join(directory, entry["file"])
            shape = tuple(int(d) for d in entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"Bad manifest entry for parameter {name}: {str(e)}") from e
        try:
            array = np.fromfile(file_path, dtype="<f4")
        except OSError as e:
            raise CheckpointError(f"Missing parameter file for {name}: {str(e)}") from e
        if array.size != int(np.prod(shape)):
            raise CheckpointError(f"Parameter {name} has {array.size} values, expected shape {shape}")
        state[name] = torch.from_numpy(array.reshape(shape).astype(np.float32))
    return manifest, state
