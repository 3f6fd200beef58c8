"""
Keyframe overlays: red tint on attended patches, blue tint elsewhere,
box borders whose brightness follows the significance score, and the
generated and reference explanations on a text band.
"""

from typing import Optional, Sequence

import numpy as np
from loguru import logger
from PIL import Image, ImageDraw, ImageFont

from exceptions import ConfigError, ShapeMismatchError
from models import Box, PatchAttentionMap

STRONG_FOCUS = np.array([255.0, 0.0, 0.0])
WEAK_FOCUS = np.array([0.0, 0.0, 255.0])
TINT_ALPHA = 0.4
BOX_COLOR = (255, 255, 0)
BAND_COLOR = (0, 0, 0)
TEXT_COLOR = (255, 255, 255)


def tint_patches(pixels: np.ndarray, patch_map: PatchAttentionMap, alpha: float = TINT_ALPHA) -> np.ndarray:
    """
    Blend each patch toward red (map 1) or blue (map 0).

    Args:
        pixels: (H, W, 3) frame in [0, 1]
        patch_map: binary patch grid of the same frame size

    Returns:
        (H, W, 3) uint8 raster
    """
    height, width = pixels.shape[:2]
    if (patch_map.height, patch_map.width) != (height, width):
        raise ShapeMismatchError(
            f"Patch map covers {patch_map.height}x{patch_map.width}, frame is {height}x{width}"
        )
    p = patch_map.patch_size
    cells = np.kron(patch_map.grid.astype(bool), np.ones((p, p), dtype=bool))
    colors = np.where(cells[..., None], STRONG_FOCUS, WEAK_FOCUS)
    blended = (1.0 - alpha) * pixels * 255.0 + alpha * colors
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def render_overlay(pixels: np.ndarray, patch_map: PatchAttentionMap, boxes: Sequence[Box] = (),
                   box_scores: Optional[Sequence[float]] = None, generated: str = "", reference: str = "",
                   scale: int = 4) -> Image.Image:
    """
    Upscaled keyframe overlay.

    Args:
        pixels: (H, W, 3) keyframe in [0, 1]
        patch_map: map to tint
        boxes: boxes to outline (selected detections or the annotated box)
        box_scores: A_sig of each box; brighter border for higher scores
        generated: explanation produced by the model
        reference: annotated explanation
        scale: integer upscale factor

    Returns:
        RGB image of size (W * scale, H * scale)
    """
    if not isinstance(scale, int) or isinstance(scale, bool) or scale < 1:
        raise ConfigError(f"Upscale factor must be a positive integer, got {scale!r}")
    height, width = pixels.shape[:2]
    image = Image.fromarray(tint_patches(pixels, patch_map)).resize((width * scale, height * scale),
                                                                     Image.Resampling.NEAREST)
    draw = ImageDraw.Draw(image)

    if box_scores is not None and len(box_scores) != len(boxes):
        raise ShapeMismatchError(f"{len(box_scores)} scores for {len(boxes)} boxes")
    top = max(box_scores) if box_scores is not None and len(box_scores) else 1.0
    for i, box in enumerate(boxes):
        strength = 1.0 if box_scores is None or top <= 0 else box_scores[i] / top
        color = tuple(int(round(c * (0.25 + 0.75 * strength))) for c in BOX_COLOR)
        draw.rectangle(
            [box.x_min * scale, box.y_min * scale, box.x_max * scale - 1, box.y_max * scale - 1],
            outline=color, width=max(1, scale // 2),
        )

    lines = [line for line in (f"gen: {generated}" if generated else "",
                               f"ref: {reference}" if reference else "") if line]
    if lines:
        font = ImageFont.load_default()
        line_height = draw.textbbox((0, 0), "Ag", font=font)[3] + 2
        band_top = image.height - line_height * len(lines) - 2
        draw.rectangle([0, band_top, image.width - 1, image.height - 1], fill=BAND_COLOR)
        for k, line in enumerate(lines):
            draw.text((2, band_top + 1 + k * line_height), line, fill=TEXT_COLOR, font=font)
    return image


def save_overlay(image: Image.Image, path: str):
    image.save(path, format="PNG")
    logger.info(f"Wrote overlay {path} ({image.width}x{image.height})")
