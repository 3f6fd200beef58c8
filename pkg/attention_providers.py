"""
Sources of patch attention maps for the explainer: none, the annotated
object box, or the boxes the attention map generator selects.
"""

from typing import Dict, List, Optional, Sequence

from loguru import logger

from attn_generator import AttentionMapGenerator, select_significant
from exceptions import CheckpointError, ConfigError
from geometry import project_to_patch_map
from models import LabeledClip, PatchAttentionMap

ATTENTION_SOURCES = ("none", "oracle-object", "predicted-patch")


class AttentionProvider:
    source = "none"

    def __init__(self, patch_size: int = 8):
        self.patch_size = patch_size

    def map_for(self, clip: LabeledClip) -> Optional[PatchAttentionMap]:
        return None

    def maps(self, clips: Sequence[LabeledClip]) -> Optional[List[Optional[PatchAttentionMap]]]:
        """One keyframe map per clip, or None when the source gives no maps"""
        return None

    def _project(self, clip: LabeledClip, boxes) -> PatchAttentionMap:
        height, width = clip.keyframe.pixels.shape[:2]
        return project_to_patch_map(boxes, height, width, self.patch_size)


class NoAttention(AttentionProvider):
    """Baseline: maps absent, nothing masked"""


class OracleObjectAttention(AttentionProvider):
    """Map of the annotated significant-object box"""

    source = "oracle-object"

    def map_for(self, clip: LabeledClip) -> PatchAttentionMap:
        return self._project(clip, [clip.gt_box])

    def maps(self, clips):
        return [self.map_for(clip) for clip in clips]


class PredictedPatchAttention(AttentionProvider):
    """Map of the detections picked by a trained attention map generator"""

    source = "predicted-patch"

    def __init__(self, generator: AttentionMapGenerator, patch_size: int = 8, tau: float = 0.5, k: int = 3):
        super().__init__(patch_size)
        self.generator = generator.eval()
        self.tau = tau
        self.k = k
        self._cache: Dict[str, PatchAttentionMap] = {}

    def selected(self, clip: LabeledClip) -> List[int]:
        return select_significant(self.generator.score_clip(clip).a_sig, self.tau, self.k)

    def map_for(self, clip: LabeledClip) -> PatchAttentionMap:
        if clip.clip_id not in self._cache:
            boxes = [clip.detections[i].box for i in self.selected(clip)]
            self._cache[clip.clip_id] = self._project(clip, boxes)
        return self._cache[clip.clip_id]

    def maps(self, clips):
        return [self.map_for(clip) for clip in clips]


def make_attention_provider(source: str, patch_size: int = 8,
                            generator: Optional[AttentionMapGenerator] = None,
                            tau: float = 0.5, k: int = 3) -> AttentionProvider:
    if source not in ATTENTION_SOURCES:
        raise ConfigError(f"Unknown attention source '{source}', expected one of {ATTENTION_SOURCES}")
    if source == "oracle-object":
        return OracleObjectAttention(patch_size)
    if source == "predicted-patch":
        if generator is None:
            raise CheckpointError("predicted-patch attention needs a trained generator checkpoint")
        logger.info(f"Using predicted patch attention (tau={tau}, k={k})")
        return PredictedPatchAttention(generator, patch_size, tau, k)
    return NoAttention(patch_size)
